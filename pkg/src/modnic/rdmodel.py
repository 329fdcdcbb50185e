"""Lambda-domain rate-distortion model.

The rate follows an exponential law in lambda and the distortion is the
matching solution of ``lambda = -dR/dD``::

    lambda = alpha * (exp(beta * R) - 1)      R = ln(1 + lambda / alpha) / beta
    D = ln(1 + alpha / lambda) / (alpha * beta)

Fitted coefficients depend on the distortion units.  Everything here uses MSE
on [0, 1] pixel values, or ``1 - MS-SSIM`` for the MS-SSIM preset.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

METRICS = ("mse", "msssim")
MODELS = ("D_of_lambda", "lambda_of_R")
SAMPLE_FIELDS = ("lambda", "bpp", "distortion", "metric")


class FitError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


class RateControlError(RuntimeError):
    pass


@dataclass(frozen=True)
class RdSample:
    lam: float
    bpp: float
    distortion: float
    metric: str = "mse"

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.lam, self.bpp, self.distortion)):
            raise ValueError(f"non-finite sample {self}")
        if self.lam <= 0 or self.bpp < 0:
            raise ValueError(f"sample needs lambda > 0 and bpp >= 0, got {self}")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")


@dataclass
class RdModelParams:
    alpha: float
    beta: float
    metric: str = "mse"
    model: str = "D_of_lambda"
    residual: float = float("nan")
    r2: float = float("nan")
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError(f"alpha and beta must be positive, got {self.alpha}, {self.beta}")

    def report(self) -> str:
        return (
            f"model = {self.model}\nmetric = {self.metric}\nalpha = {self.alpha!r}\n"
            f"beta = {self.beta!r}\nresidual = {self.residual!r}\nr2 = {self.r2!r}\n"
        )


PRESETS = {
    "mse": RdModelParams(39.301, 1.296, "mse"),
    "msssim": RdModelParams(89.072, 1.225, "msssim"),
}


# ---------------------------------------------------------------- closed forms


def eval_lambda_of_R(R, alpha: float, beta: float):
    R = np.asarray(R, dtype=np.float64)
    if np.any(R < 0):
        raise ValueError("rate must be >= 0")
    out = alpha * np.expm1(beta * R)
    return float(out) if out.ndim == 0 else out


def eval_R_of_lambda(lam, alpha: float, beta: float):
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam < 0):
        raise ValueError("lambda must be >= 0")
    out = np.log1p(lam / alpha) / beta
    return float(out) if out.ndim == 0 else out


def eval_D_of_lambda(lam, alpha: float, beta: float):
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam <= 0):
        raise ValueError("lambda must be > 0")
    out = np.log1p(alpha / lam) / (alpha * beta)
    return float(out) if out.ndim == 0 else out


def consistency_check(alpha: float, beta: float, lambdas: Iterable[float], rel_step: float = 1e-4) -> float:
    """Max relative deviation of the finite-difference slope -dR/dD from lambda.

    Both curves are differentiated along lambda with a central difference of
    ``rel_step * lambda``.
    """
    worst = 0.0
    for lam in lambdas:
        if lam <= 0:
            raise ValueError("lambda grid must be positive")
        h = rel_step * lam
        dR = eval_R_of_lambda(lam + h, alpha, beta) - eval_R_of_lambda(lam - h, alpha, beta)
        dD = eval_D_of_lambda(lam + h, alpha, beta) - eval_D_of_lambda(lam - h, alpha, beta)
        worst = max(worst, abs(-dR / dD - lam) / lam)
    return worst


# ---------------------------------------------------------------- fitting


def _model_fn(model: str) -> Callable:
    """Prediction and Jacobian w.r.t. (log alpha, log beta)."""
    if model == "D_of_lambda":

        def fn(x, la, lb):
            a, b = math.exp(la), math.exp(lb)
            pred = np.log1p(a / x) / (a * b)
            # d/d(log a) of ln(1 + a/x)/(a b) = (a/(x+a) - ln(1 + a/x)) / (a b)
            ja = (a / (x + a) - np.log1p(a / x)) / (a * b)
            return pred, np.stack([ja, -pred], axis=1)

    elif model == "lambda_of_R":
        # residuals in rate space: R = ln(1 + lambda/a) / b

        def fn(x, la, lb):
            a, b = math.exp(la), math.exp(lb)
            pred = np.log1p(x / a) / b
            ja = -(x / (x + a)) / b
            return pred, np.stack([ja, -pred], axis=1)

    else:
        raise ValueError(f"unknown model {model!r}; choose from {MODELS}")
    return fn


def _levenberg_marquardt(fn, x, y, w, theta, iters: int = 500):
    mu = 1e-3
    pred, J = fn(x, *theta)
    r = w * (pred - y)
    cost = float(r @ r)
    for _ in range(iters):
        Jw = J * w[:, None]
        g = Jw.T @ r
        H = Jw.T @ Jw
        improved = False
        while mu < 1e12:
            step = np.linalg.solve(H + mu * np.diag(np.diag(H) + 1e-300), -g)
            cand = theta + step
            if np.all(np.abs(cand) < 50):
                p2, J2 = fn(x, *cand)
                r2 = w * (p2 - y)
                c2 = float(r2 @ r2)
                if np.isfinite(c2) and c2 <= cost:
                    improved = True
                    done = cost - c2 <= 1e-15 * cost or np.max(np.abs(step)) < 1e-13
                    theta, pred, J, r, cost = cand, p2, J2, r2, c2
                    mu = max(mu / 3.0, 1e-12)
                    break
            mu *= 4.0
        if not improved or done:
            break
    return theta, cost


def fit(
    samples: Sequence[RdSample],
    model: str = "D_of_lambda",
    log_weight: bool = False,
    starts: int = 16,
    seed: int = 0,
) -> RdModelParams:
    """Multi-start damped Gauss-Newton least squares.

    ``D_of_lambda`` fits distortion against lambda; ``lambda_of_R`` fits rate
    against lambda.  ``log_weight`` weights residuals by 1/target so the fit is
    in relative terms.
    """
    if len(samples) < 3:
        raise ValueError("need at least 3 samples")
    lams = np.array([s.lam for s in samples], dtype=np.float64)
    if len(np.unique(lams)) != len(lams):
        raise ValueError("duplicate lambda values")
    metrics = {s.metric for s in samples}
    if len(metrics) != 1:
        raise ValueError(f"samples mix metrics {sorted(metrics)}")
    fn = _model_fn(model)
    if model == "D_of_lambda":
        y = np.array([s.distortion for s in samples], dtype=np.float64)
    else:
        y = np.array([s.bpp for s in samples], dtype=np.float64)
    w = 1.0 / np.maximum(np.abs(y), 1e-300) if log_weight else np.ones_like(y)

    # a log-spaced grid over alpha x beta, then seeded jitter if more starts are asked for
    side = max(2, int(math.ceil(math.sqrt(starts))))
    grid = [(la, lb) for la in np.linspace(math.log(1e-2), math.log(1e4), side)
            for lb in np.linspace(math.log(1e-2), math.log(1e2), side)]
    rng = np.random.default_rng(seed)
    while len(grid) < starts:
        grid.append((rng.uniform(math.log(1e-2), math.log(1e4)), rng.uniform(math.log(1e-2), math.log(1e2))))

    best, tried = None, []
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for start in grid:
            theta, cost = _levenberg_marquardt(fn, lams, y, w, np.array(start, dtype=np.float64))
            tried.append((start, cost))
            if np.isfinite(cost) and (best is None or cost < best[1]):
                best = (theta, cost)
    if best is None:
        raise FitError("every start diverged", {"starts": tried})
    theta, cost = best
    pred, _ = fn(lams, *theta)
    ss_res = float(np.sum((pred - y) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)
    return RdModelParams(
        math.exp(theta[0]), math.exp(theta[1]), samples[0].metric, model, ss_res, r2,
        {"weighted_cost": cost, "starts": len(grid)},
    )


# ---------------------------------------------------------------- rate control


@dataclass
class RateControlResult:
    lam: float
    achieved_bpp: float
    bre: float
    history: list[tuple[float, float]]  # (lambda, achieved bpp) per encode


def rate_control(
    target_bpp: float,
    image,
    codec,
    params: RdModelParams,
    refine: int = 3,
    bpp_range: tuple[float, float] | None = None,
) -> RateControlResult:
    """Pick lambda for a target rate from the model, then optionally refine.

    ``codec`` needs ``bpp(image, lam)`` and ``lambda_max``; ``image`` may be one
    image or a batch (the rate is then pooled over the batch).  Refinement
    keeps a bracket ``[lo, hi]`` in log-lambda whose rates straddle the target
    and places each re-encode by interpolation inside it, falling back to the
    midpoint near the ends.  The lowest-error encode is returned.
    """
    if target_bpp <= 0:
        raise ValueError("target bpp must be positive")
    lam_lo, lam_hi = 1.0, float(codec.lambda_max)
    if bpp_range is None:
        bpp_range = (codec.bpp(image, lam_lo), codec.bpp(image, lam_hi))
    r_lo, r_hi = bpp_range
    if not r_lo <= target_bpp <= r_hi:
        raise RateControlError(
            f"target {target_bpp:.4f} bpp outside the achievable range [{r_lo:.4f}, {r_hi:.4f}]"
        )
    lam = float(np.clip(eval_lambda_of_R(target_bpp, params.alpha, params.beta), lam_lo, lam_hi))
    history = []

    def encode(lam: float) -> float:
        r = codec.bpp(image, lam)
        history.append((lam, r))
        return r

    rate = encode(lam)
    lo, hi = (math.log(lam_lo), r_lo), (math.log(lam_hi), r_hi)
    for _ in range(refine):
        if rate == target_bpp:
            break
        if not lo[1] <= rate <= hi[1]:
            raise RateControlError(
                f"rate is not monotone in lambda: {rate:.4f} bpp at lambda {lam:.4g} "
                f"outside bracket [{lo[1]:.4f}, {hi[1]:.4f}]"
            )
        if rate < target_bpp:
            lo = (math.log(lam), rate)
        else:
            hi = (math.log(lam), rate)
        if hi[1] > lo[1]:
            t = (target_bpp - lo[1]) / (hi[1] - lo[1])
            t = min(max(t, 0.1), 0.9)
        else:
            t = 0.5
        lam = math.exp(lo[0] + t * (hi[0] - lo[0]))
        rate = encode(lam)
    best_lam, best_rate = min(history, key=lambda h: abs(h[1] - target_bpp))
    return RateControlResult(best_lam, best_rate, abs(best_rate - target_bpp) / target_bpp, history)


# ---------------------------------------------------------------- BD-rate


def bd_rate(curve_a: Sequence[tuple[float, float]], curve_b: Sequence[tuple[float, float]]) -> float:
    """Average rate difference of B relative to A at equal quality, in percent.

    Each curve is a list of (rate, quality) points; log-rate is fitted as a
    cubic in quality and the difference is averaged over the shared quality
    interval.
    """
    polys, ranges = [], []
    for curve in (curve_a, curve_b):
        pts = np.asarray(curve, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 4 or pts.shape[1] != 2:
            raise ValueError("each curve needs at least 4 (rate, quality) points")
        if np.any(pts[:, 0] <= 0):
            raise ValueError("rates must be positive")
        if len(np.unique(pts[:, 1])) != len(pts):
            raise ValueError("quality values must be distinct")
        polys.append(np.polyfit(pts[:, 1], np.log(pts[:, 0]), 3))
        ranges.append((pts[:, 1].min(), pts[:, 1].max()))
    q_lo = max(ranges[0][0], ranges[1][0])
    q_hi = min(ranges[0][1], ranges[1][1])
    if q_hi <= q_lo:
        raise ValueError("the curves have no overlapping quality interval")
    ints = [np.polyval(np.polyint(p), q_hi) - np.polyval(np.polyint(p), q_lo) for p in polys]
    avg = (ints[1] - ints[0]) / (q_hi - q_lo)
    return float((math.exp(avg) - 1.0) * 100.0)


# ---------------------------------------------------------------- CSV


def write_samples(samples: Iterable[RdSample], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(SAMPLE_FIELDS)
    for s in samples:
        w.writerow([repr(float(s.lam)), repr(float(s.bpp)), repr(float(s.distortion)), s.metric])


def read_samples(fh) -> list[RdSample]:
    reader = csv.DictReader(fh)
    if tuple(reader.fieldnames or ()) != SAMPLE_FIELDS:
        raise ValueError(f"expected header {','.join(SAMPLE_FIELDS)}, got {reader.fieldnames}")
    return [RdSample(float(r["lambda"]), float(r["bpp"]), float(r["distortion"]), r["metric"]) for r in reader]


def samples_to_text(samples: Iterable[RdSample]) -> str:
    buf = io.StringIO()
    write_samples(samples, buf)
    return buf.getvalue()


def fitted_curve_csv(params: RdModelParams, lambdas: Iterable[float]) -> str:
    lines = ["lambda,bpp,distortion"]
    for lam in lambdas:
        lines.append(
            f"{lam!r},{eval_R_of_lambda(lam, params.alpha, params.beta)!r},"
            f"{eval_D_of_lambda(lam, params.alpha, params.beta)!r}"
        )
    return "\n".join(lines) + "\n"
