"""Command-line interface: ``modnic <command> [flags]``.

All randomness comes from ``--seed`` (falling back to ``$MODNIC_SEED``, then
0).  Runtime failures print a one-line diagnostic on standard error and exit
with status 1; usage errors exit with status 2.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import datagen, gradcheck, rdmodel
from .checkpoint import load_checkpoint, save_checkpoint
from .codec import Codec
from .config import TrainConfig
from .formats import FormatError, read_image, to_uint8, to_unit, write_image
from .metrics import QualityReport
from .rangecoder import RangeCoderError

log = logging.getLogger("modnic")

SWEEP_FIELDS = ("lambda", "bpp", "mse", "psnr_db", "msssim", "msssim_db")
IMAGE_SUFFIXES = (".ppm", ".pgm", ".pnm")


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------- helpers


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("MODNIC_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise CliError(f"MODNIC_SEED must be an integer, got {env!r}") from None


def _image_paths(inputs: list[str]) -> list[Path]:
    paths = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES))
        else:
            paths.append(p)
    if not paths:
        raise CliError(f"no images found in {inputs}")
    return paths


def _load_unit(path: Path) -> np.ndarray:
    return to_unit(read_image(path))


def _load_config(args) -> TrainConfig:
    if getattr(args, "config", None):
        cfg = TrainConfig.from_text(Path(args.config).read_text())
    else:
        cfg = TrainConfig.preset_config(getattr(args, "preset", None) or "toy")
    return cfg.replace(seed=_seed(args))


def _dataset(cfg: TrainConfig, data: str | None) -> np.ndarray:
    source = data or cfg.dataset
    if source:
        images = [_load_unit(p) for p in _image_paths([source])]
        shapes = {im.shape for im in images}
        if len(shapes) != 1:
            raise CliError(f"training images must share one size, found {sorted(shapes)}")
        return np.stack(images)
    raw = datagen.generate(cfg.synthetic_kind, cfg.synthetic_count, cfg.image_size, cfg.seed)
    return datagen.as_unit_batch(raw)


def _codec(path: str) -> Codec:
    ckpt, raw = load_checkpoint(path)
    return Codec(ckpt, raw)


def _parse_lambdas(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"--lambdas expects comma-separated numbers, got {text!r}") from None
    if not values:
        raise CliError("--lambdas is empty")
    return values


def _write_text(path: str | None, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _sweep_rows(codec: Codec, paths: list[Path], lambdas: list[float]) -> list[dict]:
    rows = []
    for path in paths:
        image = _load_unit(path)
        for lam in lambdas:
            enc = codec.encode(image, lam)
            q = QualityReport.compare(image, enc.reconstruction, enc.bpp)
            rows.append({"lambda": lam, "bpp": q.bpp, "mse": q.mse, "psnr_db": q.psnr_db,
                         "msssim": q.msssim, "msssim_db": q.msssim_db})
    return rows


def _rows_to_csv(rows: list[dict], fields=SWEEP_FIELDS) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(float(r[k])) for k in fields})
    return buf.getvalue()


def _read_sweep(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(SWEEP_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise CliError(f"{path}: not a sweep CSV, missing columns {sorted(missing)}")
        return [{k: float(r[k]) for k in SWEEP_FIELDS} for r in reader]


def _average_by_lambda(rows: list[dict]) -> dict[float, dict]:
    groups = defaultdict(list)
    for r in rows:
        groups[r["lambda"]].append(r)
    return {lam: {k: float(np.mean([r[k] for r in g])) for k in SWEEP_FIELDS} for lam, g in sorted(groups.items())}


def _samples_from(path: str, metric: str) -> list[rdmodel.RdSample]:
    with open(path, newline="") as fh:
        header = fh.readline().strip().split(",")
    if tuple(header) == rdmodel.SAMPLE_FIELDS:
        with open(path, newline="") as fh:
            return [s for s in rdmodel.read_samples(fh) if s.metric == metric]
    means = _average_by_lambda(_read_sweep(path))
    key = "mse" if metric == "mse" else "msssim"
    return [
        rdmodel.RdSample(lam, m["bpp"], m[key] if metric == "mse" else 1.0 - m[key], metric)
        for lam, m in means.items()
    ]


def _read_params(path: str) -> rdmodel.RdModelParams:
    values = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            values[k] = v
    try:
        return rdmodel.RdModelParams(
            float(values["alpha"]), float(values["beta"]), values.get("metric", "mse"),
            values.get("model", "lambda_of_R"),
        )
    except KeyError as exc:
        raise CliError(f"{path}: fit report lacks {exc.args[0]!r}") from None


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    seed = _seed(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images = datagen.generate(args.kind, args.count, args.size, seed)
    for i, img in enumerate(images):
        write_image(out / f"img_{i:05d}.ppm", img)
    print(f"wrote {len(images)} images to {out}")
    return 0


def cmd_train_base(args) -> int:
    from .trainer import TrainingError, train_base

    cfg = _load_config(args)
    if args.steps is not None:
        cfg = cfg.replace(base_steps=args.steps)
    images = _dataset(cfg, args.data)
    try:
        ckpt, _ = train_base(cfg, images, args.log)
    except TrainingError as exc:
        save_checkpoint(args.out + ".partial", exc.checkpoint)
        raise CliError(f"{exc}; last good state saved to {args.out}.partial") from None
    save_checkpoint(args.out, ckpt)
    print(f"base checkpoint written to {args.out} after {ckpt.step} steps")
    return 0


def cmd_train_modnet(args) -> int:
    from .trainer import TrainingError, train_modnet

    base, _ = load_checkpoint(args.base)
    cfg = TrainConfig.from_text(Path(args.config).read_text()) if args.config else base.config
    cfg = cfg.replace(seed=_seed(args))
    if args.steps is not None:
        cfg = cfg.replace(modnet_steps=args.steps)
    images = _dataset(cfg, args.data)
    try:
        ckpt, _ = train_modnet(cfg, base, images, args.log)
    except TrainingError as exc:
        save_checkpoint(args.out + ".partial", exc.checkpoint)
        raise CliError(f"{exc}; last good state saved to {args.out}.partial") from None
    save_checkpoint(args.out, ckpt)
    print(f"VBR checkpoint written to {args.out} after {ckpt.step} steps")
    return 0


def cmd_encode(args) -> int:
    codec = _codec(args.model)
    image = _load_unit(Path(args.input))
    enc = codec.encode(image, args.lam, args.hard_mask)
    Path(args.output).write_bytes(enc.data)
    if args.recon:
        write_image(args.recon, to_uint8(enc.reconstruction))
    if codec.stats.clamped:
        log.warning("%d latent values were clamped to the coder support", codec.stats.clamped)
    print(f"{len(enc.data)} bytes, {enc.bpp:.6f} bpp")
    return 0


def cmd_decode(args) -> int:
    codec = _codec(args.model)
    recon = codec.decode(Path(args.input).read_bytes())
    write_image(args.output, to_uint8(recon))
    return 0


def cmd_eval(args) -> int:
    codec = _codec(args.model)
    rows = _sweep_rows(codec, _image_paths(args.inputs), [args.lam])
    _write_text(args.out, _rows_to_csv(rows))
    return 0


def cmd_sweep(args) -> int:
    codec = _codec(args.model)
    rows = _sweep_rows(codec, _image_paths(args.inputs), _parse_lambdas(args.lambdas))
    _write_text(args.out, _rows_to_csv(rows))
    return 0


def cmd_fit_rd(args) -> int:
    samples = _samples_from(args.samples, args.metric)
    params = rdmodel.fit(samples, args.model, log_weight=args.log_weight, seed=_seed(args))
    _write_text(args.out, params.report())
    if args.curve:
        lams = sorted({s.lam for s in samples} | {1.0, 256.0})
        Path(args.curve).write_text(rdmodel.fitted_curve_csv(params, lams))
    return 0


def cmd_rate_control(args) -> int:
    codec = _codec(args.model)
    if args.params:
        params = _read_params(args.params)
    else:
        params = rdmodel.PRESETS[args.preset]
    paths = _image_paths(args.inputs)
    images = np.stack([_load_unit(p) for p in paths])
    if len({im.shape for im in images}) != 1:
        raise CliError("rate control over several images needs one common size")
    target = images[0] if len(images) == 1 else images
    res = rdmodel.rate_control(args.target_bpp, target, codec, params, refine=args.refine)
    print(f"lambda = {res.lam!r}\nachieved_bpp = {res.achieved_bpp!r}\nbre = {res.bre!r}\nencodes = {len(res.history)}")
    if args.output:
        if len(images) != 1:
            raise CliError("--output needs a single input image")
        Path(args.output).write_bytes(codec.encode(images[0], res.lam).data)
    return 0


def cmd_bd_rate(args) -> int:
    curves = []
    for path in (args.a, args.b):
        means = _average_by_lambda(_read_sweep(path))
        curves.append([(m["bpp"], m[args.quality]) for m in means.values()])
    print(f"{rdmodel.bd_rate(curves[0], curves[1]):.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    failed = 0
    for res in gradcheck.run_all(args.points, _seed(args)):
        status = "ok" if res.ok else "FAIL"
        print(f"{res.name:28s} {res.max_rel_error:.3e} {status}")
        failed += not res.ok
    return 1 if failed else 0


def cmd_selftest(args) -> int:
    from . import selftest

    failures = selftest.run(_seed(args))
    for name, ok, detail in failures:
        print(f"{'PASS' if ok else 'FAIL'} {name} {detail}")
    return 0 if all(ok for _, ok, _ in failures) else 1


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modnic", description="Continuous-rate toy image codec.")
    parser.add_argument("--seed", type=int, default=None, help="random seed (default: $MODNIC_SEED or 0)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic PPM images")
    p.add_argument("--kind", default="mixed", help="blobs, gradients, checker, bandnoise, mixed, or a+b")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-base", help="train the fixed-rate base codec")
    p.add_argument("--config")
    p.add_argument("--preset", choices=("toy", "paper"))
    p.add_argument("--data", help="directory of training images (default: synthetic)")
    p.add_argument("--steps", type=int)
    p.add_argument("--log", help="training log CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("train-modnet", help="train the modulation network on a frozen base")
    p.add_argument("--base", required=True)
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--steps", type=int)
    p.add_argument("--log")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_modnet)

    p = sub.add_parser("encode", help="compress one image")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--hard-mask", action="store_true")
    p.add_argument("--recon", help="also write the reconstruction")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decompress a bitstream")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="quality report at one lambda")
    p.add_argument("--model", required=True)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--out")
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="quality report over several lambdas")
    p.add_argument("--model", required=True)
    p.add_argument("--lambdas", default="1,4,8,16,32,64,100")
    p.add_argument("--out")
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fit-rd", help="fit the lambda-domain R-D model")
    p.add_argument("--samples", required=True, help="RdSample CSV or sweep CSV")
    p.add_argument("--model", choices=rdmodel.MODELS, default="D_of_lambda")
    p.add_argument("--metric", choices=rdmodel.METRICS, default="mse")
    p.add_argument("--log-weight", action="store_true")
    p.add_argument("--out")
    p.add_argument("--curve", help="CSV of the fitted curve")
    p.set_defaults(func=cmd_fit_rd)

    p = sub.add_parser("rate-control", help="pick lambda for a target bpp")
    p.add_argument("--model", required=True)
    p.add_argument("--target-bpp", type=float, required=True)
    p.add_argument("--refine", type=int, default=3)
    p.add_argument("--params", help="fit-rd report (lambda_of_R model)")
    p.add_argument("--preset", choices=sorted(rdmodel.PRESETS), default="mse")
    p.add_argument("--output", help="write the bitstream at the chosen lambda")
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_rate_control)

    p = sub.add_parser("bd-rate", help="BD-rate of curve B against curve A (sweep CSVs)")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--quality", choices=("psnr_db", "msssim_db"), default="psnr_db")
    p.set_defaults(func=cmd_bd_rate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--points", type=int, default=100)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("selftest", help="quick end-to-end sanity checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="modnic: %(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (CliError, FormatError, RangeCoderError, rdmodel.FitError, rdmodel.RateControlError,
            ValueError, OSError) as exc:
        print(f"modnic: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
