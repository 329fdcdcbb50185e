import numpy as np
import pytest

from modnic import datagen


@pytest.mark.parametrize("kind", datagen.KINDS)
def test_deterministic_and_in_range(kind):
    a = datagen.generate(kind, 4, 32, 7)
    b = datagen.generate(kind, 4, 32, 7)
    assert a.dtype == np.uint8 and a.shape == (4, 32, 32, 3)
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != datagen.generate(kind, 4, 32, 8).tobytes()


def test_checker_has_two_colors():
    for img in datagen.generate("checker", 20, 32, 0):
        assert len(np.unique(img.reshape(-1, 3), axis=0)) == 2


def test_bandnoise_mean():
    imgs = datagen.generate("bandnoise", 100, 32, 0)
    assert abs(imgs.mean() - 128) <= 5


def test_mixed_and_joined_kinds_cycle():
    mixed = datagen.generate("mixed", 8, 16, 3)
    for i, kind in enumerate(datagen.KINDS * 2):
        assert mixed[i].tobytes() == datagen.generate(kind, i + 1, 16, 3)[i].tobytes()
    assert datagen.parse_kinds("blobs+gradients") == ("blobs", "gradients")
    with pytest.raises(ValueError):
        datagen.parse_kinds("blobs+stripes")
    with pytest.raises(ValueError):
        datagen.generate("blobs", 1, 30, 0)


def test_unit_batch():
    imgs = datagen.generate("blobs", 2, 16, 0)
    u = datagen.as_unit_batch(imgs)
    assert u.shape == (2, 3, 16, 16) and u.min() >= 0 and u.max() <= 1
