import numpy as np
import pytest

from deqmpi.errors import ConfigError
from deqmpi.phantoms import (
    SPLIT_OFFSETS, PhantomSpec, gen_torus, gen_vessel, generate, torus_hole_index, vessel_dataset,
)


def torus(inner, **kw):
    kw.setdefault("grid", (26, 52))
    return PhantomSpec(kind="torus", inner_diameter_mm=inner, **kw)


def test_vessel_deterministic():
    spec = PhantomSpec(seed=11)
    np.testing.assert_array_equal(gen_vessel(spec), gen_vessel(spec))
    assert not np.array_equal(gen_vessel(spec), gen_vessel(PhantomSpec(seed=12)))


def test_vessel_statistics():
    fracs = []
    for seed in range(100):
        img = gen_vessel(PhantomSpec(seed=seed))
        assert img.shape == (13, 26)
        assert img.min() >= 0.0
        assert 0.5 <= img.max() <= 1.5
        fracs.append(np.mean(img > 0))
    assert 0.02 <= np.mean(fracs) <= 0.40
    assert min(fracs) > 0


def test_vessel_rejects_tiny_grid():
    with pytest.raises(ConfigError):
        gen_vessel(PhantomSpec(grid=(4, 4)))
    with pytest.raises(ConfigError):
        gen_vessel(torus(1.0))


def test_dataset_splits_disjoint():
    tr = vessel_dataset("train", 3)
    va = vessel_dataset("val", 3)
    assert tr.shape == (3, 13, 26)
    assert not any(np.array_equal(a, b) for a in tr for b in va)
    np.testing.assert_array_equal(vessel_dataset("train", 2, start=1)[0], tr[1])
    assert len(set(SPLIT_OFFSETS.values())) == 3
    with pytest.raises(ConfigError):
        vessel_dataset("holdout", 1)


@pytest.mark.parametrize("inner,outer", [(1.0, 5.0), (2.0, 6.0), (3.0, 7.0)])
def test_torus_mass(inner, outer):
    img = gen_torus(torus(inner))
    assert img.min() >= 0 and img.max() <= 1
    area = np.pi * (outer / 2) ** 2 - np.pi * (inner / 2) ** 2
    assert abs(img.sum() / area - 1.0) < 0.02


@pytest.mark.parametrize("inner", [2.0, 3.0])
def test_torus_hole_is_dark(inner):
    spec = torus(inner)
    assert gen_torus(spec)[torus_hole_index(spec)] < 0.5


def test_torus_off_centre_and_bounds():
    a = gen_torus(torus(1.0, center_offset_mm=(0.5, 0.5)))
    b = gen_torus(torus(1.0, center_offset_mm=(5.5, -3.5)))
    assert not np.array_equal(a, b)
    np.testing.assert_allclose(a.sum(), b.sum(), rtol=1e-2)
    with pytest.raises(ConfigError):
        gen_torus(torus(1.0, center_offset_mm=(24.0, 0.0)))


def test_generate_dispatch():
    np.testing.assert_array_equal(generate(torus(2.0)), gen_torus(torus(2.0)))
    with pytest.raises(ConfigError):
        generate(PhantomSpec(kind="disk"))
