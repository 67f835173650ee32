import numpy as np
import pytest

from hsinpaint.cube import apply_mask, matricize
from hsinpaint.synth import (
    SynthSpec,
    add_gaussian_noise,
    centered_region,
    gen_lowrank_cube,
    gen_mask,
    observe,
)


def _rank(cube):
    s = np.linalg.svd(matricize(cube), compute_uv=False)
    return int(np.sum(s > 1e-10))


def test_rank_one_bands_are_multiples():
    cube = gen_lowrank_cube(SynthSpec(8, 8, 5, rank=1, seed=3))
    base = cube[:, :, 0]
    for b in range(1, 5):
        ratio = cube[:, :, b].sum() / base.sum()
        np.testing.assert_allclose(cube[:, :, b], ratio * base, atol=1e-12)


@pytest.mark.parametrize("rank", range(1, 9))
def test_exact_rank(rank):
    cube = gen_lowrank_cube(SynthSpec(32, 32, 32, rank=rank, seed=rank))
    assert _rank(cube) == rank
    assert cube.min() >= 0 and cube.max() == pytest.approx(1.0)


def test_determinism():
    spec = SynthSpec(16, 16, 8, rank=3, seed=7)
    np.testing.assert_array_equal(gen_lowrank_cube(spec), gen_lowrank_cube(spec))
    np.testing.assert_array_equal(add_gaussian_noise(np.zeros((4, 4, 2)), 0.1, 1),
                                  add_gaussian_noise(np.zeros((4, 4, 2)), 0.1, 1))


def test_infeasible_rank():
    with pytest.raises(ValueError):
        SynthSpec(2, 2, 3, rank=4)


def test_random_mask_counts():
    assert gen_mask((8, 8, 3), "random-pixels", fraction=0.0).all()
    m = gen_mask((8, 8, 3), "random-pixels", fraction=0.25, seed=1)
    for b in range(3):
        assert np.sum(m[:, :, b] == 0) == 16
    np.testing.assert_array_equal(m[:, :, 0], m[:, :, 2])
    with pytest.raises(ValueError):
        gen_mask((8, 8, 3), "random-pixels", fraction=1.5)


def test_dead_region_counts():
    m = gen_mask((8, 8, 5), "dead-region", region=(0, 0, 4, 4))
    assert np.sum(m == 0) == 16 * 5
    with pytest.raises(ValueError):
        gen_mask((8, 8, 5), "dead-region", region=(6, 6, 4, 4))


def test_centered_region_fraction():
    r, c, h, w = centered_region((32, 32, 1), 0.1)
    assert (h, w) == (10, 10) and (r, c) == (11, 11)


def test_noise_statistics():
    assert np.array_equal(add_gaussian_noise(np.ones((3, 3, 3)), 0.0, 0), np.ones((3, 3, 3)))
    n = add_gaussian_noise(np.zeros((64, 64, 8)), 0.12, 42)
    assert 0.115 <= n.std() <= 0.125
    assert abs(n.mean()) < 0.005
    with pytest.raises(ValueError):
        add_gaussian_noise(np.zeros(3), -1.0, 0)


def test_observation_model():
    clean = gen_lowrank_cube(SynthSpec(8, 8, 4, rank=2, seed=1))
    mask = gen_mask(clean.shape, "dead-region", region=(2, 2, 3, 3))
    y = observe(clean, mask, 0.12, 9)
    expect = apply_mask(add_gaussian_noise(apply_mask(clean, mask), 0.12, 9), mask)
    np.testing.assert_array_equal(y, expect)
    assert np.all(y[mask == 0] == 0)
