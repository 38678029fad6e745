import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shapeapp.core import (
    ExactSum,
    Grid,
    HyperParamError,
    HyperParams,
    ImageDataset,
    exact_sum,
    init_latents,
    validate_hyper,
    variant_hyper,
)


def test_grid_rejects_small_and_wrong_rank():
    assert Grid((4, 5, 6)).voxel_count == 120
    with pytest.raises(ValueError):
        Grid((3, 8))
    with pytest.raises(ValueError):
        Grid((8,))
    with pytest.raises(ValueError):
        Grid((4, 4, 4, 4))


def test_nan_forces_mask_false_in_every_channel():
    values = np.ones((2, 2, 4, 4))
    values[0, 1, 2, 3] = np.nan
    ds = ImageDataset(Grid((4, 4)), values)
    assert not ds.mask[0, 2, 3]
    assert ds.mask.sum() == 2 * 16 - 1
    assert np.isnan(ds.values[0, :, 2, 3]).all()
    assert ds.values.dtype == np.float32


def test_explicit_mask_hides_voxels():
    mask = np.ones((1, 4, 4), bool)
    mask[0, 0, 0] = False
    ds = ImageDataset(Grid((4, 4)), np.zeros((1, 1, 4, 4)), mask=mask)
    assert np.isnan(ds.values[0, 0, 0, 0])
    assert not ds.mask[0, 0, 0]


def test_kind_checks():
    g = Grid((4, 4))
    with pytest.raises(ValueError, match="binary"):
        ImageDataset(g, np.full((1, 1, 4, 4), 2.0), "binary")
    bad = np.zeros((1, 2, 4, 4))
    bad[0, 0] = 0.7
    with pytest.raises(ValueError, match="sum to 1"):
        ImageDataset(g, bad, "categorical")
    ok = np.zeros((1, 2, 4, 4))
    ok[0, 0] = 1.0
    ok[0, :, 1, 1] = np.nan
    ds = ImageDataset(g, ok, "categorical")
    assert ds.noise_kind == "categorical"
    with pytest.raises(ValueError):
        ImageDataset(g, np.zeros((1, 1, 4, 4)), "categorical")
    with pytest.raises(ValueError):
        ImageDataset(g, np.zeros((1, 1, 4, 4)), "weird")


def test_validate_hyper_accepts_defaults():
    h = HyperParams(K_a=3, K_v=3)
    assert h.nu0 == 3
    np.testing.assert_allclose(h.Lambda0, np.eye(3) / 3)
    validate_hyper(h)
    validate_hyper(h.replace(lambda1=0.95, lambda2=0.05))


@pytest.mark.parametrize("changes, message", [
    (dict(omega_v=(0.0, 0, 1, 1, 1)), "Green's function undefined"),
    (dict(lambda1=0.0, lambda2=0.0), "lambda1 \\+ lambda2"),
    (dict(nu0=2.0), "nu0"),
    (dict(K_a=2, K_v=3), "K_a == K_v"),
    (dict(noise="poisson"), "noise"),
    (dict(shoot_steps=0), "shoot_steps"),
    (dict(omega_a=(0.1, -1, 0)), "non-negative"),
])
def test_validate_hyper_names_constraint(changes, message):
    base = dict(K_a=4, K_v=4)
    base.update(changes)
    with pytest.raises(HyperParamError, match=message):
        validate_hyper(HyperParams(**base))


def test_lambda0_must_be_pd():
    with pytest.raises(HyperParamError, match="positive definite"):
        validate_hyper(HyperParams(K_a=2, K_v=2, Lambda0=np.diag([1.0, -1.0])))


def test_hyper_json_round_trip():
    h = HyperParams(K_a=2, K_v=1, shared_latents=False, nu0=5.0)
    back = HyperParams.from_json(h.to_json())
    assert back == h
    np.testing.assert_array_equal(back.Lambda0, h.Lambda0)


def test_split_indices():
    h = HyperParams(K_a=2, K_v=3, shared_latents=False)
    assert h.K == 5
    assert list(h.appearance_index) == [0, 1]
    assert list(h.shape_index) == [2, 3, 4]
    assert [list(b) for b in h.blocks] == [[0, 1], [2, 3, 4]]


def test_variant_hyper_counts():
    base = HyperParams()
    assert (variant_hyper(base, "shared", 4).K_a, variant_hyper(base, "shared", 4).K_v) == (4, 4)
    split = variant_hyper(base, "split", 5)
    assert (split.K_a, split.K_v, split.K) == (3, 2, 5)
    assert variant_hyper(base, "shape", 3).K_a == 0
    assert variant_hyper(base, "appearance", 3).K_v == 0
    assert variant_hyper(base, "shape", 6).nu0 == 6
    with pytest.raises(ValueError):
        variant_hyper(base, "bogus", 2)


def test_init_latents_orthonormal_and_deterministic():
    lat = init_latents(10, 3, 1)
    np.testing.assert_allclose(lat.Z_hat @ lat.Z_hat.T, np.eye(3), atol=1e-10)
    np.testing.assert_array_equal(lat.S, 0)
    np.testing.assert_array_equal(init_latents(10, 3, 1).Z_hat, lat.Z_hat)
    assert not np.array_equal(init_latents(10, 3, 2).Z_hat, lat.Z_hat)
    with pytest.raises(ValueError):
        init_latents(2, 3, 1)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=40), st.randoms())
def test_exact_sum_is_order_independent(xs, random):
    shuffled = list(xs)
    random.shuffle(shuffled)
    a = exact_sum(np.array(x) for x in xs).value()
    b = exact_sum(np.array(x) for x in shuffled).value()
    assert a == b
    assert abs(a - np.sum(np.array(xs, dtype=np.longdouble))) <= 1e-9 * max(1.0, np.abs(xs).max())


def test_exact_sum_merge_matches_single_pass(rng):
    parts = [rng.standard_normal((3, 2)) * 10.0 ** rng.integers(-8, 8) for _ in range(20)]
    whole = exact_sum(parts).value()
    left, right = exact_sum(parts[:7]), exact_sum(parts[7:])
    np.testing.assert_array_equal(left.merge(right).value(), whole)
    np.testing.assert_array_equal(ExactSum((3, 2)).value(), np.zeros((3, 2)))


def test_exact_sum_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        exact_sum([np.array([np.inf])])
