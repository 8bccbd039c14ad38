import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfrflow import tensor as T
from mfrflow.analysis import downsample_flow, lookup_validity
from mfrflow.costvolume import build_cost_volume, build_pyramid
from mfrflow.lookup import (
    LookupConfig,
    ValidityMask,
    grid_offsets,
    invalid_support,
    lookup_motion_feature,
    nzr,
)
from mfrflow.synth import make_dataset
from mfrflow.tensor import ShapeError, Tensor


def random_pyramid(rng, H=8, W=8, levels=4, batch=None):
    shape = (H, W, H, W) if batch is None else (batch, H, W, H, W)
    return build_pyramid(Tensor(rng.standard_normal(shape)), levels)


def one_hot_pyramid(H, W):
    f = np.zeros((H * W, H, W))
    for p in range(H * W):
        f[p, p // W, p % W] = 1.0
    return build_pyramid(build_cost_volume(Tensor(f), Tensor(f), scale_factor=1.0), 1)


def test_config_validation():
    with pytest.raises(ValueError):
        LookupConfig(radius=-1)
    with pytest.raises(ValueError):
        LookupConfig(levels=0)
    cfg = LookupConfig(radius=3, levels=4)
    assert cfg.window == 7 and cfg.channels == 196


def test_grid_offsets_row_major():
    off = grid_offsets(1)
    assert off.tolist()[:4] == [[-1, -1], [0, -1], [1, -1], [-1, 0]]
    assert off.tolist()[4] == [0, 0]


def test_self_match_zero_flow(f64):
    feat, mask = lookup_motion_feature(one_hot_pyramid(3, 4), np.zeros((2, 3, 4)), LookupConfig(radius=0, levels=1))
    assert feat.data.shape == (1, 3, 4)
    np.testing.assert_array_equal(feat.data.data, 1.0)
    assert mask.valid.all()


@pytest.mark.parametrize("levels", [1, 4])
def test_flow_beyond_bounds_vanishes(f64, rng, levels):
    r = 2
    cfg = LookupConfig(radius=r, levels=levels)
    # Level l sees the flow divided by 2**l, so clear the coarsest window too.
    flow = np.full((2, 8, 8), 8 + r * 2 ** (levels - 1) + 0.5)
    feat, mask = lookup_motion_feature(random_pyramid(rng), flow, cfg)
    assert feat.data.shape == (cfg.channels, 8, 8)
    assert not feat.data.data.any()
    assert not mask.valid.any()


def test_half_pixel_flow_is_midpoint(f64):
    vol = np.zeros((2, 2, 2, 2))
    vol[0, 0] = [[1.0, 3.0], [5.0, 7.0]]
    flow = np.zeros((2, 2, 2))
    flow[0] = 0.5
    feat, mask = lookup_motion_feature(build_pyramid(Tensor(vol), 1), flow, LookupConfig(radius=0, levels=1))
    assert feat.data.data[0, 0, 0] == pytest.approx(2.0)
    assert mask.valid.all()


def test_invalid_support_examples():
    assert not invalid_support(ValidityMask(np.ones((2, 3, 3), bool))).any()
    assert invalid_support(np.zeros((2, 3, 3), bool)).all()
    board = (np.indices((1, 4, 4)).sum(axis=0) % 2).astype(bool)
    np.testing.assert_array_equal(invalid_support(board), ~board)


def test_nzr_examples():
    assert nzr(np.ones((4, 2, 2), bool)) == 1.0
    half = np.zeros((4, 2, 2), bool)
    half[:2] = True
    assert nzr(half) == 0.5
    assert nzr(ValidityMask(half, levels=2), per_level=True) == [1.0, 0.0]
    with pytest.raises(ShapeError):
        nzr(half, per_level=True, levels=3)


def test_fast_motion_coarse_level_loses_more():
    samples = make_dataset("large", 6, seed=3)
    for s in samples:
        per = nzr(lookup_validity(downsample_flow(s.gt_flow.numpy())), per_level=True, levels=4)
        assert per[3] <= per[0]


@pytest.mark.parametrize("method", ["window", "gather"])
@pytest.mark.parametrize("seed", range(4))
def test_invalid_entries_exactly_zero(method, seed):
    rng = np.random.default_rng(seed)
    flow = rng.uniform(-10, 10, (2, 8, 8)).astype(np.float32)
    feat, mask = lookup_motion_feature(random_pyramid(rng), flow, method=method)
    vals = feat.data.data
    assert np.all(vals[~mask.valid] == 0)
    assert (~mask.valid).any() and mask.valid.any()


def test_window_and_gather_agree(f64, rng):
    pyr = random_pyramid(rng, batch=2)
    flow = rng.uniform(-6, 6, (2, 2, 8, 8))
    fw, mw = lookup_motion_feature(pyr, flow, method="window")
    fg, mg = lookup_motion_feature(pyr, flow, method="gather")
    np.testing.assert_array_equal(mw.valid, mg.valid)
    np.testing.assert_allclose(fw.data.data, fg.data.data, atol=1e-12)


def test_unknown_method_rejected(rng):
    with pytest.raises(ValueError):
        lookup_motion_feature(random_pyramid(rng), np.zeros((2, 8, 8)), method="nearest")


def test_shape_errors(rng):
    pyr = random_pyramid(rng, levels=2)
    with pytest.raises(ShapeError):
        lookup_motion_feature(pyr, np.zeros((2, 8, 8)), LookupConfig(levels=3))
    with pytest.raises(ShapeError):
        lookup_motion_feature(pyr, np.zeros((2, 4, 8)), LookupConfig(levels=2))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 12.0), st.floats(1.0, 3.0), st.floats(-np.pi, np.pi))
def test_scaling_flow_outward_never_raises_nzr(mag, factor, angle):
    flow = np.zeros((2, 8, 8))
    flow[0], flow[1] = mag * np.cos(angle), mag * np.sin(angle)
    a = nzr(lookup_validity(flow))
    b = nzr(lookup_validity(flow * factor))
    assert b <= a


def test_zero_flow_interior_fully_valid():
    r = 2
    valid = lookup_validity(np.zeros((2, 8, 8)), LookupConfig(radius=r, levels=1))
    assert valid[:, r + 1 : 8 - r - 1, r + 1 : 8 - r - 1].all()
    # At distance r the outermost offset lands on the edge pixel; one closer
    # and it lands a full pixel outside, where the footprint has no weight.
    assert valid[:, r : 8 - r, r : 8 - r].all()
    assert not valid[:, r - 1, r - 1].all()


def test_integer_flow_indexes_volume(f64, rng):
    vol = rng.standard_normal((6, 5, 6, 5))
    flow = rng.integers(-3, 4, (2, 6, 5)).astype(np.float64)
    feat, mask = lookup_motion_feature(build_pyramid(Tensor(vol), 1), flow, LookupConfig(radius=0, levels=1))
    for i in range(6):
        for j in range(5):
            k, l = i + int(flow[1, i, j]), j + int(flow[0, i, j])
            inside = 0 <= k < 6 and 0 <= l < 5
            assert mask.valid[0, i, j] == inside
            assert feat.data.data[0, i, j] == (vol[i, j, k, l] if inside else 0.0)


@pytest.mark.parametrize("method", ["window", "gather"])
def test_lookup_gradcheck(f64, method):
    rng = np.random.default_rng(7)
    vol = Tensor(rng.standard_normal((4, 4, 4, 4)), requires_grad=True)
    # Fractional parts kept away from cell boundaries so the check stays smooth.
    flow = rng.integers(-3, 3, (2, 4, 4)) + rng.uniform(0.2, 0.8, (2, 4, 4))
    flow = Tensor(flow, requires_grad=True)
    cfg = LookupConfig(radius=1, levels=2)
    w = rng.uniform(0.5, 1.5, (cfg.channels, 4, 4))

    def fn(v, f):
        return (lookup_motion_feature(build_pyramid(v, 2), f, cfg, method=method)[0].data * w).sum()

    assert T.finite_diff_check(fn, [vol, flow], eps=1e-5) < 1e-6


def test_zero_test_flag(f64):
    vol = np.zeros((2, 2, 2, 2))
    vol[:, :, 0, 0] = 1.0
    feat, geo = lookup_motion_feature(build_pyramid(Tensor(vol), 1), np.zeros((2, 2, 2)), LookupConfig(radius=0, levels=1))
    _, lit = lookup_motion_feature(build_pyramid(Tensor(vol), 1), np.zeros((2, 2, 2)), LookupConfig(radius=0, levels=1), zero_test=True)
    assert geo.valid.all()
    np.testing.assert_array_equal(lit.valid, feat.data.data != 0)
    assert lit.valid.sum() == 1
