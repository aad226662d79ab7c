import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from deformux import deform, tensor
from deformux.gradcheck import ALL_PLANE_MASKS


def map_sample(vol, pts):
    """Independent trilinear sampler with zero fill outside the volume."""
    return ndimage.map_coordinates(vol, pts, order=1, mode="grid-constant", cval=0.0, prefilter=False)


def oracle_ddc(x, w, off, b, grid=deform.DEFAULT_GRID, mask=deform.TRI_PLANAR):
    """y[n,c,v] = sum_k w[c,k] * x[n,c](v + p_k + dv_k) + b[c], built on map_coordinates."""
    n, c, D, H, W = x.shape
    K = grid.K
    base = np.indices((D, H, W)).astype(float)
    y = np.zeros_like(x)
    for i in range(n):
        for k, (td, th, tw) in enumerate(grid.taps):
            dh = off[i, k] * mask.height
            dw = off[i, K + k] * mask.width
            dd = off[i, 2 * K + k] * mask.depth
            pts = np.stack([base[0] + td + dd, base[1] + th + dh, base[2] + tw + dw]).reshape(3, -1)
            for ch in range(c):
                y[i, ch] += w[ch, k] * map_sample(x[i, ch], pts).reshape(D, H, W)
    if b is not None:
        y += b.reshape(1, -1, 1, 1, 1)
    return y


def instance(seed, n=1, c=3, spatial=(4, 5, 6), K=27, scale=2.5):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c) + spatial)
    w = rng.standard_normal((c, K))
    off = rng.uniform(-scale, scale, (n, 3 * K) + spatial)
    b = rng.standard_normal(c)
    return x, w, off, b


# -- trilinear sampling


def test_sampling_exact_at_lattice_points():
    vol = np.random.default_rng(0).standard_normal((3, 4, 5))
    for idx in np.ndindex(vol.shape):
        assert deform.trilinear_sample(vol, idx) == vol[idx]


def test_sampling_reproduces_trilinear_polynomial():
    rng = np.random.default_rng(1)
    coef = rng.standard_normal(8)
    f = lambda d, h, w: (coef[0] + coef[1] * d + coef[2] * h + coef[3] * w + coef[4] * d * h + coef[5] * d * w
                         + coef[6] * h * w + coef[7] * d * h * w)
    vol = np.fromfunction(f, (6, 7, 8))
    for p in rng.uniform(0, [5, 6, 7], (200, 3)):
        assert abs(deform.trilinear_sample(vol, p) - f(*p)) < 1e-12


def test_sampling_matches_map_coordinates_including_outside():
    rng = np.random.default_rng(2)
    vol = rng.standard_normal((4, 5, 3))
    pts = rng.uniform(-1.5, 5.5, (300, 3))
    ref = map_sample(vol, pts.T)
    got = [deform.trilinear_sample(vol, p) for p in pts]
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_sampling_far_outside_is_zero():
    assert deform.trilinear_sample(np.ones((2, 2, 2)), (5.0, -3.0, 0.0)) == 0.0


def test_sampling_rejects_nonfinite_positions():
    with pytest.raises(ValueError):
        deform.trilinear_sample(np.ones((2, 2, 2)), (np.nan, 0, 0))


# -- forward


@pytest.mark.parametrize("seed", range(5))
def test_zero_offsets_equal_depthwise_conv(seed):
    x, w, off, b = instance(seed, n=2, c=4)
    y = deform.ddc_forward(x, w, np.zeros_like(off), b)
    ref = tensor.conv3d(x, w.reshape(4, 1, 3, 3, 3), b, 1, 1, 4)
    assert np.abs(y - ref).max() == 0.0


@pytest.mark.parametrize("mask", ALL_PLANE_MASKS, ids=lambda m: m.name)
def test_forward_matches_map_coordinates_oracle(mask):
    x, w, off, b = instance(11, n=2)
    np.testing.assert_allclose(deform.ddc_forward(x, w, off, b, mask=mask), oracle_ddc(x, w, off, b, mask=mask),
                               atol=1e-12)


def test_uniform_integer_offset_is_a_shift():
    # every tap displaced by +1 along width: y[..., w] == conv(x)[..., w + 1]
    x, w, off, _ = instance(3, c=2)
    K = 27
    off[:] = 0.0
    off[:, K:2 * K] = 1.0
    ref = tensor.conv3d(x, w.reshape(2, 1, 3, 3, 3), None, 1, 1, 2)
    got = deform.ddc_forward(x, w, off)
    np.testing.assert_allclose(got[..., :-1], ref[..., 1:], atol=1e-12)


def test_offset_layout_channel_blocks():
    x, w, off, _ = instance(4, c=1)
    K = 27
    for block, mask in ((0, deform.PlaneMask(True, False, False)), (1, deform.PlaneMask(False, True, False)),
                        (2, deform.PlaneMask(False, False, True))):
        only = np.zeros_like(off)
        only[:, block * K:(block + 1) * K] = off[:, block * K:(block + 1) * K]
        # masking to one axis uses exactly that axis's block
        np.testing.assert_array_equal(deform.ddc_forward(x, w, off, mask=mask), deform.ddc_forward(x, w, only))
    assert deform.OFFSET_LAYOUT == "height,width,depth"


def test_taps_are_depth_major():
    taps = deform.SamplingGrid().taps
    assert taps[0] == (-1, -1, -1) and taps[1] == (-1, -1, 0) and taps[3] == (-1, 0, -1) and taps[9] == (0, -1, -1)


@pytest.mark.parametrize("kernel", [(1, 3, 3), (3, 1, 1), (1, 1, 1)])
def test_reduced_grids_match_oracle(kernel):
    grid = deform.SamplingGrid(kernel)
    x, w, off, b = instance(5, K=grid.K)
    np.testing.assert_allclose(deform.ddc_forward(x, w, off, b, grid=grid), oracle_ddc(x, w, off, b, grid=grid),
                               atol=1e-12)


def test_plane_names():
    assert deform.PlaneMask.from_name("x-y") == deform.PlaneMask(height=True, width=True, depth=False)
    assert deform.PlaneMask.from_name("y-z").name == "y-z"
    with pytest.raises(ValueError):
        deform.PlaneMask.from_name("z-w")
    with pytest.raises(ValueError):
        deform.PlaneMask(False, False, False)
    with pytest.raises(ValueError):
        deform.SamplingGrid((5, 5, 5))


def test_offset_channel_mismatch_raises():
    x, w, off, _ = instance(6)
    with pytest.raises(tensor.ShapeError):
        deform.ddc_forward(x, w, off[:, :10])


# -- naive oracle vs optimized path


@pytest.mark.parametrize("mask", ALL_PLANE_MASKS, ids=lambda m: m.name)
def test_fast_matches_naive(mask):
    x, w, off, b = instance(7, n=2, c=5)
    off[:, :20] = np.round(off[:, :20])  # integer offsets, exercising the kink convention
    gy = np.random.default_rng(8).standard_normal(x.shape)
    assert np.abs(deform.ddc_forward(x, w, off, b, mask=mask)
                  - deform.ddc_forward(x, w, off, b, mask=mask, naive=True)).max() < 1e-12
    for a, r in zip(deform.ddc_backward(gy, x, w, off, mask=mask),
                    deform.ddc_backward(gy, x, w, off, mask=mask, naive=True)):
        assert np.abs(a - r).max() < 1e-10


def test_standard_fast_matches_naive():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 4, 4, 3, 5))
    w = rng.standard_normal((6, 2, 27))
    off = rng.uniform(-2, 2, (2, 81, 4, 3, 5))
    gy = rng.standard_normal((2, 6, 4, 3, 5))
    f = deform.standard_deformable_forward(x, w, off, None, groups=2)
    assert np.abs(f - deform.standard_deformable_forward_naive(x, w, off, None, groups=2)).max() < 1e-12
    for a, r in zip(deform.standard_deformable_backward(gy, x, w, off, groups=2),
                    deform.standard_deformable_backward(gy, x, w, off, groups=2, naive=True)):
        if a is not None:
            assert np.abs(a - r).max() < 1e-10


def test_standard_zero_offsets_equal_conv3d():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((1, 4, 4, 4, 4))
    w = rng.standard_normal((2, 2, 3, 3, 3))
    b = rng.standard_normal(2)
    y = deform.standard_deformable_forward(x, w, np.zeros((1, 81, 4, 4, 4)), b, groups=2)
    np.testing.assert_allclose(y, tensor.conv3d(x, w, b, 1, 1, 2), atol=1e-12)


def test_standard_with_channel_groups_is_ddc():
    x, w, off, b = instance(12, c=3)
    a = deform.standard_deformable_forward(x, w.reshape(3, 1, 27), off, b, groups=3)
    np.testing.assert_allclose(a, deform.ddc_forward(x, w, off, b), atol=1e-12)


def test_float32_path():
    x, w, off, b = instance(13)
    y = deform.ddc_forward(x.astype(np.float32), w.astype(np.float32), off.astype(np.float32), b.astype(np.float32))
    assert y.dtype == np.float32
    np.testing.assert_allclose(y, deform.ddc_forward(x, w, off, b), atol=1e-4)


# -- backward


def test_backward_adjoint_identities():
    x, w, off, b = instance(14, n=2)
    gy = np.random.default_rng(15).standard_normal(x.shape)
    gx, gw, goff, gb = deform.ddc_backward(gy, x, w, off)
    y0 = deform.ddc_forward(x, w, off)
    # linear in x and in w: <y, gy> = <x, gx> = <w, gw>
    assert np.isclose((y0 * gy).sum(), (x * gx).sum())
    assert np.isclose((y0 * gy).sum(), (w * gw).sum())
    np.testing.assert_allclose(gb, gy.sum(axis=(0, 2, 3, 4)))


def test_offset_gradient_uses_right_derivative_at_lattice():
    # single tap, zero offset: d/d(dw) of x(v + dw) at dw = 0 is x[v+1] - x[v] (right-continuous choice)
    grid = deform.SamplingGrid((1, 1, 1))
    x = np.random.default_rng(16).standard_normal((1, 1, 2, 2, 3))
    gy = np.zeros_like(x)
    gy[0, 0, 1, 1, 1] = 1.0
    _, _, goff, _ = deform.ddc_backward(gy, x, np.ones((1, 1)), np.zeros((1, 3, 2, 2, 3)), grid=grid)
    assert goff[0, 1, 1, 1, 1] == x[0, 0, 1, 1, 2] - x[0, 0, 1, 1, 1]
    assert goff[0, 0, 1, 1, 1] == -x[0, 0, 1, 1, 1]  # height: the corner above is outside (zero)


def test_masked_axes_get_zero_offset_gradient():
    x, w, off, _ = instance(17)
    gy = np.ones_like(x)
    _, _, goff, _ = deform.ddc_backward(gy, x, w, off, mask=deform.PlaneMask.from_name("x-y"))
    assert np.all(goff[:, 54:] == 0)


# -- threads


def test_thread_count_does_not_change_bits():
    x, w, off, b = instance(18, n=2, c=20, spatial=(6, 7, 8))
    gy = np.random.default_rng(19).standard_normal(x.shape)
    prev = deform.get_threads()
    outs = []
    try:
        for t in (1, 4):
            deform.set_threads(t)
            outs.append([a.tobytes() for a in (deform.ddc_forward(x, w, off, b),) + deform.ddc_backward(gy, x, w, off)])
    finally:
        deform.set_threads(prev)
    assert outs[0] == outs[1]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3))
def test_linear_in_weight(seed, alpha):
    x, w, off, _ = instance(seed, c=2, spatial=(3, 3, 3))
    w2 = np.random.default_rng(seed + 1).standard_normal(w.shape)
    lhs = deform.ddc_forward(x, alpha * w + w2, off)
    rhs = alpha * deform.ddc_forward(x, w, off) + deform.ddc_forward(x, w2, off)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(ALL_PLANE_MASKS))
def test_mask_equals_zeroed_channels(seed, mask):
    x, w, off, _ = instance(seed, c=2, spatial=(3, 4, 3))
    K = 27
    zeroed = off.copy()
    for i, active in enumerate((mask.height, mask.width, mask.depth)):
        if not active:
            zeroed[:, i * K:(i + 1) * K] = 0.0
    assert np.array_equal(deform.ddc_forward(x, w, off, mask=mask), deform.ddc_forward(x, w, zeroed))
