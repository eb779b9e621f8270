import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stereotrack.grid import Polyline3, interp_linear, rasterize_polyline
from stereotrack.projector import (
    StereoGeometry,
    back_project,
    forward_project,
    make_bp_evidence,
    project_lines_mask,
    project_point,
    ramp_kernel,
)


def brute_force_projection(vol, geom, view, step=0.01):
    """March every ray from the source to its pixel center at a fixed small step."""
    src, det, e_r, e_u, e_v, pitch = geom.frame(view, vol.shape)
    h, w = geom.detector_shape
    out = np.zeros((h, w))
    nz, ny, nx = vol.shape
    lo = np.array([-0.5, -0.5, -0.5])
    hi = np.array([nx - 0.5, ny - 0.5, nz - 0.5])
    for r in range(h):
        for c in range(w):
            pix = det + (c - (w - 1) / 2.0) * pitch * e_u + (r - (h - 1) / 2.0) * pitch * e_v
            d = pix - src
            length = np.linalg.norm(d)
            t = np.arange(step / 2, length, step)
            pts = src + np.outer(t / length, d)
            inside = np.all((pts >= lo) & (pts <= hi), axis=1)
            if not inside.any():
                continue
            p = pts[inside]
            vals = interp_linear(vol, (p[:, 2], p[:, 1], p[:, 0]), border="zero")
            out[r, c] = vals.sum() * step
    return out * geom.voxel_pitch


def peak_centroid(img, radius=2):
    r, c = np.unravel_index(np.argmax(img), img.shape)
    win = img[max(r - radius, 0):r + radius + 1, max(c - radius, 0):c + radius + 1]
    rr, cc = np.mgrid[max(r - radius, 0):r + radius + 1, max(c - radius, 0):c + radius + 1]
    return (win * cc).sum() / win.sum(), (win * rr).sum() / win.sum()


# forward projection -----------------------------------------------------------------


def test_zero_volume_projects_to_zero(small_geom):
    assert not forward_project(np.zeros((16, 16, 16)), small_geom, 0).any()


@pytest.mark.parametrize("view", [0, 1])
def test_single_voxel_matches_fine_step_marcher(small_geom, view):
    vol = np.zeros((16, 16, 16))
    vol[8, 8, 8] = 1.0
    img = forward_project(vol, small_geom, view)
    ref = brute_force_projection(vol, small_geom, view)
    peak = np.unravel_index(np.argmax(ref), ref.shape)
    assert np.unravel_index(np.argmax(img), img.shape) == peak
    assert abs(img[peak] - ref[peak]) <= 0.02 * ref[peak]
    assert abs(img.sum() - ref.sum()) <= 0.02 * ref.sum()
    # nonzero only near the voxel's own detector position
    u, v, _ = project_point(small_geom, view, vol.shape, np.array([8.0, 8.0, 8.0]))
    rows, cols = np.nonzero(img > 1e-12 * img.max())
    assert np.all(np.abs(cols - u) <= 2.5) and np.all(np.abs(rows - v) <= 2.5)


@pytest.mark.parametrize("d", [4, 8, 12])
def test_magnification_two_point_separation(desk, d):
    vol = np.zeros((64, 64, 64))
    vol[32 - d // 2, 32, 32] = 1.0
    vol[32 + d - d // 2, 32, 32] = 1.0
    pitch_vox = desk.pixel_pitch / desk.voxel_pitch
    for view in (0, 1):
        img = forward_project(vol, desk, view)
        upper = img.copy()
        upper[32:] = 0
        lower = img.copy()
        lower[:32] = 0
        sep = peak_centroid(lower)[1] - peak_centroid(upper)[1]
        assert abs(sep - 2 * d / pitch_vox) <= 1.0


def test_paper_geometry_magnification():
    g = StereoGeometry.paper()
    dims = (256, 256, 256)
    c = 127.5
    for view in (0, 1):
        e_u = g.frame(view, dims)[3]
        a = np.array([c, c, c]) - 5 * e_u
        b = np.array([c, c, c]) + 5 * e_u
        ua, _, _ = project_point(g, view, dims, a)
        ub, _, _ = project_point(g, view, dims, b)
        assert ub - ua == pytest.approx(20.0, abs=1e-9)
    assert g.magnification == 2.0 and g.detector_shape == (256, 256)


def test_projection_is_nonnegative_and_linear(small_geom, rng):
    x = rng.random((16, 16, 16))
    y = rng.random((16, 16, 16))
    px, py = forward_project(x, small_geom, 0), forward_project(y, small_geom, 0)
    assert px.min() >= 0
    np.testing.assert_allclose(forward_project(2 * x + 3 * y, small_geom, 0), 2 * px + 3 * py, rtol=1e-10)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=10)
def test_mirrored_volume_swaps_views(seed):
    geom = StereoGeometry.desk(16)
    vol = np.random.default_rng(seed).random((16, 16, 16))
    mirrored = forward_project(vol[:, :, ::-1], geom, 0)
    np.testing.assert_allclose(mirrored, forward_project(vol, geom, 1)[:, ::-1], rtol=1e-9, atol=1e-9)


def test_degenerate_geometry_rejected():
    g = StereoGeometry(source_object_distance=4.0, object_detector_distance=4.0, detector_width=16,
                       detector_height=16)
    with pytest.raises(ValueError):
        forward_project(np.ones((16, 16, 16)), g, 0)


@pytest.mark.parametrize("kw", [dict(view_angles=(0.0,)), dict(pixel_pitch=0.0), dict(step=0.9),
                                dict(source_object_distance=-1.0)])
def test_geometry_validation(kw):
    with pytest.raises(ValueError):
        StereoGeometry(**kw)


def test_geometry_round_trip():
    g = StereoGeometry.desk(64)
    assert StereoGeometry.from_dict(g.to_dict()) == g


# back-projection ---------------------------------------------------------------------


def test_zero_image_back_projects_to_zero(small_geom):
    assert not back_project(np.zeros((16, 16)), small_geom, 0, (16, 16, 16)).any()


@pytest.mark.parametrize("view", [0, 1])
def test_bright_pixel_back_projects_to_its_ray(small_geom, view):
    img = np.zeros((16, 16))
    img[5, 9] = 1.0
    bp = back_project(img, small_geom, view, (16, 16, 16))
    zyx = np.argwhere(bp > 0)
    assert len(zyx) > 0
    u, v, _ = project_point(small_geom, view, (16, 16, 16), zyx[:, ::-1].astype(float))
    assert np.all(np.abs(u - 9) < 1.0) and np.all(np.abs(v - 5) < 1.0)


@pytest.mark.parametrize("view", [0, 1])
def test_adjoint_inner_product_identity(small_geom, rng, view):
    for _ in range(3):
        x = rng.random((16, 16, 16))
        y = rng.random((16, 16))
        lhs = float((forward_project(x, small_geom, view) * y).sum())
        rhs = float((x * back_project(y, small_geom, view, x.shape, method="adjoint")).sum())
        assert abs(lhs - rhs) <= 1e-3 * abs(lhs)


def test_back_project_validation(small_geom):
    with pytest.raises(ValueError):
        back_project(np.zeros((8, 8)), small_geom, 0, (16, 16, 16))
    with pytest.raises(ValueError):
        back_project(np.zeros((16, 16)), small_geom, 0, (16, 16, 16), method="splat")
    with pytest.raises(ValueError):
        back_project(np.zeros((16, 16)), small_geom, 2, (16, 16, 16))


def test_weighting_favours_voxels_near_the_source(small_geom):
    img = np.ones((16, 16))
    w = back_project(img, small_geom, 0, (16, 16, 16), weighted=True)
    u = back_project(img, small_geom, 0, (16, 16, 16), weighted=False)
    src = small_geom.frame(0, (16, 16, 16))[0]
    zyx = np.argwhere(u > 0)
    dist = np.linalg.norm(zyx[:, ::-1] - src, axis=1)
    ratio = w[tuple(zyx.T)] / u[tuple(zyx.T)]
    assert ratio[np.argmin(dist)] > ratio[np.argmax(dist)]


def test_ramp_kernel_has_zero_dc():
    assert abs(ramp_kernel(4000).sum()) < 1e-4
    assert ramp_kernel(3)[3] == 0.25


def test_filtered_back_projection_is_finite(small_geom, rng):
    bp = back_project(rng.random((16, 16)), small_geom, 1, (16, 16, 16), filtered=True)
    assert np.all(np.isfinite(bp))


# stereo evidence -------------------------------------------------------------------------


def test_empty_maps_give_zero_evidence(small_geom):
    assert not make_bp_evidence(np.zeros((16, 16)), np.zeros((16, 16)), small_geom, (16, 16, 16)).any()


@pytest.mark.parametrize("point", [(32.0, 32.0, 32.0), (25.0, 38.0, 29.0), (40.0, 27.0, 36.0)])
def test_point_fiducial_evidence_peaks_at_the_point(desk, point):
    dims = (64, 64, 64)
    maps = []
    rr, cc = np.mgrid[0:64, 0:64]
    for view in (0, 1):
        u, v, _ = project_point(desk, view, dims, np.array(point))
        maps.append(np.exp(-0.5 * ((cc - u) ** 2 + (rr - v) ** 2)))
    ev = make_bp_evidence(maps[0], maps[1], desk, dims)
    z, y, x = np.unravel_index(np.argmax(ev), dims)
    assert np.linalg.norm(np.array([x, y, z]) - point) <= 1.0
    assert ev.max() == pytest.approx(1.0)


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_line_evidence_covers_the_line(desk, seed):
    from scipy import ndimage

    from stereotrack.phantom import PhantomSpec, gen_start_volume

    dims = (64, 64, 64)
    _, (line,) = gen_start_volume(PhantomSpec(n_lines=1, n_ellipsoids=0, seed=seed))
    raster = rasterize_polyline(line, dims) > 0
    # feature maps: the support of the line's own projections
    maps = [(forward_project(raster.astype(float), desk, v) > 0).astype(float) for v in (0, 1)]
    ev = make_bp_evidence(maps[0], maps[1], desk, dims)
    assert (ev[raster] >= 0.5).mean() >= 0.95
    # and a single line leaves no evidence far from itself
    dist = ndimage.distance_transform_edt(~raster)
    assert dist[ev >= 0.5].max() <= 5.0


def test_lines_mask_radius_scales_with_magnification(desk):
    line = Polyline3(np.array([[32.0, 32.0, 10.0], [32.0, 32.0, 54.0]]), radius=1.0)
    m = project_lines_mask([line], desk, 0, (64, 64, 64))
    # 1 voxel radius, magnification 2, 2 voxel-units per pixel -> 1 pixel: 2-3 columns wide
    widths = m[20:44].sum(axis=1)
    assert np.all((widths >= 2) & (widths <= 3))
