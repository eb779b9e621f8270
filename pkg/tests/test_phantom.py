import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stereotrack.grid import Polyline3, point_segment_distance, rasterize_polyline, rasterize_polylines
from stereotrack.phantom import (
    DeformationSpec,
    PhantomSpec,
    add_poisson_noise,
    apply_deformation_sequence,
    field_max_gradient,
    gen_line_trig_deformation,
    gen_smooth_field,
    gen_start_volume,
)


def chord_deviation(points, a, b):
    return point_segment_distance(points, a, b).max()


# starting volume ------------------------------------------------------------------


def test_empty_phantom():
    vol, lines = gen_start_volume(PhantomSpec(dims=32, n_lines=0, n_ellipsoids=0))
    assert lines == [] and not vol.any()


def test_single_line_matches_rasterizer():
    spec = PhantomSpec(dims=32, n_lines=1, n_ellipsoids=0, seed=3)
    vol, lines = gen_start_volume(spec)
    assert len(lines) == 1
    raster = rasterize_polyline(lines[0], vol.shape)
    np.testing.assert_array_equal(vol != 0, raster != 0)
    np.testing.assert_array_equal(vol, spec.line_intensity * raster)


def test_same_seed_is_byte_identical():
    a, la = gen_start_volume(PhantomSpec(dims=32, seed=11))
    b, lb = gen_start_volume(PhantomSpec(dims=32, seed=11))
    assert a.tobytes() == b.tobytes()
    assert all(np.array_equal(x.points, y.points) for x, y in zip(la, lb))


def test_lines_are_separated_and_brighter():
    spec = PhantomSpec(dims=64, seed=5)
    vol, lines = gen_start_volume(spec)
    assert len(lines) == 5
    for i in range(5):
        for j in range(i + 1, 5):
            pts = np.linspace(*lines[i].points, 200)
            assert point_segment_distance(pts, *lines[j].points).min() >= 4 * spec.line_radius - 0.1
    background = vol - spec.line_intensity * rasterize_polylines(lines, vol.shape)
    assert background.max() < spec.line_intensity


def test_overconstrained_spec_raises():
    with pytest.raises(RuntimeError):
        gen_start_volume(PhantomSpec(dims=16, n_lines=5, n_ellipsoids=0, line_radius=3.0, line_intensity=9.0,
                                     content_fraction=0.2))


@pytest.mark.parametrize("kw", [dict(dims=8), dict(n_lines=-1), dict(ellipsoid_intensity=(0.2, 5.0)),
                                dict(content_fraction=0.0)])
def test_phantom_spec_validation(kw):
    with pytest.raises(ValueError):
        PhantomSpec(**kw)


# smooth fields ----------------------------------------------------------------------


def test_zero_amplitude_field():
    assert not gen_smooth_field((8, 8, 8), 6.0, 0.0, seed=1).any()


@given(st.integers(0, 2**31 - 1), st.floats(0.1, 2.5))
@settings(max_examples=10)
def test_field_peak_norm_equals_amplitude(seed, amplitude):
    phi = gen_smooth_field((20, 20, 20), 6.0, amplitude, seed)
    assert abs(np.sqrt((phi**2).sum(axis=0)).max() - amplitude) <= 1e-6
    assert field_max_gradient(phi) < 1.0


def test_field_statistics_over_seeds():
    # Gaussian-smoothed white noise has autocorrelation exp(-L^2 / (4 sigma^2)),
    # i.e. an e-folding length of 2 sigma = 12 voxels
    lengths, magnitudes = [], []
    for seed in range(20):
        phi = gen_smooth_field((64, 64, 64), 6.0, 2.0, seed)
        c = phi[0] - phi[0].mean()
        var = (c * c).mean()
        corr = [(c[:, :, : 64 - L] * c[:, :, L:]).mean() / var for L in range(25)]
        lengths.append(np.interp(np.exp(-1), corr[::-1], np.arange(25)[::-1]))
        magnitudes.append(np.abs(phi).mean())
    assert 9.0 <= np.mean(lengths) <= 13.0
    # the peak norm is a few standard deviations above the typical component
    assert 0.2 <= np.mean(magnitudes) <= 0.6


def test_field_is_stationary_near_borders():
    phi = gen_smooth_field((48, 48, 48), 6.0, 2.0, seed=4)
    norm = np.sqrt((phi**2).sum(axis=0))
    inner = norm[12:36, 12:36, 12:36].std()
    edge = np.concatenate([norm[:4].ravel(), norm[-4:].ravel()]).std()
    assert edge < 2.0 * inner


# line distortion ----------------------------------------------------------------------


STRAIGHT = Polyline3(np.array([[10.0, 12.0, 8.0], [40.0, 30.0, 50.0]]))


def test_zero_magnitude_keeps_geometry():
    out = gen_line_trig_deformation(STRAIGHT, 0.0, seed=2)
    assert len(out.points) > 2
    # the densified points are the resampled line itself; deviation is roundoff only
    assert np.array_equal(out.points, STRAIGHT.resample(0.5))
    assert chord_deviation(out.points, *STRAIGHT.points) <= 1e-12


def test_distortion_endpoints_exact_and_peak():
    out = gen_line_trig_deformation(STRAIGHT, 6.0, seed=9)
    assert np.array_equal(out.points[0], STRAIGHT.points[0])
    assert np.array_equal(out.points[-1], STRAIGHT.points[-1])
    assert abs(chord_deviation(out.points, *STRAIGHT.points) - 6.0) <= 1e-6


def test_distortion_is_dense():
    out = gen_line_trig_deformation(STRAIGHT, 4.0, seed=1)
    # densified before distortion, so consecutive undistorted points are <= 0.5 apart
    t = np.linspace(0, 1, len(out.points))
    assert np.all(np.diff(t) * STRAIGHT.length <= 0.5 + 1e-9)


def test_negative_magnitude_rejected():
    with pytest.raises(ValueError):
        gen_line_trig_deformation(STRAIGHT, -1.0, seed=0)


@given(st.integers(0, 2**31 - 1), st.floats(0.0, 16.0))
def test_distortion_properties(seed, magnitude):
    out = gen_line_trig_deformation(STRAIGHT, magnitude, seed)
    assert np.array_equal(out.points[[0, -1]], STRAIGHT.points)
    dev = chord_deviation(out.points, *STRAIGHT.points)
    assert abs(dev - magnitude) <= 1e-6
    # displacements are perpendicular to the chord
    chord = STRAIGHT.points[1] - STRAIGHT.points[0]
    base = STRAIGHT.resample(0.5)
    assert np.abs((out.points - base) @ chord).max() <= 1e-6 * np.linalg.norm(chord)


# sequences -------------------------------------------------------------------------------


def test_identity_sequence():
    vol, lines = gen_start_volume(PhantomSpec(dims=32, n_lines=2, n_ellipsoids=4, seed=2))
    frames = apply_deformation_sequence(vol, lines, DeformationSpec(amplitude=0.0, magnitude_range=(0, 0), seed=1))
    assert len(frames) == 2
    np.testing.assert_allclose(frames[1].volume, frames[0].volume, atol=1e-6)


def test_sequence_rasterizer_oracle_and_bounds():
    spec = PhantomSpec(dims=64, seed=7)
    vol, lines = gen_start_volume(spec)
    frames = apply_deformation_sequence(vol, lines, DeformationSpec(n_frames=3, seed=7))
    for k, fr in enumerate(frames):
        lines_part = fr.volume - fr.background
        np.testing.assert_allclose(lines_part, spec.line_intensity * rasterize_polylines(fr.lines, vol.shape),
                                   atol=1e-12)
        if k == 0:
            continue
        for old, new in zip(frames[k - 1].lines, fr.lines):
            d = np.min([point_segment_distance(new.points, a, b) for a, b in zip(old.points[:-1], old.points[1:])],
                       axis=0)
            assert d.max() <= 6.0 + 1e-6


def test_sequence_is_deterministic():
    vol, lines = gen_start_volume(PhantomSpec(dims=32, n_lines=2, seed=1))
    a = apply_deformation_sequence(vol, lines, DeformationSpec(magnitude_range=(1, 3), seed=5))
    b = apply_deformation_sequence(vol, lines, DeformationSpec(magnitude_range=(1, 3), seed=5))
    assert a[1].volume.tobytes() == b[1].volume.tobytes()


def test_coherent_steps_accumulate():
    vol, lines = gen_start_volume(PhantomSpec(dims=64, seed=3))
    frames = apply_deformation_sequence(vol, lines, DeformationSpec(n_frames=4, magnitude_range=(2, 2),
                                                                    coherent=True, seed=3))
    start = lines[0]
    devs = [chord_deviation(fr.lines[0].points, *start.points) for fr in frames]
    assert devs[0] == 0 and devs[1] < devs[2] < devs[3]


@pytest.mark.parametrize("kw", [dict(sigma=0), dict(amplitude=-1), dict(magnitude_range=(4, 3)), dict(n_frames=1)])
def test_deformation_spec_validation(kw):
    with pytest.raises(ValueError):
        DeformationSpec(**kw)


def test_magnitude_beyond_quarter_dims_rejected():
    vol, lines = gen_start_volume(PhantomSpec(dims=16, n_lines=1, n_ellipsoids=0))
    with pytest.raises(ValueError):
        apply_deformation_sequence(vol, lines, DeformationSpec(magnitude_range=(3, 6)))


# noise ------------------------------------------------------------------------------------


def test_poisson_zero_stays_zero():
    assert not add_poisson_noise(np.zeros((16, 16)), 0.24, seed=0).any()


def test_poisson_large_scale_is_nearly_exact(rng):
    img = rng.uniform(1, 50, size=(32, 32))
    out = add_poisson_noise(img, 1e6, seed=3)
    assert np.all(np.abs(out - img) <= 0.01 * img)


def test_poisson_mean_preserved_at_three_sigma():
    n = 10**6
    out = add_poisson_noise(np.full(n, 4.0), 0.24, seed=17)
    sigma = np.sqrt(4.0 / 0.24)
    assert abs(out.mean() - 4.0) <= 3 * sigma / np.sqrt(n)


def test_poisson_rejects_negative_and_bad_scale():
    with pytest.raises(ValueError):
        add_poisson_noise(np.array([-1.0]), 1.0, seed=0)
    with pytest.raises(ValueError):
        add_poisson_noise(np.ones(3), 0.0, seed=0)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=10)
def test_poisson_is_seed_deterministic(seed):
    img = np.full((8, 8), 3.0)
    assert np.array_equal(add_poisson_noise(img, 0.24, seed), add_poisson_noise(img, 0.24, seed))
