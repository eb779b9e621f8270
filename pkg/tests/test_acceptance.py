"""Acceptance criteria 1-8. Each test records a PASS/FAIL line that is
printed in the terminal summary, then asserts."""

import itertools
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from stereotrack import cli
from stereotrack import io as sio
from stereotrack.grid import Polyline3, gaussian_smooth, rasterize_polyline, sample_trilinear, warp_image
from stereotrack.features import detect_features_2d, extract_polylines
from stereotrack.metrics import chamfer_distance, line_position_error_2d
from stereotrack.phantom import DeformationSpec, PhantomSpec, add_poisson_noise
from stereotrack.projector import back_project, forward_project
from stereotrack.registration import RegConfig, eval_objective, register_2d
from stereotrack.simulate import simulate_sequence, truth_line_maps
from stereotrack.tracking import Strategy, TrackConfig, TrackingRun, frame_metrics, track_frame, track_sequence

pytestmark = pytest.mark.acceptance


def record(num, ok, detail):
    ACCEPTANCE[num] = (bool(ok), detail)
    print(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="module")
def single_step(desk):
    """Desk-scale 5-line single-step tracking for 20 seeds."""
    rows = []
    for seed in range(20):
        seq = simulate_sequence(PhantomSpec(seed=seed), DeformationSpec(seed=seed), desk, seed=seed)
        out = track_frame(seq.volumes[0], seq.lines[0], seq.noisy[1], desk)
        rows.append(frame_metrics(out, seq.lines[1], desk))
    return rows


# 1 -------------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_1_registration_2d(desk):
    cfg = TrackConfig()
    errors, times = [], []
    for seed in range(50):
        t0 = time.perf_counter()
        seq = simulate_sequence(PhantomSpec(seed=100 + seed), DeformationSpec(seed=100 + seed), desk, seed=100 + seed)
        truth = truth_line_maps(seq.lines[1], desk, seq.dims)
        radius = max(ln.radius for ln in seq.lines[0]) * desk.voxel_pitch * desk.magnification / desk.pixel_pitch
        trial = []
        for v in (0, 1):
            moving = forward_project(seq.volumes[0], desk, v)
            moved = warp_image(moving, register_2d(moving, seq.noisy[1][v], cfg.reg2d).field)
            fm = detect_features_2d(moved, radius, cfg.n_orientations, cfg.elongation)
            trial.append(line_position_error_2d(fm, truth[v]))
        times.append(time.perf_counter() - t0)
        errors.append(max(trial))
    errors = np.array(errors)
    frac = float(np.mean((errors >= 0) & (errors <= 3)))
    ok = frac >= 0.9 and max(times) < 60
    record(1, ok, f"{frac:.0%} of 50 trials in [0, 3] px (median {np.median(errors):.2f}, "
                  f"max {errors.max():.2f}); slowest trial {max(times):.1f} s")
    assert ok


# 2 and 3 --------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_2_detection_auc(single_step):
    auc = np.array([r["auc"] for r in single_step])
    ok = bool(np.all(auc >= 0.95))
    record(2, ok, f"AUC min {auc.min():.3f}, median {np.median(auc):.3f}, {int((auc < 0.95).sum())} of 20 seeds "
                  "below 0.95 (each must be >= 0.95)")
    assert ok


@pytest.mark.slow
def test_criterion_3_mapping_with_prior(single_step):
    ch = np.array([r["chamfer"] for r in single_step])
    med = float(np.median(ch))
    ok = med <= 1.0
    record(3, ok, f"median Chamfer {med:.3f} voxel over 20 seeds (range {ch.min():.2f}-{ch.max():.2f})")
    assert ok


# 4 -----------------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_4_strategy_comparison(desk):
    n = 5
    seq = simulate_sequence(PhantomSpec(seed=0),
                            DeformationSpec(n_frames=n, magnitude_range=(1.5, 2.5), coherent=True, seed=0),
                            desk, seed=0)
    runs = {s: track_sequence(TrackingRun(seq.noisy, seq.volumes[0], seq.lines[0], s, seq.lines), desk)
            for s in Strategy}
    start = [runs[Strategy.START_FRAME].metrics[k]["chamfer"] for k in range(1, n)]
    chained = [runs[Strategy.CHAINED].metrics[k]["chamfer"] for k in range(1, n)]
    # first tracked frame: both strategies use the start frame as prior
    first_same = (runs[Strategy.START_FRAME].outputs[1].diagnostics.checksums
                  == runs[Strategy.CHAINED].outputs[1].diagnostics.checksums)
    ratio_ok = start[-1] >= 2 * chained[-1]
    chained_ok = max(chained) < 1.0
    ok = first_same and ratio_ok and chained_ok
    record(4, ok, f"final Chamfer start-frame {start[-1]:.2f} vs chained {chained[-1]:.2f} "
                  f"(needs >= 2x: {ratio_ok}); chained max {max(chained):.2f} (< 1: {chained_ok}); "
                  f"first tracked frame identical: {first_same}")
    assert ok


# 5 -------------------------------------------------------------------------------------------


def peak_centroid(img):
    ys, xs = np.nonzero(img > 0.5 * img.max())
    w = img[ys, xs]
    return (xs * w).sum() / w.sum(), (ys * w).sum() / w.sum()


def test_criterion_5_projector(small_geom, desk):
    g = np.random.default_rng(55)
    worst = 0.0
    for view, _ in itertools.product((0, 1), range(5)):
        x = g.random((16, 16, 16))
        y = g.random((16, 16))
        lhs = float((forward_project(x, small_geom, view) * y).sum())
        rhs = float((x * back_project(y, small_geom, view, x.shape, method="adjoint")).sum())
        worst = max(worst, abs(lhs - rhs) / abs(lhs))
    sep_err = 0.0
    pitch_vox = desk.pixel_pitch / desk.voxel_pitch
    for d, view in itertools.product((4, 8, 16), (0, 1)):
        vol = np.zeros((64, 64, 64))
        vol[32 - d // 2, 32, 32] = 1.0
        vol[32 + d - d // 2, 32, 32] = 1.0
        img = forward_project(vol, desk, view)
        upper, lower = img.copy(), img.copy()
        upper[32:] = 0
        lower[:32] = 0
        sep = peak_centroid(lower)[1] - peak_centroid(upper)[1]
        sep_err = max(sep_err, abs(sep - 2 * d / pitch_vox))
    ok = worst <= 1e-3 and sep_err <= 1.0
    record(5, ok, f"adjoint relative error {worst:.1e}; magnification-2 separation error {sep_err:.2f} px")
    assert ok


# 6 ---------------------------------------------------------------------------------------------


def _gradient_error(m, f, phi, cfg, h=1e-6):
    _, grad = eval_objective(m, f, phi, cfg)
    fd = np.zeros_like(phi)
    flat, out = phi.reshape(-1), fd.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        ep, _ = eval_objective(m, f, phi, cfg)
        flat[i] = keep - h
        em, _ = eval_objective(m, f, phi, cfg)
        flat[i] = keep
        out[i] = (ep - em) / (2 * h)
    floor = 1e-3 * np.abs(fd).max()
    return float((np.abs(grad - fd) / np.maximum(np.maximum(np.abs(grad), np.abs(fd)), floor)).max())


def test_criterion_6_oracles():
    g = np.random.default_rng(66)
    # Chamfer vs brute force
    ch_err = 0.0
    for _ in range(3):
        a, b = g.uniform(0, 64, (200, 3)), g.uniform(0, 64, (200, 3))
        d = np.sqrt(((a[:, None] - b[None]) ** 2).sum(-1))
        ch_err = max(ch_err, abs(chamfer_distance(a, b) - 0.5 * (d.min(1).mean() + d.min(0).mean())))
    # registration gradient vs central differences
    grad_err = 0.0
    for sim in ("ssd", "ncc"):
        cfg = RegConfig(similarity=sim, lam=0.3)
        m2, f2 = (gaussian_smooth(g.random((16, 16)), 1.5) for _ in range(2))
        grad_err = max(grad_err, _gradient_error(m2, f2, g.uniform(-1.5, 1.5, (2, 16, 16)), cfg))
        m3, f3 = (gaussian_smooth(g.random((8, 8, 8)), 1.0) for _ in range(2))
        grad_err = max(grad_err, _gradient_error(m3, f3, g.uniform(-1.2, 1.2, (3, 8, 8, 8)), cfg))
    # trilinear sampling vs the 8-term formula
    vol = g.random((6, 6, 6))
    tri_err = 0.0
    for p in g.uniform(0, 4.999, (200, 3)):
        x0, y0, z0 = (int(math.floor(c)) for c in p)
        fx, fy, fz = p[0] - x0, p[1] - y0, p[2] - z0
        direct = sum((fx if dx else 1 - fx) * (fy if dy else 1 - fy) * (fz if dz else 1 - fz)
                     * vol[z0 + dz, y0 + dy, x0 + dx] for dz, dy, dx in itertools.product((0, 1), repeat=3))
        tri_err = max(tri_err, abs(sample_trilinear(vol, p) - direct))
    # rasterize -> extract round trip
    rms = 0.0
    for _ in range(10):
        while True:
            a, b = g.uniform(8, 56, 3), g.uniform(8, 56, 3)
            if np.linalg.norm(a - b) >= 10:
                break
        line = Polyline3(np.array([a, b]), radius=1.0)
        found = extract_polylines(rasterize_polyline(line, (64, 64, 64)))
        if len(found) != 1:
            rms = np.inf
            break
        q = found[0].points
        pts = line.resample(0.5)
        dist = np.min([_seg_dist(pts, p0, p1) for p0, p1 in zip(q[:-1], q[1:])], axis=0)
        rms = max(rms, float(np.sqrt((dist**2).mean())))
    ok = ch_err <= 1e-9 and grad_err <= 1e-4 and tri_err <= 1e-12 and rms <= 0.5
    record(6, ok, f"Chamfer {ch_err:.1e}, gradient {grad_err:.1e}, trilinear {tri_err:.1e}, round trip RMS {rms:.3f}")
    assert ok


def _seg_dist(p, a, b):
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


# 7 ---------------------------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_7_determinism(tmp_path):
    sums = []
    for rep in ("a", "b"):
        assert cli.main(["gen", "--seed", "7", "--out", str(tmp_path / rep / "data")]) == 0
        assert cli.main(["track", "--dataset", str(tmp_path / rep / "data"), "--out", str(tmp_path / rep / "run")]) == 0
        sums.append({d: sio.read_json(tmp_path / rep / d / "manifest.json")["artifacts"] for d in ("data", "run")})
    n = sum(len(v) for v in sums[0].values())
    ok = sums[0] == sums[1]
    record(7, ok, f"gen + track reruns: {n} artifact checksums {'identical' if ok else 'differ'} "
                  "(wall-clock timings excluded)")
    assert ok


# 8 ---------------------------------------------------------------------------------------------------


def test_criterion_8_poisson_mean():
    n = 10**6
    results = []
    for mean, scale, seed in ((4.0, 0.24, 1), (0.5, 0.24, 2), (20.0, 10.0, 3)):
        out = add_poisson_noise(np.full(n, mean), scale, seed)
        z = abs(out.mean() - mean) / (math.sqrt(mean / scale) / math.sqrt(n))
        results.append(z)
    ok = max(results) <= 3.0
    record(8, ok, "mean deviation " + ", ".join(f"{z:.2f}" for z in results) + " sigma (limit 3)")
    assert ok
