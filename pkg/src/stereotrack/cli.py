"""Command-line experiment runner.

Every subcommand reads one JSON config (``--config``), writes into ``--out``
and records each artifact with its sha256 in ``manifest.json``::

    python -m stereotrack gen --out data
    python -m stereotrack track --dataset data --out run
    python -m stereotrack eval --run run

The single-stage commands (project, register2d, detect, backproject, map3d)
chain through their output directories.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import io as sio
from .config import SCALES, ConfigError, ExperimentConfig, load_config
from .features import FeatureMap2, detect_features_2d, extract_polylines, map_3d_no_prior
from .grid import rasterize_polylines, warp_image, warp_volume
from .projector import forward_project, make_bp_evidence
from .registration import register_2d, register_3d_prior
from .simulate import simulate_sequence, truth_line_maps
from .tracking import Strategy, TrackingRun, track_sequence

log = logging.getLogger("stereotrack")

METRIC_COLUMNS = ["frame", "chamfer", "auc", "auc0", "auc1", "line_error", "line_error0", "line_error1", "error"]


class CommandError(RuntimeError):
    pass


class Outputs:
    """Collects the artifacts of one command and writes its manifest."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: list = []
        self.volatile: list = []

    def add(self, *paths, volatile: bool = False):
        for p in paths:
            (self.volatile if volatile else self.files).append(Path(p))

    def grid(self, name, arr, **kw):
        self.add(*sio.save_grid(self.root / name, arr, **kw))

    def manifest(self, command: str, cfg: ExperimentConfig, inputs: dict | None = None, extra: dict | None = None):
        entries = [{"path": p.relative_to(self.root).as_posix(), "sha256": sio.sha256_file(p)}
                   for p in sorted(set(self.files))]
        doc = {
            "command": command,
            "version": __version__,
            "config": cfg.to_dict(),
            "config_hash": cfg.config_hash(),
            "seeds": cfg.seeds(),
            "inputs": inputs or {},
            "artifacts": entries,
            # excluded from reproducibility checks (wall-clock timings)
            "volatile": sorted(p.relative_to(self.root).as_posix() for p in self.volatile),
        }
        if extra:
            doc.update(extra)
        sio.write_json(self.root / "manifest.json", doc)
        sio.write_json(self.root / "config.json", cfg.to_dict())
        return doc


def _manifest_config(d: Path):
    m = d / "manifest.json"
    return sio.read_json(m)["config"] if m.exists() else None


def _config(args, upstream: Path | None = None) -> ExperimentConfig:
    """``--config`` if given, else the upstream directory's config, plus flag overrides."""
    if args.config is not None:
        return load_config(args.config, scale=args.scale, seed=args.seed)
    base = _manifest_config(upstream) if upstream is not None else None
    return ExperimentConfig.from_dict(base, scale=args.scale, seed=args.seed)


def _out(args, cfg: ExperimentConfig, name: str) -> Path:
    return Path(args.out) if args.out else cfg.output_dir / name


def _require(paths):
    missing = [str(p) for p in paths if not Path(p).exists()]
    if missing:
        raise CommandError("missing artifacts: " + ", ".join(missing))


def _frame_dir(dataset: Path, k: int) -> Path:
    return dataset / f"frame_{k:03d}"


def _load_frame(dataset: Path, k: int, cfg: ExperimentConfig):
    fd = _frame_dir(dataset, k)
    _require([fd / "volume.json", fd / "lines.csv", fd / "noisy_v0.json", fd / "noisy_v1.json"])
    vol, _ = sio.load_grid(fd / "volume")
    lines = sio.load_polylines(fd / "lines.csv", radius=cfg.phantom_spec().line_radius)
    noisy = [sio.load_grid(fd / f"noisy_v{v}")[0] for v in (0, 1)]
    return vol, lines, noisy


def _count_frames(dataset: Path) -> int:
    return len(sorted(dataset.glob("frame_*/volume.json")))


# subcommands -----------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _config(args)
    out = Outputs(_out(args, cfg, "dataset"))
    geom = cfg.geometry()
    seq = simulate_sequence(cfg.phantom_spec(), cfg.deformation_spec(), geom, cfg.noise(), cfg.section_seed("noise"))
    pitch = geom.voxel_pitch
    for k in range(seq.n_frames):
        fd = f"frame_{k:03d}"
        out.grid(f"{fd}/volume", seq.volumes[k], pitch=pitch)
        out.add(sio.save_polylines(out.root / fd / "lines.csv", seq.lines[k]))
        for v, truth in enumerate(truth_line_maps(seq.lines[k], geom, seq.dims)):
            out.grid(f"{fd}/clean_v{v}", seq.clean[k][v], pitch=geom.pixel_pitch)
            out.grid(f"{fd}/noisy_v{v}", seq.noisy[k][v], pitch=geom.pixel_pitch)
            out.grid(f"{fd}/truth_v{v}", truth.astype(np.float64), pitch=geom.pixel_pitch)
            out.add(sio.save_pgm(out.root / fd / f"noisy_v{v}.pgm", seq.noisy[k][v]))
    out.manifest("gen", cfg, extra={"n_frames": seq.n_frames})
    print(f"wrote {seq.n_frames} frames to {out.root}")
    return 0


def cmd_project(args) -> int:
    dataset = Path(args.dataset)
    cfg = _config(args, dataset)
    out = Outputs(_out(args, cfg, "project"))
    geom = cfg.geometry()
    vol, _ = sio.load_grid(_frame_dir(dataset, args.frame) / "volume")
    for v in (0, 1):
        img = forward_project(vol, geom, v)
        out.grid(f"proj_v{v}", img, pitch=geom.pixel_pitch)
        out.add(sio.save_pgm(out.root / f"proj_v{v}.pgm", img))
    out.manifest("project", cfg, {"dataset": str(dataset), "frame": args.frame})
    return 0


def cmd_register2d(args) -> int:
    dataset = Path(args.dataset)
    cfg = _config(args, dataset)
    out = Outputs(_out(args, cfg, "register2d"))
    geom = cfg.geometry()
    reg = cfg.track_config().reg2d
    start, _, _ = _load_frame(dataset, 0, cfg)
    _, _, noisy = _load_frame(dataset, args.frame, cfg)
    for v in (0, 1):
        moving = forward_project(start, geom, v)
        res = register_2d(moving, noisy[v], reg)
        moved = warp_image(moving, res.field)
        out.grid(f"field_v{v}", res.field, components=True)
        out.grid(f"moved_v{v}", moved, pitch=geom.pixel_pitch)
        out.add(sio.save_csv(out.root / f"trace_v{v}.csv",
                             [{"level": lv, "iteration": it, "objective": e} for lv, it, e in res.trace],
                             ["iteration", "level", "objective"]))
        out.add(sio.save_pgm(out.root / f"moved_v{v}.pgm", moved))
    out.manifest("register2d", cfg, {"dataset": str(dataset), "frame": args.frame})
    return 0


def cmd_detect(args) -> int:
    src = Path(args.input)
    cfg = _config(args, src)
    out = Outputs(_out(args, cfg, "detect"))
    tc = cfg.track_config()
    geom = cfg.geometry()
    _require([src / f"moved_v{v}.json" for v in (0, 1)])
    radius = tc.marker_radius_px or max(cfg.phantom_spec().line_radius * geom.voxel_pitch * geom.magnification
                                        / geom.pixel_pitch, 0.5)
    thresholds = {}
    for v in (0, 1):
        img, _ = sio.load_grid(src / f"moved_v{v}")
        fm = detect_features_2d(img, radius, tc.n_orientations, tc.elongation, tc.detect_threshold)
        out.grid(f"score_v{v}", fm.score)
        out.add(sio.save_pgm(out.root / f"mask_v{v}.pgm", fm.mask.astype(float), 0.0, 1.0))
        thresholds[f"v{v}"] = fm.threshold
    out.add(sio.write_json(out.root / "thresholds.json", thresholds))
    out.manifest("detect", cfg, {"input": str(src)})
    return 0


def _load_features(src: Path):
    _require([src / "score_v0.json", src / "score_v1.json", src / "thresholds.json"])
    th = sio.read_json(src / "thresholds.json")
    return [FeatureMap2(sio.load_grid(src / f"score_v{v}")[0], th[f"v{v}"]) for v in (0, 1)]


def cmd_backproject(args) -> int:
    src = Path(args.input)
    cfg = _config(args, src)
    out = Outputs(_out(args, cfg, "backproject"))
    tc = cfg.track_config()
    feats = _load_features(src)
    maps = [f.mask.astype(float) if tc.binarize else f.score for f in feats]
    dims = (cfg.phantom_spec().dims,) * 3
    ev = make_bp_evidence(maps[0], maps[1], cfg.geometry(), dims, filtered=tc.filtered)
    out.grid("evidence", ev)
    out.manifest("backproject", cfg, {"input": str(src)}, {"evidence_empty": not ev.any()})
    return 0


def cmd_map3d(args) -> int:
    src = Path(args.input)
    cfg = _config(args, src)
    out = Outputs(_out(args, cfg, "map3d"))
    feats = _load_features(src)
    dims = (cfg.phantom_spec().dims,) * 3
    geom = cfg.geometry()
    n_lines = cfg.phantom_spec().n_lines
    if args.prior is None:
        fv = map_3d_no_prior(feats[0], feats[1], geom, dims, expected_count=n_lines)
        volume, lines = fv.score, fv.lines
    else:
        tc = cfg.track_config()
        prior_lines = sio.load_polylines(args.prior, radius=cfg.phantom_spec().line_radius)
        maps = [f.mask.astype(float) if tc.binarize else f.score for f in feats]
        ev = make_bp_evidence(maps[0], maps[1], geom, dims, filtered=tc.filtered)
        v_prior = rasterize_polylines(prior_lines, dims)
        psi = register_3d_prior(v_prior, ev, tc.reg3d).field
        volume = np.clip(warp_volume(v_prior, psi), 0.0, 1.0)
        lines = extract_polylines(volume, expected_count=n_lines)
        out.grid("field3d", psi, components=True)
    out.grid("feature", volume)
    out.add(sio.save_polylines(out.root / "lines.csv", lines))
    out.manifest("map3d", cfg, {"input": str(src), "prior": args.prior}, {"n_lines": len(lines)})
    return 0


def _overlay(img, mask):
    """Image scaled to [0, 0.8] with mask pixels set to white, for PGM export."""
    lo, hi = float(img.min()), float(img.max())
    base = 0.8 * (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    return np.where(mask, 1.0, base)


def cmd_track(args) -> int:
    dataset = Path(args.dataset)
    cfg = _config(args, dataset)
    data_cfg = _manifest_config(dataset)
    if data_cfg is not None and data_cfg["geometry"] != cfg.data["geometry"]:
        raise CommandError("tracking geometry differs from the dataset's geometry")
    out = Outputs(_out(args, cfg, "track"))
    geom = cfg.geometry()
    tc = cfg.track_config()
    n = _count_frames(dataset)
    if n < 2:
        raise CommandError(f"dataset {dataset} holds {n} frames; tracking needs at least 2")
    frames = [_load_frame(dataset, k, cfg) for k in range(n)]
    start_vol, start_lines, _ = frames[0]
    summary = {}
    for name in cfg.strategies:
        run = TrackingRun([f[2] for f in frames], start_vol, start_lines, Strategy(name), [f[1] for f in frames])
        track_sequence(run, geom, tc)
        sd = out.root / name
        rows = [run.metrics[k] for k in range(1, n)]
        out.add(sio.save_csv(sd / "metrics.csv", rows, METRIC_COLUMNS))
        times = []
        for k in range(1, n):
            o = run.outputs[k]
            if o is None:
                continue
            fd = f"{name}/frame_{k:03d}"
            out.add(sio.save_polylines(out.root / fd / "lines.csv", o.lines))
            out.grid(f"{fd}/feature", o.feature.score)
            out.add(sio.write_json(out.root / fd / "stage_checksums.json", o.diagnostics.checksums))
            for v in (0, 1):
                feat = o.diagnostics.features[v]
                out.add(sio.save_pgm(out.root / fd / f"overlay_v{v}.pgm", _overlay(o.diagnostics.moved[v], feat.mask)))
            times.append({"frame": k, **{s: t for s, t in o.diagnostics.timings.items()}})
        if times:
            out.add(sio.save_csv(sd / "timings.csv", times), volatile=True)
        summary[name] = {"frames_failed": sorted(run.errors)}
        for r in rows:
            print(f"{name} frame {r['frame']}: chamfer {r.get('chamfer', float('nan')):.3f} "
                  f"auc {r.get('auc', float('nan')):.3f}" + (f" ERROR {r['error']}" if "error" in r else ""))
    out.manifest("track", cfg, {"dataset": str(dataset)}, {"strategies": summary})
    return 0


def _num(s):
    try:
        return float(s)
    except (TypeError, ValueError):
        return float("nan")


def evaluate_run(run_dir, thresholds: dict | None = None):
    """Aggregate a track run directory; returns ``(report rows, violations)``."""
    run_dir = Path(run_dir)
    if not (run_dir / "manifest.json").exists():
        raise CommandError(f"missing artifacts: {run_dir / 'manifest.json'}")
    man = sio.read_json(run_dir / "manifest.json")
    strategies = list(man.get("strategies", {}))
    expected = [run_dir / s / "metrics.csv" for s in strategies]
    _require(expected + [run_dir / a["path"] for a in man["artifacts"]])
    if thresholds is None:
        thresholds = {k: v for k, v in man["config"].get("thresholds", {}).items() if v is not None}
    rows, violations = [], []
    for s in strategies:
        for r in sio.load_csv(run_dir / s / "metrics.csv"):
            row = {"strategy": s, "frame": int(r["frame"]), "chamfer": _num(r["chamfer"]),
                   "auc": _num(r["auc"]), "line_error": _num(r["line_error"]), "error": r.get("error") or ""}
            rows.append(row)
            tag = f"{s} frame {row['frame']}"
            if row["error"]:
                violations.append(f"{tag}: failed ({row['error']})")
            if "max_chamfer" in thresholds and not row["chamfer"] <= thresholds["max_chamfer"]:
                violations.append(f"{tag}: chamfer {row['chamfer']:.3f} > max_chamfer {thresholds['max_chamfer']}")
            if "min_auc" in thresholds and not row["auc"] >= thresholds["min_auc"]:
                violations.append(f"{tag}: auc {row['auc']:.3f} < min_auc {thresholds['min_auc']}")
            if "max_line_error" in thresholds and not row["line_error"] <= thresholds["max_line_error"]:
                violations.append(f"{tag}: line error {row['line_error']:.3f} > max_line_error "
                                  f"{thresholds['max_line_error']}")
    return rows, violations


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    thresholds = None
    if args.config is not None:
        thresholds = load_config(args.config, scale=args.scale, seed=args.seed).thresholds
    rows, violations = evaluate_run(run_dir, thresholds)
    out_dir = Path(args.out) if args.out else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    sio.save_csv(out_dir / "report.csv", rows, ["strategy", "frame", "chamfer", "auc", "line_error", "error"])
    lines = ["strategy      frame  chamfer     auc  line_err"]
    for r in rows:
        lines.append(f"{r['strategy']:<12} {r['frame']:>6} {r['chamfer']:>8.3f} {r['auc']:>7.3f} {r['line_error']:>9.3f}"
                     + (f"  ERROR {r['error']}" if r["error"] else ""))
    for s in sorted({r["strategy"] for r in rows}):
        ch = [r["chamfer"] for r in rows if r["strategy"] == s]
        lines.append(f"{s}: median chamfer {np.median(ch):.3f} over {len(ch)} frames")
    lines += [f"VIOLATION {v}" for v in violations] or ["all thresholds met"]
    text = "\n".join(lines) + "\n"
    (out_dir / "report.txt").write_text(text)
    print(text, end="")
    return 1 if violations else 0


# entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--scale", choices=SCALES, help="volume and geometry preset")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="stereotrack", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", parents=[common], help="simulate a deforming phantom and its projections")
    s = sub.add_parser("project", parents=[common], help="forward-project a dataset frame")
    s.add_argument("--dataset", required=True)
    s.add_argument("--frame", type=int, default=0)
    s = sub.add_parser("register2d", parents=[common], help="register start projections to a noisy frame")
    s.add_argument("--dataset", required=True)
    s.add_argument("--frame", type=int, default=1)
    s = sub.add_parser("detect", parents=[common], help="detect line features in moved images")
    s.add_argument("--input", required=True, help="register2d output directory")
    s = sub.add_parser("backproject", parents=[common], help="stereo evidence volume from feature maps")
    s.add_argument("--input", required=True, help="detect output directory")
    s = sub.add_parser("map3d", parents=[common], help="3D feature mapping, with or without a prior")
    s.add_argument("--input", required=True, help="detect output directory")
    s.add_argument("--prior", help="polyline table of the prior lines")
    s = sub.add_parser("track", parents=[common], help="track a generated sequence")
    s.add_argument("--dataset", required=True)
    s = sub.add_parser("eval", parents=[common], help="summarize a track run and check thresholds")
    s.add_argument("--run", required=True)
    return p


COMMANDS = {
    "gen": cmd_gen, "project": cmd_project, "register2d": cmd_register2d, "detect": cmd_detect,
    "backproject": cmd_backproject, "map3d": cmd_map3d, "track": cmd_track, "eval": cmd_eval,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (CommandError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
