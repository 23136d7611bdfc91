"""``tba-kit`` command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error. ``--config FILE`` holds a
JSON object whose keys are option names (``clip_len``, ``rate``...),
optionally nested under a subcommand name; explicit flags always win.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from tbakit import __version__
from tbakit.errors import TbaKitError

log = logging.getLogger("tbakit")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
GLOBAL_DEFAULTS = {"config": None, "jobs": None, "seed": None, "json_errors": False}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n\n{self.format_help()}")


# -- helpers -----------------------------------------------------------------


@contextmanager
def _executor(jobs: int):
    if jobs <= 1:
        yield None
    else:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            yield ex


def _jobs(args, default_all: bool) -> int:
    if args.jobs is not None:
        return max(1, args.jobs)
    return (os.cpu_count() or 1) if default_all else 1


def _need(args, *names):
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UsageError(f"{args.command}: missing required option(s): {flags}")


def _read_json_file(path, what):
    from tbakit.scene_io import read_json

    return read_json(path, what)


def _scenes(directory):
    from tbakit.scene_io import read_scene_dir

    d = Path(directory)
    if not d.is_dir():
        raise TbaKitError(f"scene directory {str(d)!r} does not exist")
    scenes = read_scene_dir(d)
    if not scenes:
        raise TbaKitError(f"no scene documents in {str(d)!r}")
    return scenes


def _emit(obj, out):
    from tbakit.scene_io import write_json

    if out is None or out == "-":
        sys.stdout.write(json.dumps(obj, indent=2, allow_nan=False) + "\n")
    else:
        write_json(obj, out, indent=2)


# -- subcommands -------------------------------------------------------------


def _simulate_one(script_dict, out_dir):
    from tbakit.scene_io import scene_path, write_points, write_scene
    from tbakit.simulate import SceneScript, generate_scene

    script = SceneScript.from_dict(script_dict)
    scene, clouds = generate_scene(script)
    out = Path(out_dir)
    for rel, cloud in clouds.items():
        write_points(cloud, out / rel)
    write_scene(scene, scene_path(out, scene.scene_id))
    return scene.scene_id


def cmd_simulate(args):
    _need(args, "script", "out")
    doc = _read_json_file(args.script, "scene script") if args.script != "-" else {}
    doc = dict(doc)
    n = int(doc.pop("num_scenes", 1))
    base_seed = args.seed if args.seed is not None else int(doc.pop("rng_seed", 0))
    doc.pop("rng_seed", None)
    scripts = []
    for i in range(n):
        d = {**doc, "rng_seed": base_seed + i}
        if n > 1 and d.get("scene_id"):
            d["scene_id"] = f"{d['scene_id']}-{i:03d}"
        scripts.append(d)
    with _executor(_jobs(args, True)) as ex:
        m = ex.map if ex else map
        ids = list(m(_simulate_one, scripts, [args.out] * n))
    log.info("wrote %d scene(s) to %s", len(ids), args.out)
    return EXIT_OK


def cmd_build_db(args):
    from tbakit.track_sampling import build_track_db

    _need(args, "scenes", "out")
    scenes = _scenes(args.scenes)
    with _executor(_jobs(args, True)) as ex:
        db = build_track_db(scenes, args.scenes, executor=ex)
    db.save(args.out)
    log.info("database: %d tracks, %d instances", len(db), db.num_instances())
    return EXIT_OK


def _augment_scene(scene, db_dir, scenes_dir, out_dir, cfg_dict, clip_len):
    from tbakit.scene_io import Scene, load_clip, scene_path, write_points, write_scene
    from tbakit.simulate import derive_seed
    from tbakit.track_sampling import SamplingConfig, augment_clip

    db = _db_cache(db_dir)
    cfg = SamplingConfig.from_dict(cfg_dict)
    reports = []
    out = Path(out_dir)
    for start in range(0, len(scene.frames) - clip_len + 1, clip_len):
        clip = load_clip(scene, start, clip_len, scenes_dir)
        rng = np.random.default_rng(derive_seed(cfg.rng_seed, scene.scene_id, start))
        aug, rep = augment_clip(clip, db, cfg, rng)
        clip_id = f"{scene.scene_id}-c{start:04d}"
        frames = []
        for k, (f, cloud) in enumerate(zip(aug.frames, aug.clouds)):
            rel = f"lidar/{clip_id}/{k:04d}.bin"
            write_points(cloud, out / rel)
            frames.append(replace(f, frame_id=f"{clip_id}-f{k:04d}", lidar_path=rel))
        write_scene(Scene(clip_id, tuple(frames)), scene_path(out, clip_id))
        reports.append({"clip_id": clip_id, **rep.to_dict()})
    return reports


_DB = {}


def _db_cache(db_dir):
    from tbakit.track_sampling import TrackDatabase

    key = str(Path(db_dir).resolve())
    if key not in _DB:
        _DB[key] = TrackDatabase.load(db_dir)
    return _DB[key]


def cmd_augment(args):
    from tbakit.track_sampling import SamplingConfig

    _need(args, "db", "scenes", "out")
    if args.clip_len < 1:
        raise UsageError("--clip-len must be >= 1")
    extra = _read_json_file(args.sampling, "sampling config") if args.sampling else {}
    cfg = SamplingConfig.from_dict(
        {**extra, "sampling_rate": args.rate, "rng_seed": args.seed if args.seed is not None else extra.get("rng_seed", 0)}
    )
    _db_cache(args.db)  # fail early on a bad database
    scenes = _scenes(args.scenes)
    n = len(scenes)
    cfg_dict = asdict(cfg)
    with _executor(_jobs(args, True)) as ex:
        m = ex.map if ex else map
        per_scene = list(m(_augment_scene, scenes, [args.db] * n, [args.scenes] * n, [args.out] * n, [cfg_dict] * n, [args.clip_len] * n))
    clips = [r for rs in per_scene for r in rs]
    report = {
        "config": {**cfg_dict, "clip_len": args.clip_len},
        "clips": clips,
        "totals": {
            "clips": len(clips),
            "injected_boxes": sum(c["injected_boxes"] for c in clips),
            "pruned_boxes": sum(c["pruned_boxes"] for c in clips),
            "points_removed": sum(c["points_removed"] for c in clips),
            "points_added": sum(c["points_added"] for c in clips),
        },
    }
    if args.report:
        _emit(report, args.report)
    log.info("augmented %d clips", len(clips))
    return EXIT_OK


def _track_scene(scene, det_dict, policy_dict, decoder_dict, use_gt):
    from tbakit.engine import DecoderConfig, PropagationPolicy, run_tracker
    from tbakit.simulate import SurrogateDetectorConfig

    return run_tracker(
        scene,
        SurrogateDetectorConfig.from_dict(det_dict),
        PropagationPolicy(**policy_dict),
        DecoderConfig(**decoder_dict),
        use_gt=use_gt,
    )


def cmd_track(args):
    from tbakit.engine import GT_MATCHED, DecoderConfig, PropagationPolicy, RunStats
    from tbakit.scene_io import TrackingResult, write_result
    from tbakit.simulate import SurrogateDetectorConfig

    _need(args, "scenes", "out")
    mode = args.policy.replace("-", "_")
    if mode == GT_MATCHED and args.gt is None:
        raise UsageError("track: --policy gt-matched needs ground truth (--gt DIR)")
    det = _read_json_file(args.detector, "detector config") if args.detector else {}
    if args.seed is not None:
        det = {**det, "rng_seed": args.seed}
    det_cfg = SurrogateDetectorConfig.from_dict(det)
    policy = PropagationPolicy(mode, args.tau, args.max_proposals)
    decoder = DecoderConfig(**(_read_json_file(args.decoder, "decoder config") if args.decoder else {}))
    scenes = _scenes(args.scenes)
    if args.gt is not None:
        gt_ids = {s.scene_id for s in _scenes(args.gt)}
        missing = [s.scene_id for s in scenes if s.scene_id not in gt_ids]
        if missing:
            raise TbaKitError(f"ground truth lacks scene(s): {', '.join(missing)}")
    # confidence-mode output ignores ground truth; it only feeds the statistics
    use_gt = args.gt is not None or mode != GT_MATCHED
    n = len(scenes)
    with _executor(_jobs(args, False)) as ex:
        m = ex.map if ex else map
        outs = list(m(_track_scene, scenes, [asdict(det_cfg)] * n, [asdict(policy)] * n, [asdict(decoder)] * n, [use_gt] * n))
    results, stats = {}, RunStats()
    for res, st in outs:
        results.update(res.results)
        stats.merge(st)
    write_result(TrackingResult(results), args.out)
    if args.stats:
        _emit({"policy": asdict(policy), **stats.to_dict()}, args.stats)
    return EXIT_OK


def _prediction_from_dict(d, where):
    from tbakit.assignment import Prediction
    from tbakit.errors import FormatError
    from tbakit.scene_io import box_from_dict

    try:
        return Prediction(
            int(d["slot_id"]), d.get("kind", "proposal"), box_from_dict(d["box"], where),
            tuple(float(x) for x in d["class_scores"]), d.get("prev_gt"),
        )
    except KeyError as exc:
        raise FormatError(f"missing field {exc.args[0]!r}", where) from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(str(exc), where) from None


def _gts_from_list(items, where):
    from tbakit.assignment import GroundTruth
    from tbakit.errors import FormatError
    from tbakit.scene_io import box_from_dict

    if not isinstance(items, list):
        raise FormatError("expected a list of ground-truth boxes", where)
    out = []
    for i, g in enumerate(items):
        w = f"{where}[{i}]"
        if "track_id" not in g:
            raise FormatError("missing field 'track_id'", w)
        out.append(GroundTruth(str(g["track_id"]), box_from_dict(g.get("box", g), w)))
    return out


def _preds_from_list(items, where):
    from tbakit.errors import FormatError

    if not isinstance(items, list):
        raise FormatError("expected a list of predictions", where)
    return [_prediction_from_dict(p, f"{where}[{i}]") for i, p in enumerate(items)]


def cmd_assign(args):
    from tbakit.assignment import assign_two_stage

    _need(args, "preds", "gts")
    preds = _preds_from_list(_read_json_file(args.preds, "predictions").get("predictions"), "predictions")
    gts = _gts_from_list(_read_json_file(args.gts, "ground truth").get("gts"), "gts")
    res = assign_two_stage(preds, gts)
    _emit(res.to_dict(preds, gts), args.out)
    return EXIT_OK


def cmd_losses(args):
    from tbakit.assignment import assign_two_stage
    from tbakit.losses import HEADS, LossWeights, clip_loss, evaluate_frame

    _need(args, "preds", "gts")
    pdoc = _read_json_file(args.preds, "predictions")
    gdoc = _read_json_file(args.gts, "ground truth")
    weights = LossWeights.from_dict(_read_json_file(args.weights, "loss weights")) if args.weights else LossWeights()
    pframes = pdoc["frames"] if "frames" in pdoc else [pdoc]
    gframes = gdoc["frames"] if "frames" in gdoc else [gdoc]
    if len(pframes) != len(gframes):
        raise TbaKitError(f"{len(pframes)} prediction frames but {len(gframes)} ground-truth frames")
    out = []
    for i, (pf, gf) in enumerate(zip(pframes, gframes)):
        gts = _gts_from_list(gf.get("gts", []), f"frames[{i}].gts")
        heads = {h: _preds_from_list(pf.get(h, []), f"frames[{i}].{h}") for h in HEADS}
        asg = {h: assign_two_stage(heads[h], gts) for h in HEADS}
        hm = (np.asarray(pf["heatmap"], float), np.asarray(gf["heatmap"], float)) if "heatmap" in pf else (None, None)
        tr = (np.asarray(pf["trajectory"], float), np.asarray(gf["trajectory"], float)) if "trajectory" in pf else (None, None)
        out.append(evaluate_frame(heads, gts, asg, hm[0], hm[1], tr[0], tr[1], weights))
    _emit({"weights": asdict(weights), "frames": [f.to_dict() for f in out], "clip_loss": clip_loss(out)}, args.out)
    return EXIT_OK


def cmd_eval(args):
    from tbakit.metrics import MatchingConfig, evaluate
    from tbakit.scene_io import read_result

    _need(args, "gt", "results")
    scenes = _scenes(args.gt)
    result = read_result(args.results)
    cfg = MatchingConfig(match_distance=args.match_distance)
    with _executor(_jobs(args, True)) as ex:
        report = evaluate(scenes, result, cfg, executor=ex)
    _emit(report.to_dict(), args.out)
    if args.table:
        sys.stdout.write(report.format_table() + "\n")
    return EXIT_OK


def cmd_render(args):
    from tbakit.geometry import world_to_ego
    from tbakit.render import RenderStyle, render_bev
    from tbakit.scene_io import read_points, read_result

    _need(args, "scenes", "out")
    scenes = _scenes(args.scenes)
    if args.scene:
        scenes = [s for s in scenes if s.scene_id == args.scene]
        if not scenes:
            raise TbaKitError(f"no scene {args.scene!r} in {args.scenes!r}")
    result = read_result(args.results) if args.results else None
    style = RenderStyle(meters_per_unit=args.scale, extent_m=args.extent)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for scene in scenes:
        dt = scene.frame_period_s()
        for f in scene.frames:
            if result is not None:
                boxes = [(b.tracking_id, world_to_ego(b.to_box(), f.ego_pose)) for b in result.boxes(f.frame_id)]
            else:
                boxes = [(a.track_id, world_to_ego(a.box, f.ego_pose)) for a in f.annotations]
            traj = {
                tid: [(b.center[0] + k * dt * b.velocity[0], b.center[1] + k * dt * b.velocity[1]) for k in range(args.horizon + 1)]
                for tid, b in boxes
            } if args.horizon > 0 else {}
            pts = None
            if not args.no_points:
                p = Path(args.scenes) / f.lidar_path
                pts = read_points(p).points if p.exists() else None
            svg = render_bev(boxes, traj, pts, style, title=f.frame_id)
            (out / f"{f.frame_id}.svg").write_text(svg, encoding="utf-8")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand from resetting options given before it
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON file with option defaults (flags win)")
    common.add_argument("--jobs", type=int, help="worker processes")
    common.add_argument("--seed", type=int, help="seed for all randomness")
    common.add_argument("--json-errors", action="store_true", help="report errors as JSON on stderr")

    p = _Parser(prog="tba-kit", description="Tracking-by-attention toolkit: simulate, augment, track, evaluate.", parents=[common])
    p.add_argument("--version", action="version", version=f"tba-kit {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="generate synthetic scenes")
    s.add_argument("--script", help="scene script JSON (SceneScript fields, plus num_scenes)")
    s.add_argument("--out", help="output scene directory")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("build-db", parents=[common], help="build the ground-truth track database")
    s.add_argument("--scenes")
    s.add_argument("--out")
    s.set_defaults(func=cmd_build_db)

    s = sub.add_parser("augment", parents=[common], help="track-sampling augmentation of clips")
    s.add_argument("--db")
    s.add_argument("--scenes")
    s.add_argument("--rate", type=float, default=1.0)
    s.add_argument("--clip-len", type=int, default=3)
    s.add_argument("--sampling", help="JSON with SamplingConfig fields (targets, min_track_length, placement)")
    s.add_argument("--out")
    s.add_argument("--report")
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("track", parents=[common], help="run the tracker with the surrogate detector")
    s.add_argument("--scenes")
    s.add_argument("--detector", help="SurrogateDetectorConfig JSON")
    s.add_argument("--decoder", help="DecoderConfig JSON")
    s.add_argument("--policy", choices=["confidence", "gt-matched"], default="confidence")
    s.add_argument("--tau", type=float, default=0.4)
    s.add_argument("--max-proposals", type=int, default=200)
    s.add_argument("--gt", help="ground-truth scene directory (required by gt-matched)")
    s.add_argument("--out")
    s.add_argument("--stats", help="write query-lifecycle statistics here")
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("assign", parents=[common], help="two-stage assignment of one frame")
    s.add_argument("--preds")
    s.add_argument("--gts")
    s.add_argument("--out")
    s.set_defaults(func=cmd_assign)

    s = sub.add_parser("losses", parents=[common], help="evaluate frame and clip losses")
    s.add_argument("--preds")
    s.add_argument("--gts")
    s.add_argument("--weights")
    s.add_argument("--out")
    s.set_defaults(func=cmd_losses)

    s = sub.add_parser("eval", parents=[common], help="tracking metrics report")
    s.add_argument("--gt")
    s.add_argument("--results")
    s.add_argument("--out")
    s.add_argument("--match-distance", type=float, default=2.0)
    s.add_argument("--table", action="store_true", help="also print the per-class table")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("render", parents=[common], help="BEV SVG per frame")
    s.add_argument("--scenes")
    s.add_argument("--results")
    s.add_argument("--scene")
    s.add_argument("--out")
    s.add_argument("--scale", type=float, default=0.1, help="meters per SVG unit")
    s.add_argument("--extent", type=float, default=100.0, help="canvas side in meters")
    s.add_argument("--horizon", type=int, default=0, help="draw constant-velocity trajectories this many frames ahead")
    s.add_argument("--no-points", action="store_true")
    s.set_defaults(func=cmd_render)
    return p


def _apply_config(parser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        doc = json.loads(Path(known.config).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise TbaKitError(f"config file {known.config!r} not found") from None
    except json.JSONDecodeError as exc:
        raise TbaKitError(f"config file {known.config!r}: invalid JSON: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise TbaKitError("config file must hold a JSON object")
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    flat = {k.replace("-", "_"): v for k, v in doc.items() if not isinstance(v, dict)}
    for name, sp in sub.choices.items():
        dests = {a.dest for a in sp._actions}
        nested = {k.replace("-", "_"): v for k, v in doc.get(name, {}).items()} if isinstance(doc.get(name), dict) else {}
        merged = {k: v for k, v in {**flat, **nested}.items() if k in dests and k != "config"}
        if merged:
            sp.set_defaults(**merged)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=os.environ.get("TBA_KIT_LOG", "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    json_errors = "--json-errors" in argv
    parser = build_parser()

    def fail(code, kind, msg):
        if json_errors:
            sys.stderr.write(json.dumps({"error": {"type": kind, "message": msg, "exit_code": code}}) + "\n")
        else:
            sys.stderr.write(f"tba-kit: {msg}\n")
        return code

    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        for name, default in GLOBAL_DEFAULTS.items():
            if not hasattr(args, name):
                setattr(args, name, default)
        if args.command is None:
            raise UsageError("a subcommand is required\n\n" + parser.format_help())
        return args.func(args)
    except UsageError as exc:
        return fail(EXIT_USAGE, "usage", str(exc))
    except (TbaKitError, ValueError, KeyError, OSError) as exc:
        msg = str(exc) if not isinstance(exc, KeyError) else f"missing field {exc.args[0]!r}"
        return fail(EXIT_DATA, type(exc).__name__, msg)


if __name__ == "__main__":
    sys.exit(main())
