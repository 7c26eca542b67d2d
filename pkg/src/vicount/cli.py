"""Command-line entry point.

Commands: simulate, train, gradcheck, eval-count, track, eval-track.
Exit codes: 0 success, 1 usage, 2 data error, 3 numerical degeneracy.
"""
from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from . import __version__
from .config import Config, ConfigError, load
from .dataset import DataError, load_clips, simulate_clips, write_clip
from .matching import SolverDegenerateError
from .pipeline import LearnedMatcher, MatchAllMatcher, OracleMatcher, count_clip, counting_report, track_clip
from .tracker import TrackSet, tracking_metrics
from .train import (
    CheckpointError,
    DegenerateLossError,
    Matcher,
    TrainingDivergenceError,
    grad_check,
    load_checkpoint,
    make_optimizer,
    save_checkpoint,
    tiny_config,
    tiny_instance,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST = "manifest.json"
MODEL_FIELDS = ("dim", "gnn_layers", "dustbin_layers", "dustbin_mode")


class UsageError(Exception):
    pass


class Run:
    """Output directory bookkeeping: the manifest is written before any output.

    Wall-clock timings go to a separate ``timings.json`` so every other file
    is a deterministic function of the command line and its inputs.
    """

    def __init__(self, out_dir: str, command: str, cfg: Config, args: argparse.Namespace, outputs: list[str]):
        self.out_dir = out_dir
        self.started = time.perf_counter()
        self.phases: dict[str, float] = {}
        try:
            os.makedirs(out_dir, exist_ok=True)
        except OSError as exc:
            raise DataError(f"{out_dir}: cannot create output directory ({exc})") from None
        manifest = {
            "command": command,
            "arguments": _argument_record(args),
            "config": cfg.to_dict(),
            "seed": cfg.seed,
            "versions": {
                "vicount": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": platform.python_version(),
            },
            "outputs": sorted(outputs),
            "timings_file": "timings.json",
        }
        self.write_json(MANIFEST, manifest, stamp=False)

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def write_json(self, name: str, obj: dict, stamp: bool = True) -> str:
        if stamp:
            obj = {**obj, "manifest": MANIFEST}
        path = self.path(name)
        try:
            with open(path, "w") as fh:
                json.dump(obj, fh, indent=1, sort_keys=True)
                fh.write("\n")
        except OSError as exc:
            raise DataError(f"{path}: cannot write ({exc})") from None
        return path

    def write_text(self, name: str, text: str) -> str:
        path = self.path(name)
        with open(path, "w") as fh:
            fh.write(text)
        return path

    def mark(self, phase: str) -> None:
        self.phases[phase] = time.perf_counter() - self.started

    def finish(self) -> None:
        self.mark("total")
        self.write_json("timings.json", {"seconds": self.phases})


def _argument_record(args) -> dict:
    # the manifest sits inside --out, so recording it would tie the bytes to the location
    skip = {"func", "out"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _config(args) -> Config:
    cfg = load(args.config) if args.config else Config()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.threads is not None:
        changes["threads"] = args.threads
    return cfg.replace(**changes) if changes else cfg


def _log(args, record: dict) -> None:
    if args.verbose:
        print(json.dumps(record, sort_keys=True), file=sys.stderr)


def _model_for(checkpoint: str, cfg: Config) -> Matcher:
    model, _ = load_checkpoint(checkpoint)
    if model.cfg.dim != cfg.dim:
        raise DataError(f"checkpoint descriptor dimension {model.cfg.dim} does not match the data ({cfg.dim})")
    model.cfg = cfg.replace(**{f: getattr(model.cfg, f) for f in MODEL_FIELDS})
    return model


def _matcher(args, cfg: Config):
    if args.oracle:
        return OracleMatcher(), cfg
    if getattr(args, "ablation", None) == "match-all":
        return MatchAllMatcher(), cfg
    if not args.checkpoint:
        raise UsageError("a --checkpoint is required unless --oracle or --ablation is given")
    model = _model_for(args.checkpoint, cfg)
    return LearnedMatcher(model), model.cfg


def _map(cfg: Config, fn, items):
    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def cmd_simulate(args) -> int:
    cfg = _config(args)
    n = args.clips if args.clips is not None else cfg.n_clips
    names = [f"clip_{k:03d}" for k in range(n)]
    run = Run(args.out, "simulate", cfg, args, [f"{nm}/" for nm in names])
    scenes = simulate_clips(cfg, n)
    for name, scene in zip(names, scenes):
        write_clip(run.path(name), scene, cfg, features=not args.no_features, manifest=f"../{MANIFEST}")
        _log(args, {"clip": name, "pedestrians": len(scene.pedestrians), "seed": scene.seed})
    run.mark("simulate")
    run.finish()
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    names, scenes, cfg = load_clips(args.data, cfg)
    if args.resume:
        model, opt = load_checkpoint(args.resume)
        if any(getattr(model.cfg, f) != getattr(cfg, f) for f in MODEL_FIELDS):
            raise DataError("resumed checkpoint has a different model shape than the config")
        model.cfg = cfg
        # rebuild the optimizer around the loaded tensors, keeping its moments
        state = opt.state_dict()
        opt = make_optimizer(model, cfg)
        opt.load_state_dict(state)
    else:
        model = Matcher.init(cfg)
        opt = make_optimizer(model, cfg)
    steps = args.steps if args.steps is not None else cfg.train_steps
    if steps < opt.step_count:
        raise UsageError(f"checkpoint is already at step {opt.step_count} > --steps {steps}")
    run = Run(args.out, "train", cfg, args, ["checkpoint.json", "train_log.jsonl"])
    log_lines = []

    def log(result):
        log_lines.append(result.to_json())
        _log(args, json.loads(log_lines[-1]))

    try:
        train(model, scenes, cfg, steps - opt.step_count, opt, log)
    except TrainingDivergenceError as exc:
        run.write_json("divergence.json", exc.dump)
        raise
    finally:
        run.write_text("train_log.jsonl", "".join(line + "\n" for line in log_lines))
    save_checkpoint(run.path("checkpoint.json"), model, opt)
    run.mark("train")
    run.finish()
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    tcfg = tiny_config(seed=cfg.seed)
    results = {}
    worst = 0.0
    for seed in seeds:
        start = time.perf_counter()
        errors = grad_check(Matcher.init(tcfg, seed), tiny_instance(seed), args.eps)
        worst_seed = max(errors.values())
        worst = max(worst, worst_seed)
        results[str(seed)] = {"max_relative_error": worst_seed, "per_tensor": errors,
                              "seconds": time.perf_counter() - start}
        _log(args, {"seed": seed, "max_relative_error": worst_seed})
    passed = bool(worst < args.tolerance)
    report = {"max_relative_error": worst, "tolerance": args.tolerance, "passed": passed, "seeds": results}
    if args.out:
        run = Run(args.out, "gradcheck", cfg, args, ["gradcheck.json"])
        run.write_json("gradcheck.json", {k: v for k, v in report.items() if k != "seeds"} | {
            "seeds": {s: {k: v for k, v in r.items() if k != "seconds"} for s, r in results.items()}})
        run.finish()
    print(json.dumps({"max_relative_error": worst, "passed": passed}))
    return EXIT_OK if passed else EXIT_NUMERIC


def cmd_eval_count(args) -> int:
    cfg = _config(args)
    names, scenes, cfg = load_clips(args.data, cfg)
    matcher, cfg = _matcher(args, cfg)
    interval = args.interval or cfg.eval_interval
    run = Run(args.out, "eval-count", cfg, args, ["report.csv", "report.json", "pairs.jsonl"])
    results = _map(cfg, lambda item: count_clip(item[1], cfg, matcher, interval, item[0]), list(zip(names, scenes)))
    pair_lines = []
    for r in results:
        for p in r.pairs:
            rec = {"clip": r.name, "t": p.t, "delta": p.delta, "inflow": p.inflow, "inflow_hat": p.inflow_hat,
                   "outflow": p.outflow, "outflow_hat": p.outflow_hat}
            if p.diagnostics:
                rec["sinkhorn"] = p.diagnostics
                _log(args, {"clip": r.name, "t": p.t, **p.diagnostics})
            pair_lines.append(json.dumps(rec, sort_keys=True) + "\n")
    report = counting_report(results)
    run.write_text("report.csv", report.to_csv())
    run.write_json("report.json", {**report.summary(), "matcher": matcher.name, "interval": interval})
    run.write_text("pairs.jsonl", "".join(pair_lines))
    run.mark("eval")
    run.finish()
    print(json.dumps({k: v for k, v in report.summary().items() if k != "definitions"}, sort_keys=True))
    return EXIT_OK


def cmd_track(args) -> int:
    cfg = _config(args)
    names, scenes, cfg = load_clips(args.data, cfg)
    matcher, cfg = _matcher(args, cfg)
    run = Run(args.out, "track", cfg, args, ["tracks.jsonl", "gt_tracks.jsonl"])
    interval = args.interval or cfg.eval_interval
    tracked = _map(cfg, lambda k: track_clip(scenes[k], cfg, matcher, interval, k * scenes[k].n_ticks),
                   range(len(scenes)))
    pred_all, gt_all = TrackSet(), TrackSet()
    for pred, gt in tracked:
        base = pred_all.next_id
        for ident, points in pred.tracks.items():
            for frame, point in points:
                pred_all.add(frame, base + ident, point)
        for ident, points in gt.tracks.items():
            for frame, point in points:
                gt_all.add(frame, ident, point)
    run.write_text("tracks.jsonl", pred_all.to_jsonl())
    run.write_text("gt_tracks.jsonl", gt_all.to_jsonl())
    run.mark("track")
    run.finish()
    return EXIT_OK


def _read_tracks(path) -> TrackSet:
    try:
        with open(path) as fh:
            return TrackSet.from_jsonl(fh.read())
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: unreadable track file ({exc})") from None


def cmd_eval_track(args) -> int:
    cfg = _config(args)
    pred, gt = _read_tracks(args.pred), _read_tracks(args.gt)
    pf, gf = pred.frames(), gt.frames()
    if pf and gf and (pf[0] < gf[0] or pf[-1] > gf[-1]):
        raise DataError(f"predicted frames {pf[0]}..{pf[-1]} fall outside ground-truth frames {gf[0]}..{gf[-1]}")
    scores = tracking_metrics(pred, gt, cfg.track_gate).to_dict()
    if args.out:
        run = Run(args.out, "eval-track", cfg, args, ["track_metrics.json"])
        run.write_json("track_metrics.json", scores)
        run.finish()
    print(json.dumps(scores, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file ([vicount] section)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, help="worker threads; 1 gives bitwise reproducibility")
    common.add_argument("--verbose", action="store_true", help="JSON-line diagnostics on stderr")

    parser = argparse.ArgumentParser(prog="vicount", description="Video individual counting on synthetic crowds.")
    parser.add_argument("--version", action="version", version=f"vicount {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate and render synthetic clips")
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int, help="number of clips (default: config n_clips)")
    p.add_argument("--no-features", action="store_true", help="skip the per-frame feature arrays")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", parents=[common], help="train the matcher on simulated clips")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, help="total optimizer steps (default: config train_steps)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full pipeline")
    p.add_argument("--seeds", help="comma-separated instance seeds (default: config seed)")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    for name, func, helptext in (("eval-count", cmd_eval_count, "video counting metrics"),
                                 ("track", cmd_track, "descriptor-voting tracking")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--checkpoint")
        p.add_argument("--oracle", action="store_true", help="use ground-truth matches instead of the model")
        p.add_argument("--interval", type=int, help="frame sampling interval (default: config eval_interval)")
        if name == "eval-count":
            p.add_argument("--ablation", choices=["match-all"], help="declare every descriptor matched")
        p.set_defaults(func=func)

    p = sub.add_parser("eval-track", parents=[common], help="MOTA/IDF1 of a track file against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_track)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        cfg_threads = args.threads if args.threads is not None else (load(args.config).threads if args.config else 1)
        with threadpool_limits(limits=cfg_threads):
            return args.func(args)
    except UsageError as exc:
        print(f"vicount: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"vicount: invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"vicount: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SolverDegenerateError, TrainingDivergenceError, DegenerateLossError) as exc:
        print(f"vicount: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
