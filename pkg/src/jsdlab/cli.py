"""Command line entry point: ``jsdlab {train,distill,sweep,analyze,sample}``.

Every subcommand writes into one output directory and finishes by writing
``manifest.json`` listing exactly the files it produced. An existing
non-empty output directory is refused unless ``--force`` is given.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import correlation_report, mode_coverage
from .config import ConfigError, ExperimentConfig
from .diffusion import ScoreModel, TrainConfig, ancestral_sample, train
from .distill import DistillConfig, TrajectoryRecord, run_seeds
from .divergences import SWEEP_COLUMNS, divergence_sweep
from .nn import CheckpointError, NonFiniteError
from .schedule import linear_schedule
from .toy_data import GaussianMixture, nearest_mode, sample, write_csv

log = logging.getLogger("jsdlab")

OUT_ENV = "JSDLAB_OUT"
MANIFEST = "manifest.json"


class CLIError(RuntimeError):
    pass


def fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (int, float, np.integer, np.floating)) else v for v in row])


class Run:
    """Output directory bookkeeping for one subcommand invocation."""

    def __init__(self, command, out, config: ExperimentConfig | None, force=False):
        self.command = command
        self.out = Path(out)
        self.config = config
        self.files: list[str] = []
        self.started = time.time()
        if self.out.exists() and any(self.out.iterdir()):
            if not force:
                raise CLIError(f"output directory {self.out} is not empty; pass --force to overwrite")
            self._clear_previous()
        self.out.mkdir(parents=True, exist_ok=True)

    def _clear_previous(self):
        mf = self.out / MANIFEST
        if not mf.exists():
            raise CLIError(f"{self.out} has files but no {MANIFEST}; refusing to overwrite it")
        for rel in json.loads(mf.read_text())["files"]:
            (self.out / rel).unlink(missing_ok=True)
        mf.unlink()

    def path(self, rel) -> Path:
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(str(rel))
        return p

    def finish(self, extra=None):
        manifest = {
            "command": self.command,
            "config_hash": self.config.digest() if self.config else None,
            "files": sorted(self.files),
            "started": self.started,
            "finished": time.time(),
            "software_version": __version__,
            **(extra or {}),
        }
        (self.out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        log.info("%s: wrote %d files to %s", self.command, len(self.files), self.out)
        return manifest


def _out_dir(args, config, command):
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUT_ENV) or (config.output.dir if config else "runs")
    return Path(root) / command


def _load_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        return ExperimentConfig.load(args.config)
    return ExperimentConfig.from_dict({})


def _schedule(cfg):
    s = cfg.schedule
    return linear_schedule(s.T, s.beta_start, s.beta_end)


def _parse_start(text):
    try:
        x, y = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError("--start", f"expected 'x,y', got {text!r}") from exc
    return [x, y]


# -- train --------------------------------------------------------------------


def cmd_train(args):
    cfg = _load_config(args)
    if args.epochs is not None:
        cfg.training.epochs = args.epochs
        cfg.validate()
    sched = _schedule(cfg)
    m = cfg.model
    if args.resume:
        model, meta = ScoreModel.load(args.resume)
        _check_schedule(meta, cfg, args.resume)
    else:
        model = ScoreModel.create(sched.T, m.hidden, m.n_hidden, m.time_dim, m.class_dim, seed=m.seed)
    run = Run("train", _out_dir(args, cfg, "train"), cfg, args.force)
    mixture = GaussianMixture(std=cfg.data.std)
    points, labels = sample(mixture, cfg.data.n_points, np.random.default_rng(cfg.data.seed))
    tc = TrainConfig(cfg.training.epochs, cfg.training.batch_size, cfg.training.lr, m.null_dropout,
                     cfg.training.seed)
    every = max(1, tc.epochs // 20)

    def progress(epoch, loss):
        if epoch % every == 0 or epoch == tc.epochs - 1:
            log.info("epoch %d/%d loss %.5f", epoch + 1, tc.epochs, loss)

    try:
        result = train(model, points, labels, sched, tc,
                       diagnostic_path=run.out / "diverged.npz", progress=progress)
    except NonFiniteError:
        run.path("diverged.npz")
        run.finish({"status": "diverged"})
        raise
    header = {
        "train_config": vars(tc),
        "schedule": sched.params(),
        "model_config": vars(m),
        "data_config": vars(cfg.data),
    }
    model.save(run.path("model.npz"), header)
    write_rows(run.path("loss.csv"), ["epoch", "mean_loss"],
               [(i + 1, v) for i, v in enumerate(result.losses)])
    write_csv(run.path("dataset.csv"), points, labels)
    gen = ancestral_sample(model, sched, cfg.training.samples, None,
                           np.random.default_rng(cfg.training.seed + 1))
    if len(gen):
        modes, _ = nearest_mode(mixture, gen)
    else:
        modes = np.zeros(0, dtype=int)
    write_rows(run.path("samples.csv"), ["x", "y", "nearest_mode"],
               [(x, y, k) for (x, y), k in zip(gen, modes)])
    cfg.dump(run.path("config.yaml"))
    if cfg.output.plots:
        from .plotting import plot_loss, plot_samples

        plot_samples(gen, points, run.path("samples.svg"), mixture)
        plot_loss(result.losses, run.path("loss.svg"))
    run.finish()
    return run


def _check_schedule(meta, cfg, path):
    want = {"T": cfg.schedule.T, "beta_start": cfg.schedule.beta_start, "beta_end": cfg.schedule.beta_end}
    have = meta.get("schedule")
    if have != want:
        raise CLIError(f"{path}: checkpoint schedule {have} does not match config schedule {want}")


# -- distill ------------------------------------------------------------------


TRAJ_COLUMNS = [
    "method", "start_x", "start_y", "seed", "label", "step", "t",
    "theta_before_x", "theta_before_y", "theta_after_x", "theta_after_y",
    "eps_main_x", "eps_main_y", "control_variate_x", "control_variate_y",
    "weight", "ratio", "gradient_x", "gradient_y",
]


def _traj_rows(rec: TrajectoryRecord):
    for k in range(len(rec)):
        yield (
            rec.method, float(rec.start[0]), float(rec.start[1]), rec.seed, rec.label, k, int(rec.t[k]),
            *rec.theta_before[k], *rec.theta_after[k], *rec.eps_main[k], *rec.control_variate[k],
            float(rec.weight[k]), float(rec.ratio[k]), *rec.gradient[k],
        )


def cmd_distill(args):
    cfg = _load_config(args)
    di = cfg.distillation
    if args.seeds is not None:
        di.seeds = args.seeds
    if args.method is not None:
        di.methods = ["sds", "jsd"] if args.method == "both" else [args.method]
    if args.start:
        di.starts = [_parse_start(s) for s in args.start]
    if args.scale is not None:
        di.guidance_scale = args.scale
    if args.workers is not None:
        di.workers = args.workers
    cfg.validate()
    sched = _schedule(cfg)
    model, meta = ScoreModel.load(args.checkpoint)
    _check_schedule(meta, cfg, args.checkpoint)
    run = Run("distill", _out_dir(args, cfg, "distill"), cfg, args.force)
    seeds = range(di.seed_offset, di.seed_offset + di.seeds)
    records = []
    for start in di.starts:
        for method in di.methods:
            dc = DistillConfig(
                method=method, steps=di.steps, lr=di.lr, guidance_scale=di.guidance_scale,
                t_min=di.t_min, t_max=di.t_max, weighting=cfg.schedule.weighting,
                ratio_weight=di.ratio_weight, inversion_steps=di.inversion_steps,
                guided_inversion=di.guided_inversion, label=di.label,
            )
            t0 = time.time()
            recs = run_seeds(dc, model, sched, start, seeds, workers=di.workers)
            log.info("%s from %s: %d runs in %.1fs", method, start, len(recs), time.time() - t0)
            records += recs
    for rec in records:
        run.path(Path("trajectories") / rec.filename()).write_text(rec.to_jsonl())
    write_rows(run.path("trajectories.csv"), TRAJ_COLUMNS, (r for rec in records for r in _traj_rows(rec)))
    write_rows(
        run.path("terminals.csv"),
        ["method", "start_x", "start_y", "seed", "x", "y", "mode", "distance"],
        [(r.method, float(r.start[0]), float(r.start[1]), r.seed, *r.terminal, r.terminal_mode,
          r.terminal_distance) for r in records],
    )
    cfg.dump(run.path("config.yaml"))
    run.finish({"checkpoint": str(args.checkpoint)})
    return run


# -- sweep --------------------------------------------------------------------


def cmd_sweep(args):
    cfg = _load_config(args)
    run = Run("sweep", _out_dir(args, cfg, "sweep"), cfg, args.force)
    rows = divergence_sweep(args.points)
    write_rows(run.path("sweep.csv"), SWEEP_COLUMNS, rows)
    if cfg.output.plots and not args.no_plot:
        from .plotting import plot_sweep

        plot_sweep(rows, run.path("sweep.svg"))
    run.finish({"approx_column": "E_q[-ln D*] with D* = p/(p+q)"})
    return run


# -- analyze ------------------------------------------------------------------


def load_corpus(directory):
    directory = Path(directory)
    files = sorted((directory / "trajectories").glob("*.jsonl")) or sorted(directory.glob("*.jsonl"))
    if not files:
        raise CLIError(f"no trajectory files under {directory}")
    return [TrajectoryRecord.from_jsonl(f.read_text()) for f in files]


def cmd_analyze(args):
    cfg = _load_config(args)
    records = load_corpus(args.trajectories)
    out = Path(args.out) if args.out else Path(args.trajectories) / "analysis"
    run = Run("analyze", out, cfg, args.force)
    records.sort(key=lambda r: (r.method, r.start, r.seed))
    report = correlation_report(records)
    write_rows(run.path("correlation.csv"),
               ["method", "start_x", "start_y", "seed", "pearson_pooled", "pearson_x", "pearson_y"],
               [(r.method, r.start[0], r.start[1], r.seed, r.pooled, r.x, r.y) for r in report.runs])
    summary = [(m, mean, std, n) for m, (mean, std, n) in report.summary.items()]
    if {"sds", "jsd"} <= set(report.summary):
        summary.append(("jsd_minus_sds", report.mean("jsd") - report.mean("sds"), "", ""))
    else:
        summary.append(("jsd_minus_sds", "unavailable", "", ""))
    write_rows(run.path("correlation_summary.csv"), ["method", "mean", "std", "runs"], summary)

    groups = defaultdict(list)
    for r in records:
        groups[(r.method, r.start)].append(r)
    cov_rows = []
    for (method, start), recs in sorted(groups.items()):
        cov = mode_coverage(recs)
        cov_rows.append((method, start[0], start[1], len(recs), cov.distinct_mode_count, cov.entropy,
                         *cov.histogram))
    write_rows(run.path("mode_coverage.csv"),
               ["method", "start_x", "start_y", "runs", "distinct_modes", "entropy"]
               + [f"mode_{k}" for k in range(8)], cov_rows)
    if cfg.output.plots:
        from .plotting import plot_noise_scatter, plot_trajectories

        by_method = defaultdict(list)
        for r in records:
            by_method[r.method].append(r)
        for method, recs in sorted(by_method.items()):
            plot_noise_scatter(recs[:10], run.path(f"scatter_{method}.svg"), title=method.upper())
        for (method, start), recs in sorted(groups.items()):
            name = f"trajectories_{method}_start_{start[0]:g}_{start[1]:g}.svg"
            plot_trajectories(recs, run.path(name), title=f"{method.upper()} from {start}")
    run.finish({"source": str(args.trajectories)})
    return run


# -- sample -------------------------------------------------------------------


def cmd_sample(args):
    cfg = _load_config(args)
    model, meta = ScoreModel.load(args.checkpoint)
    _check_schedule(meta, cfg, args.checkpoint)
    sched = _schedule(cfg)
    run = Run("sample", _out_dir(args, cfg, "sample"), cfg, args.force)
    mixture = GaussianMixture(std=cfg.data.std)
    gen = ancestral_sample(model, sched, args.n, args.label, np.random.default_rng(args.seed), args.scale)
    modes = nearest_mode(mixture, gen)[0] if len(gen) else []
    write_rows(run.path("samples.csv"), ["x", "y", "nearest_mode"], [(x, y, k) for (x, y), k in zip(gen, modes)])
    if cfg.output.plots and len(gen):
        from .plotting import plot_samples

        truth, _ = sample(mixture, 2000, np.random.default_rng(cfg.data.seed))
        plot_samples(gen, truth, run.path("samples.svg"), mixture)
    run.finish({"checkpoint": str(args.checkpoint)})
    return run


# -- parser -------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="jsdlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", metavar="PATH", help="experiment YAML (defaults if omitted)")
        sp.add_argument("--out", metavar="DIR", help=f"output directory (default ${OUT_ENV}/<command>)")
        sp.add_argument("--force", action="store_true", help="overwrite a previous run in --out")

    sp = sub.add_parser("train", help="train the toy diffusion model")
    common(sp)
    sp.add_argument("--epochs", type=int, help="override training.epochs")
    sp.add_argument("--resume", metavar="PATH", help="start from an existing checkpoint")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("distill", help="run SDS / JSD particle distillation over a seed grid")
    common(sp)
    sp.add_argument("--checkpoint", required=True, metavar="PATH")
    sp.add_argument("--seeds", type=int, metavar="N")
    sp.add_argument("--method", choices=["sds", "jsd", "both"])
    sp.add_argument("--start", action="append", metavar='"x,y"', help="repeatable")
    sp.add_argument("--scale", type=float, metavar="S", help="guidance scale")
    sp.add_argument("--workers", type=int, metavar="N")
    sp.set_defaults(func=cmd_distill)

    sp = sub.add_parser("sweep", help="divergence sweep on p=(a,1-a), q=(1-a,a)")
    common(sp)
    sp.add_argument("--points", type=int, default=100)
    sp.add_argument("--no-plot", action="store_true")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("analyze", help="correlation and mode-coverage reports for a trajectory corpus")
    common(sp)
    sp.add_argument("trajectories", metavar="DIR", help="output directory of `jsdlab distill`")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("sample", help="ancestral samples from a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True, metavar="PATH")
    sp.add_argument("--n", type=int, default=2000)
    sp.add_argument("--label", type=int, default=None, help="class index; unconditional if omitted")
    sp.add_argument("--scale", type=float, default=None, help="guidance scale (needs --label)")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_sample)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except (CLIError, ConfigError, CheckpointError, NonFiniteError) as exc:
        print(f"jsdlab {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
