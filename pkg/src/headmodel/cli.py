"""Command-line pipeline: phantom -> train -> segment -> fuse -> simulate -> evaluate.

All settings come from one INI config file (optional) plus flag overrides;
``--set section.key=value`` overrides any single setting. Every stage reads
and writes files under the output directory, so stages can be re-run on
their own.

Exit codes: 0 success, 1 configuration error, 2 stage failure.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tissues
from .coil import build_figure_eight, read_coil_file, vector_potential_grid, write_coil_file
from .dosimetry import SimulationConfig, corrupt_labels, default_pose, roi_mask, simulate
from .forknet import ForkNetConfig, Network, argmax_labels, build_forknet, segment_stack, train
from .fusion import ViewTriple, fuse_views
from .metrics import mae, mae_hotspot, segmentation_report
from .volume import AXIS_INDEX, LabelVolume, PhantomConfig, ScalarVolume, generate_phantom, load_volume, save_volume

log = logging.getLogger("headmodel")

OUTPUT_ENV = "HEADMODEL_OUTPUT"
DIRECTIONS = ("axial", "sagittal", "coronal")
VIEW_NAMES = {"axial": "R_alpha", "sagittal": "R_beta", "coronal": "R_gamma"}

DEFAULTS = {
    "run": {"seed": "0", "jobs": "0"},
    "paths": {"output": "headmodel-run", "coil": ""},
    "phantom": {"count": "20", "dims": "64", "noise": "0.02", "subject_seed": "1000"},
    "network": {"depth": "4"},
    "train": {"epochs": "12", "batch_size": "2", "lr": "0.001", "split": "0.9",
              "directions": "axial,sagittal,coronal"},
    "segment": {"background_threshold": "0.5", "batch_size": "8"},
    "fusion": {"window": "3", "fuzzy": "neighborhood", "plane": "false"},
    "solver": {"tol": "1e-6", "max_iter": "0"},
    "coil": {"turns": "5", "segments": "64", "current": "1.0", "frequency": "10000",
             "single_loop": "false", "distance_mm": "10"},
    "metrics": {"roi_radius_mm": "40", "corruption": "0,5,20", "hausdorff": "true", "normalize": "true"},
}


TYPES = {
    "run.seed": int, "run.jobs": int,
    "phantom.count": int, "phantom.dims": int, "phantom.noise": float, "phantom.subject_seed": int,
    "network.depth": int,
    "train.epochs": int, "train.batch_size": int, "train.lr": float, "train.split": float,
    "train.directions": list,
    "segment.background_threshold": float, "segment.batch_size": int,
    "fusion.window": int, "fusion.plane": bool,
    "solver.tol": float, "solver.max_iter": int,
    "coil.turns": int, "coil.segments": int, "coil.current": float, "coil.frequency": float,
    "coil.single_loop": bool, "coil.distance_mm": float,
    "metrics.roi_radius_mm": float, "metrics.corruption": list, "metrics.hausdorff": bool,
    "metrics.normalize": bool,
}


class ConfigError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class PipelineConfig:
    """Typed view of the merged configuration."""

    parser: configparser.ConfigParser
    output: Path

    def get(self, section, key, kind=str):
        raw = self.parser.get(section, key)
        try:
            if kind is bool:
                return self.parser.getboolean(section, key)
            if kind is list:
                return [s.strip() for s in raw.split(",") if s.strip()]
            return kind(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key}: cannot read {raw!r} as {kind.__name__}") from None

    @property
    def seed(self):
        return self.get("run", "seed", int)

    def path(self, *parts):
        return self.output.joinpath(*parts)

    def network(self):
        cfg = ForkNetConfig(degree=tissues.NUM_TISSUES, depth=self.get("network", "depth", int),
                            extent=self.get("phantom", "dims", int), seed=self.seed)
        try:
            return cfg.validate()
        except ValueError as exc:
            raise ConfigError(f"network: {exc}") from None

    def simulation(self):
        max_iter = self.get("solver", "max_iter", int)
        return SimulationConfig(
            turns=self.get("coil", "turns", int), segments=self.get("coil", "segments", int),
            current=self.get("coil", "current", float), frequency=self.get("coil", "frequency", float),
            single_loop=self.get("coil", "single_loop", bool), tol=self.get("solver", "tol", float),
            max_iter=max_iter or None,
        )


def load_config(path=None, overrides=(), output=None) -> PipelineConfig:
    """Merge defaults, an optional INI file and ``section.key=value`` overrides.

    The output directory is taken from ``output``, else the environment
    variable ``HEADMODEL_OUTPUT``, else ``paths.output``.
    """
    parser = configparser.ConfigParser()
    parser.read_dict(DEFAULTS)
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file {path}: {exc}") from None
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, option = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        if section not in DEFAULTS or option not in DEFAULTS[section]:
            raise ConfigError(f"unknown setting {key.strip()!r}")
        parser.set(section, option, value.strip())
    for section in parser.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        unknown = set(parser.options(section)) - set(DEFAULTS[section])
        if unknown:
            raise ConfigError(f"unknown setting(s) in [{section}]: {sorted(unknown)}")
    out = output or os.environ.get(OUTPUT_ENV) or parser.get("paths", "output")
    cfg = PipelineConfig(parser, Path(out))
    # typecheck everything up front so bad values fail as config errors
    for section, keys in DEFAULTS.items():
        for key in keys:
            cfg.get(section, key, TYPES.get(f"{section}.{key}", str))
    if cfg.get("fusion", "fuzzy") not in ("neighborhood", "axial-priority"):
        raise ConfigError("fusion.fuzzy must be neighborhood or axial-priority")
    bad = set(cfg.get("train", "directions", list)) - set(DIRECTIONS)
    if bad:
        raise ConfigError(f"train.directions: unknown direction(s) {sorted(bad)}")
    for rate in cfg.get("metrics", "corruption", list):
        if not _is_float(rate) or not 0 <= float(rate) <= 100:
            raise ConfigError(f"metrics.corruption: bad rate {rate!r}")
    cfg.network()
    return cfg


def _is_float(s):
    """True when ``s`` parses as a float."""
    try:
        float(s)
        return True
    except ValueError:
        return False


# -- stages ----------------------------------------------------------------------
def _phantom_files(cfg, name):
    return cfg.path("phantoms", f"{name}_mri.raw"), cfg.path("phantoms", f"{name}_labels.raw")


def _load(path, kind, stage):
    path = Path(path)
    if not path.is_file():
        raise StageError(stage, f"missing input {path}")
    vol = load_volume(path)
    if vol.kind != kind:
        raise StageError(stage, f"{path} holds a {vol.kind} volume, expected {kind}")
    return vol


def coil_pose(cfg):
    explicit = cfg.get("paths", "coil")
    path = Path(explicit) if explicit else cfg.path("phantoms", "coil.pose")
    if not path.is_file():
        raise StageError("simulate", f"missing coil pose file {path}")
    return read_coil_file(path)[0]


def stage_phantom(cfg: PipelineConfig):
    """Training phantoms ``train_###``, the held-out ``subject`` and the coil pose."""
    n = cfg.get("phantom", "dims", int)
    pcfg = PhantomConfig(noise=cfg.get("phantom", "noise", float))
    out = cfg.path("phantoms")
    out.mkdir(parents=True, exist_ok=True)
    names = [(f"train_{i:03d}", cfg.seed + i) for i in range(cfg.get("phantom", "count", int))]
    names.append(("subject", cfg.get("phantom", "subject_seed", int)))
    for name, seed in names:
        mri, labels = generate_phantom(seed, (n, n, n), pcfg)
        mri_path, lab_path = _phantom_files(cfg, name)
        save_volume(mri_path, mri)
        save_volume(lab_path, labels)
    pose = default_pose((n, n, n), pcfg.spacing, cfg.get("coil", "distance_mm", float))
    write_coil_file(out / "coil.pose", pose, **cfg.simulation().coil_params())
    log.info("[phantom] wrote %d volumes to %s", len(names), out)


def _stack(data, direction):
    return np.moveaxis(np.asarray(data), AXIS_INDEX[direction], 0)


def stage_train(cfg: PipelineConfig, directions=None):
    directions = directions or cfg.get("train", "directions", list)
    count = cfg.get("phantom", "count", int)
    if count < 1:
        raise StageError("train", "no training phantoms configured")
    volumes = []
    for i in range(count):
        mri_path, lab_path = _phantom_files(cfg, f"train_{i:03d}")
        volumes.append((_load(mri_path, "scalar", "train"), _load(lab_path, "label", "train")))
    ids = np.arange(1, tissues.NUM_TISSUES + 1, dtype=np.uint8)[None, :, None, None]
    cfg.path("checkpoints").mkdir(parents=True, exist_ok=True)
    for direction in directions:
        images = np.concatenate([_stack(m.data, direction) for m, _ in volumes])
        masks = np.concatenate([(_stack(l.data, direction)[:, None] == ids) for _, l in volumes])
        net = build_forknet(cfg.network())
        lines = []

        def progress(epoch, result, lines=lines, direction=direction):
            val = f"{result.val_loss[-1]:.8f}" if result.val_loss else "nan"
            lines.append(f"{epoch + 1} {result.loss[-1]:.8f} {val}")
            log.info("[train] %s epoch %d loss %.5f val %s", direction, epoch + 1, result.loss[-1], val)

        result = train(net, images, masks, epochs=cfg.get("train", "epochs", int),
                       batch_size=cfg.get("train", "batch_size", int), lr=cfg.get("train", "lr", float),
                       seed=cfg.seed, split=cfg.get("train", "split", float), progress=progress)
        net.save(cfg.path("checkpoints", f"{direction}.ckpt"))
        cfg.path("checkpoints", f"{direction}.log").write_text(
            "# epoch loss val_loss\n" + "\n".join(lines) + "\n")
        log.info("[train] %s done in %.1f s", direction, result.seconds)


def stage_segment(cfg: PipelineConfig, subject=None, directions=None):
    """Segment the subject MRI with every available (or requested) direction network."""
    subject = Path(subject) if subject else _phantom_files(cfg, "subject")[0]
    mri = _load(subject, "scalar", "segment")
    if directions is None:
        directions = [d for d in DIRECTIONS if cfg.path("checkpoints", f"{d}.ckpt").is_file()]
        if not directions:
            raise StageError("segment", f"no checkpoints in {cfg.path('checkpoints')}")
    thr = cfg.get("segment", "background_threshold", float)
    cfg.path("segment").mkdir(parents=True, exist_ok=True)
    for direction in directions:
        ckpt = cfg.path("checkpoints", f"{direction}.ckpt")
        if not ckpt.is_file():
            raise StageError("segment", f"missing checkpoint {ckpt}")
        net = Network.load(ckpt)
        stack = _stack(mri.data, direction)
        if stack.shape[1:] != (net.config.extent,) * 2:
            raise StageError("segment", f"slice size {stack.shape[1:]} does not match the "
                                        f"network input {net.config.extent}")
        maps = segment_stack(net, stack, cfg.get("segment", "batch_size", int))
        labels = np.moveaxis(argmax_labels(np.moveaxis(maps, 1, 0), thr), 0, AXIS_INDEX[direction])
        save_volume(cfg.path("segment", f"{VIEW_NAMES[direction]}.raw"), LabelVolume(labels, mri.spacing))
        log.info("[segment] %s -> %s", direction, VIEW_NAMES[direction])


def stage_fuse(cfg: PipelineConfig):
    views = []
    for direction in DIRECTIONS:
        path = cfg.path("segment", f"{VIEW_NAMES[direction]}.raw")
        if not path.is_file():
            raise StageError("fuse", f"missing view: {VIEW_NAMES[direction]} ({direction}) at {path}")
        views.append(_load(path, "label", "fuse"))
    try:
        triple = ViewTriple(*views)
    except ValueError as exc:
        raise StageError("fuse", str(exc)) from None
    fused, stats = fuse_views(triple, window=cfg.get("fusion", "window", int), fuzzy=cfg.get("fusion", "fuzzy"),
                              plane=cfg.get("fusion", "plane", bool), head_mask=True)
    out = cfg.path("fuse")
    out.mkdir(parents=True, exist_ok=True)
    save_volume(out / "R_psi.raw", fused)
    (out / "fusion_stats.txt").write_text(stats.report())
    (out / "fusion_stats.kv").write_text("".join(f"{k}={v}\n" for k, v in stats.as_dict().items()))
    log.info("[fuse] all three %.3f %%, two %.3f %%, fuzzy %.3f %%",
             stats.pct_all_three, stats.pct_two, stats.pct_fuzzy)
    return stats


def stage_simulate(cfg: PipelineConfig, labels=None, out=None):
    """Induced |E| for a label volume (default: the fused head model)."""
    labels = Path(labels) if labels else cfg.path("fuse", "R_psi.raw")
    out = Path(out) if out else cfg.path("simulate", "E_psi.raw")
    vol = _load(labels, "label", "simulate")
    mag, info = simulate(vol, coil_pose(cfg), cfg.simulation())
    out.parent.mkdir(parents=True, exist_ok=True)
    save_volume(out, ScalarVolume(mag, vol.spacing))
    out.with_suffix(".solver.log").write_text(info.log_text())
    log.info("[simulate] %s: %d CG iterations, %.1f s", labels.name, info.iterations, info.seconds)
    return mag


def stage_evaluate(cfg: PipelineConfig, truth=None):
    """Segmentation metrics of every view and the fused model, plus field errors."""
    truth = Path(truth) if truth else _phantom_files(cfg, "subject")[1]
    ref = _load(truth, "label", "evaluate")
    models = {}
    for name in VIEW_NAMES.values():
        p = cfg.path("segment", f"{name}.raw")
        if p.is_file():
            models[name] = _load(p, "label", "evaluate")
    psi_path = cfg.path("fuse", "R_psi.raw")
    models["R_psi"] = _load(psi_path, "label", "evaluate")
    e_psi = _load(cfg.path("simulate", "E_psi.raw"), "scalar", "evaluate")

    pose = coil_pose(cfg)
    sim = cfg.simulation()
    a0 = vector_potential_grid(build_figure_eight(pose, **sim.coil_params()), ref.dims, ref.spacing)
    e_ref, info = simulate(ref, pose, sim, a0)
    out = cfg.path("evaluate")
    out.mkdir(parents=True, exist_ok=True)
    save_volume(out / "E_ref.raw", ScalarVolume(e_ref, ref.spacing))
    (out / "E_ref.solver.log").write_text(info.log_text())

    roi = roi_mask(ref, pose, cfg.get("metrics", "roi_radius_mm", float))
    if not roi.any():
        raise StageError("evaluate", "empty region of interest; increase metrics.roi_radius_mm")
    # E_psi was stored as float32; compare against the stored precision of E_ref too
    e_ref32 = np.asarray(e_ref, dtype=np.float32)
    norm = cfg.get("metrics", "normalize", bool)
    report = None
    sections = []
    for name, vol in models.items():
        rep = segmentation_report(vol.data, ref.data, ref.spacing, subject=truth.stem, model=name)
        if not cfg.get("metrics", "hausdorff", bool):
            rep.hd, rep.hd_symmetric = {}, {}
        if name == "R_psi":
            rep.mae = mae(e_ref32, e_psi.data, roi, norm)
            rep.mae_hotspot = mae_hotspot(e_ref32, e_psi.data, roi, norm)
            rep.extra["mae.self"] = f"{mae(e_ref32, e_ref32, roi, norm):.6f}"
            rep.extra["roi_voxels"] = str(int(roi.sum()))
            report = rep
        sections.append(rep.table())

    rows = [f"{'labels':<22}{'MAE [%]':>10}{'MAE0.7 [%]':>12}",
            f"{'R_psi':<22}{report.mae:>10.3f}{report.mae_hotspot:>12.3f}",
            f"{'reference (self)':<22}{mae(e_ref32, e_ref32, roi, norm):>10.3f}"
            f"{mae_hotspot(e_ref32, e_ref32, roi, norm):>12.3f}"]
    for rate in cfg.get("metrics", "corruption", list):
        r = float(rate)
        if r == 0:
            continue
        noisy = LabelVolume(corrupt_labels(ref, r / 100.0, cfg.seed), ref.spacing)
        e_noisy, _ = simulate(noisy, pose, sim, a0)
        e_noisy = np.asarray(e_noisy, dtype=np.float32)
        m, mh = mae(e_ref32, e_noisy, roi, norm), mae_hotspot(e_ref32, e_noisy, roi, norm)
        report.extra[f"mae.corrupt_{rate}"] = f"{m:.6f}"
        report.extra[f"mae_0.7.corrupt_{rate}"] = f"{mh:.6f}"
        rows.append(f"{'truth, ' + rate + '% corrupted':<22}{m:>10.3f}{mh:>12.3f}")
    title = "field error vs reference (ROI: GM near the coil" + ("" if norm else ", raw |E|") + ")"
    text = "\n\n".join(sections) + f"\n\n{title}\n" + "\n".join(rows) + "\n"
    (out / "report.txt").write_text(text)
    (out / "report.kv").write_text(report.keyvalues() + "\n")
    log.info("[evaluate] MAE %.3f %%, MAE0.7 %.3f %%", report.mae, report.mae_hotspot)
    return report


STAGES = ("phantom", "train", "segment", "fuse", "simulate", "evaluate")


def run_stage(name, fn, *args, **kwargs):
    t0 = time.perf_counter()
    log.info("[%s] start", name)
    try:
        result = fn(*args, **kwargs)
    except (StageError, ConfigError):
        raise
    except Exception as exc:  # any failure inside a stage is reported against that stage
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
    log.info("[%s] finished in %.2f s", name, time.perf_counter() - t0)
    return result


def run_pipeline(cfg: PipelineConfig):
    t0 = time.perf_counter()
    run_stage("phantom", stage_phantom, cfg)
    run_stage("train", stage_train, cfg)
    run_stage("segment", stage_segment, cfg)
    run_stage("fuse", stage_fuse, cfg)
    run_stage("simulate", stage_simulate, cfg)
    report = run_stage("evaluate", stage_evaluate, cfg)
    log.info("[pipeline] finished in %.2f s", time.perf_counter() - t0)
    return report


# -- argument parsing ------------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors (exit 1), not stage failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: config error: {message}\n")


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--output", help=f"output directory (overrides ${OUTPUT_ENV} and paths.output)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration value (repeatable)")
    common.add_argument("--seed", type=int, help="global seed (run.seed)")
    common.add_argument("--jobs", type=int, help="cap on worker threads (run.jobs, 0 = all cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="headmodel", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("phantom", parents=[common], help="generate training phantoms and the test subject")
    p.add_argument("--count", type=int, help="number of training phantoms")
    p.add_argument("--dims", type=int, help="cube edge length in voxels")
    p = sub.add_parser("train", parents=[common], help="train one ForkNet per slicing direction")
    p.add_argument("--direction", choices=DIRECTIONS, action="append")
    p.add_argument("--epochs", type=int)
    p = sub.add_parser("segment", parents=[common], help="segment the subject MRI")
    p.add_argument("--subject", help="MRI volume (default: the phantom subject)")
    p.add_argument("--direction", choices=DIRECTIONS, action="append")
    p = sub.add_parser("fuse", parents=[common], help="fuse the three view label volumes")
    p.add_argument("--window", type=int)
    p.add_argument("--fuzzy", choices=("neighborhood", "axial-priority"))
    p = sub.add_parser("simulate", parents=[common], help="induced electric field of a label volume")
    p.add_argument("--labels", help="label volume (default: fused head model)")
    p.add_argument("--out", help="output |E| volume")
    p = sub.add_parser("evaluate", parents=[common], help="segmentation and field metrics")
    p.add_argument("--truth", help="reference label volume (default: phantom subject labels)")
    p.add_argument("--raw", action="store_true", help="compare raw |E| (no ROI-max normalization)")
    p = sub.add_parser("pipeline", parents=[common], help="run every stage in order")
    p.add_argument("--count", type=int, help="number of training phantoms")
    p.add_argument("--dims", type=int, help="cube edge length in voxels")
    p.add_argument("--epochs", type=int)
    p.add_argument("--raw", action="store_true", help="compare raw |E| (no ROI-max normalization)")
    return parser


_FLAG_SETTINGS = {"seed": "run.seed", "jobs": "run.jobs", "count": "phantom.count", "dims": "phantom.dims",
                  "epochs": "train.epochs", "window": "fusion.window", "fuzzy": "fusion.fuzzy"}


def _set_jobs(jobs):
    if jobs > 0:
        import numba

        numba.set_num_threads(min(jobs, numba.config.NUMBA_NUM_THREADS))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    overrides = list(args.set)
    if getattr(args, "raw", False):
        overrides.append("metrics.normalize=false")
    for flag, setting in _FLAG_SETTINGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{setting}={value}")
    try:
        cfg = load_config(args.config, overrides, args.output)
        _set_jobs(cfg.get("run", "jobs", int))
    except ConfigError as exc:
        print(f"headmodel: config error: {exc}", file=sys.stderr)
        return 1
    try:
        if args.command == "phantom":
            run_stage("phantom", stage_phantom, cfg)
        elif args.command == "train":
            run_stage("train", stage_train, cfg, args.direction)
        elif args.command == "segment":
            run_stage("segment", stage_segment, cfg, args.subject, args.direction)
        elif args.command == "fuse":
            run_stage("fuse", stage_fuse, cfg)
        elif args.command == "simulate":
            run_stage("simulate", stage_simulate, cfg, args.labels, args.out)
        elif args.command == "evaluate":
            run_stage("evaluate", stage_evaluate, cfg, args.truth)
        else:
            run_pipeline(cfg)
    except ConfigError as exc:
        print(f"headmodel: config error: {exc}", file=sys.stderr)
        return 1
    except StageError as exc:
        print(f"headmodel: stage failure {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
