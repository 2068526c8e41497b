"""Command-line front end: convert, train, protocol, sweep, classify.

Experiments are described by a flat ``key = value`` file (see
:class:`ExperimentConfig`).  Every command writes into ``out_dir`` and
echoes the effective configuration there as ``effective.cfg``; running
again from that echo reproduces the run.

Exit codes: 0 success, 2 bad input (missing or malformed files, invalid
config), 1 training failure.  Files a failing command already wrote are
removed.
"""
import argparse
import csv
import logging
import os
import sys
import time
from dataclasses import dataclass, fields

import numpy as np

from . import data, evaluation, network, optim, plotting
from .errors import DivergenceError, FormatError
from .layers import LRNParams
from .presets import PRESETS

log = logging.getLogger("hsicnn")

FAST_ITERS = 10000
BANK_VARIANTS = {1: (1,), 3: (1, 3), 5: (1, 3, 5), 7: (1, 3, 5, 7)}


class UsageError(ValueError):
    pass


def _ints(text):
    text = text.strip()
    return tuple(int(v) for v in text.split(",") if v.strip()) if text else ()


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class ExperimentConfig:
    """Flat experiment description.  Defaults give the full-length training recipe.

    cube, labels:  HSIC/HSIL files, or ENVI headers (``.hdr``)
    preset:        indian_pines | salinas | pavia_university; fills classes and
                   width unless those keys are given explicitly
    classes:       original label ids to keep (comma list, empty = all)
    input_gain:    multiplier applied after standardisation (1 = none)
    """

    cube: str = ""
    labels: str = ""
    preset: str = ""
    classes: tuple = ()
    width: int = 128
    n_residual_modules: int = 2
    bank_scales: tuple = (1, 3, 5)
    dropout_rate: float = 0.5
    lrn_n: int = 5
    lrn_k: float = 1.0
    lrn_alpha: float = 1e-4
    lrn_beta: float = 0.75
    input_gain: float = 1.0
    n_per_class: int = 200
    n_partitions: int = 20
    seed: int = 0
    base_lr: float = 0.001
    gamma: float = 0.1
    step_iters: tuple = (33333, 66666)
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 10
    max_iters: int = 100000
    augmentation: bool = True
    snapshot_every: int = 0
    log_every: int = 100
    eval_every: int = 0
    tile: int = 128
    out_dir: str = "out"

    @classmethod
    def parse_raw(cls, text, source="<config>"):
        """``{key: value string}`` for the keys present in ``text``."""
        known = {f.name for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
            key, value = (p.strip() for p in line.split("=", 1))
            if key not in known:
                raise UsageError(f"{source}:{lineno}: unknown key {key!r}")
            if key in values:
                raise UsageError(f"{source}:{lineno}: duplicate key {key!r}")
            values[key] = value
        return values

    @classmethod
    def from_strings(cls, values, source="<config>"):
        types = {f.name: f.type for f in fields(cls)}
        conv = {int: int, float: float, str: str, bool: _bool, tuple: _ints}
        kwargs = {}
        for key, value in values.items():
            if key not in types:
                raise UsageError(f"{source}: unknown key {key!r}")
            try:
                kwargs[key] = conv[types[key]](value)
            except ValueError as exc:
                raise UsageError(f"{source}: bad value for {key}: {exc}") from exc
        cfg = cls(**kwargs)
        if cfg.preset:
            if cfg.preset not in PRESETS:
                raise UsageError(f"unknown preset {cfg.preset!r}; choose from {', '.join(PRESETS)}")
            p = PRESETS[cfg.preset]
            # explicit keys win over the preset
            if "classes" not in kwargs:
                cfg.classes = p.classes
            if "width" not in kwargs:
                cfg.width = p.width
        return cfg

    @classmethod
    def parse(cls, text, source="<config>"):
        return cls.from_strings(cls.parse_raw(text, source), source)

    @classmethod
    def load(cls, path, overrides=()):
        """Read ``path`` and apply ``key=value`` overrides on top."""
        with open(path) as fh:
            values = cls.parse_raw(fh.read(), str(path))
        for item in overrides:
            if "=" not in item:
                raise UsageError(f"--set expects key=value, got {item!r}")
            k, v = (p.strip() for p in item.split("=", 1))
            values[k] = v
        return cls.from_strings(values, str(path))

    def with_iterations(self, max_iters):
        """Copy with ``max_iters`` replaced and the lr steps scaled proportionally."""
        if max_iters < 0:
            raise UsageError("--max-iters must be >= 0")
        out = ExperimentConfig(**self.__dict__)
        if max_iters == 0 or not self.max_iters:
            out.step_iters = ()
        else:
            scaled = (int(s * max_iters / self.max_iters) for s in self.step_iters)
            out.step_iters = tuple(sorted({s for s in scaled if 0 < s < max_iters}))
        out.max_iters = max_iters
        return out

    def to_text(self):
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def plan(self):
        return optim.TrainPlan(
            base_lr=self.base_lr, gamma=self.gamma, step_iters=self.step_iters, momentum=self.momentum,
            weight_decay=self.weight_decay, batch_size=self.batch_size, max_iters=self.max_iters,
            seed=self.seed, augmentation=self.augmentation, snapshot_every=self.snapshot_every,
            log_every=self.log_every,
        )

    def network_config(self, bands, n_classes):
        return network.NetworkConfig(
            bands=bands, n_classes=n_classes, width=self.width, n_residual_modules=self.n_residual_modules,
            bank_scales=self.bank_scales, lrn=LRNParams(self.lrn_n, self.lrn_k, self.lrn_alpha, self.lrn_beta),
            dropout_rate=self.dropout_rate,
        )


# --- helpers -------------------------------------------------------------------

class Outputs:
    """Tracks files a command writes so a failure can remove them again."""

    def __init__(self, out_dir=None):
        self.out_dir = out_dir
        self.created_dir = False
        self.paths = []

    def __enter__(self):
        if self.out_dir and not os.path.isdir(self.out_dir):
            os.makedirs(self.out_dir)
            self.created_dir = True
        return self

    def path(self, name):
        p = os.path.join(self.out_dir, name) if self.out_dir else name
        self.paths.append(p)
        return p

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            return False
        for p in self.paths:
            for q in (p, f"{p}.part"):
                if os.path.exists(q):
                    os.remove(q)
        if self.created_dir and not os.listdir(self.out_dir):
            os.rmdir(self.out_dir)
        return False


def load_cube(path):
    if not path:
        raise UsageError("no cube file given")
    if str(path).lower().endswith(".hdr"):
        obj = data.read_envi(path)
        if not isinstance(obj, data.HSICube):
            raise FormatError("expected a float32 cube, found a label raster", str(path))
        return obj
    return data.read_hsic(path)


def load_labels(path):
    if not path:
        raise UsageError("no label file given")
    if str(path).lower().endswith(".hdr"):
        obj = data.read_envi(path)
        if not isinstance(obj, data.LabelMap):
            raise FormatError("expected a uint16 label raster, found a cube", str(path))
        return obj
    return data.read_hsil(path)


def prepare(cfg):
    """Load the config's cube and labels; returns ``(cube, relabelled LabelMap, class names)``."""
    cube = load_cube(cfg.cube)
    labels = load_labels(cfg.labels)
    if labels.labels.shape != cube.shape[:2]:
        raise UsageError(f"label map is {labels.labels.shape[0]}x{labels.labels.shape[1]} "
                         f"but the cube is {cube.H}x{cube.W}")
    classes = cfg.classes or tuple(int(c) for c in np.unique(labels.labels) if c > 0)
    if len(classes) < 2:
        raise UsageError(f"need at least two classes, got {classes}")
    lab = data.select_classes(labels, classes)
    names = list(lab.class_names)
    preset = PRESETS.get(cfg.preset)
    if preset is not None and tuple(classes) == preset.classes:
        names = list(preset.class_names)
    return cube, lab, names


def _write_text(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def _write_boundary_csv(path, boundary):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["category", "false_positives", "n_test", "percent"])
        for name, fp, n, pct in boundary.rows():
            wr.writerow([name, fp, n, "" if np.isnan(pct) else f"{pct:.4f}"])


def _echo(out, cfg):
    _write_text(out.path("effective.cfg"), cfg.to_text())


# --- commands --------------------------------------------------------------------

def cmd_convert(args):
    with Outputs() as out:
        obj = data.read_envi(args.envi_header, args.envi_raw)
        target = out.path(args.out)
        if isinstance(obj, data.HSICube):
            data.write_hsic(obj, target)
            print(f"H={obj.H} W={obj.W} B={obj.B}")
        else:
            data.write_hsil(obj, target)
            h, w = obj.labels.shape
            print(f"H={h} W={w} C={obj.n_classes}")
    return 0


def _partition(cfg, cube, lab, names, seed, snapshot_path=None):
    return evaluation.run_partition(
        cube, lab, cfg.network_config(cube.B, lab.n_classes), cfg.plan(), n_per_class=cfg.n_per_class,
        seed=seed, input_gain=cfg.input_gain, tile=cfg.tile, eval_every=cfg.eval_every, class_names=names,
        snapshot_path=snapshot_path,
    )


def cmd_train(cfg):
    cube, lab, names = prepare(cfg)
    with Outputs(cfg.out_dir) as out:
        _echo(out, cfg)
        snap = None
        if cfg.snapshot_every:
            snap = os.path.join(cfg.out_dir, "snapshot_{iteration}.hsiw")
        res = _partition(cfg, cube, lab, names, cfg.seed, snap)
        network.save_weights(res.net, out.path("weights.hsiw"))
        data.write_normalization(out.path("weights.hsiw.norm.json"), res.band_mean, res.band_std, cfg.input_gain)
        res.history.write_csv(out.path("train_log.csv"))
        res.report.to_csv(out.path("confusion.csv"))
        _write_boundary_csv(out.path("boundary.csv"), res.boundary)
        _write_text(out.path("report.txt"), res.report.to_text() + "\n\n" + res.boundary.to_text() + "\n")
        data.write_hsil(data.LabelMap(res.prediction.astype(np.uint16), lab.n_classes, names), out.path("prediction.hsil"))
        evaluation.write_ppm(out.path("prediction.ppm"), res.prediction)
        plotting.plot_training(res.history, out.path("training.png"))
        plotting.plot_confusion(res.report, out.path("confusion.png"))
        plotting.plot_boundary(res.boundary, out.path("boundary.png"))
    print(f"OA = {res.report.overall_accuracy:.2f} % ({res.train_seconds:.1f} s training)")
    return 0


def _protocol(cfg, cube, lab, names, n_partitions):
    parts = [_partition(cfg, cube, lab, names, cfg.seed + i) for i in range(n_partitions)]
    return evaluation.ProtocolResult(sorted(parts, key=lambda p: p.seed))


def write_partitions_csv(path, result):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["seed", "overall_accuracy", "n_correct", "n_test", "train_seconds"])
        for p in result.partitions:
            r = p.report
            wr.writerow([p.seed, repr(r.overall_accuracy), int(np.trace(r.counts)), int(r.counts.sum()),
                         f"{p.train_seconds:.3f}"])


def read_partitions_csv(path):
    """Recompute ``(mean, std, best)`` from the correct/test counts in a partitions CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    acc = np.array([100.0 * int(r["n_correct"]) / int(r["n_test"]) for r in rows])
    std = float(acc.std(ddof=1)) if len(acc) > 1 else 0.0
    return float(acc.mean()), std, float(acc.max())


def cmd_protocol(cfg, n_partitions):
    if n_partitions < 1:
        raise UsageError("--partitions must be >= 1")
    cube, lab, names = prepare(cfg)
    with Outputs(cfg.out_dir) as out:
        _echo(out, cfg)
        result = _protocol(cfg, cube, lab, names, n_partitions)
        write_partitions_csv(out.path("partitions.csv"), result)
        for p in result.partitions:
            p.report.to_csv(out.path(f"confusion_seed{p.seed}.csv"))
        lines = [f"partitions: {n_partitions}", f"overall accuracy: {result.summary()}", ""]
        lines += [f"seed {p.seed:>4d}: {p.report.overall_accuracy:.2f} %  ({p.train_seconds:.1f} s)" for p in result.partitions]
        _write_text(out.path("protocol.txt"), "\n".join(lines) + "\n")
        plotting.plot_partitions([p.seed for p in result.partitions], result.accuracies, out.path("protocol.png"))
    print(result.summary())
    return 0


def sweep_configs(cfg, axis, values):
    """One config per swept value."""
    out = []
    for v in values:
        c = ExperimentConfig(**cfg.__dict__)
        if axis == "width":
            if v < 1:
                raise UsageError(f"width must be >= 1, got {v}")
            c.width = v
        elif axis == "depth":
            if v < 0:
                raise UsageError(f"depth (residual modules) must be >= 0, got {v}")
            c.n_residual_modules = v
        elif axis == "bank":
            if v not in BANK_VARIANTS:
                raise UsageError(f"bank variant must be one of {sorted(BANK_VARIANTS)}, got {v}")
            c.bank_scales = BANK_VARIANTS[v]
        else:
            raise UsageError(f"unknown sweep axis {axis!r}")
        out.append(c)
    return out


def cmd_sweep(cfg, axis, values, n_partitions):
    if not values:
        raise UsageError("--values must list at least one value")
    configs = sweep_configs(cfg, axis, values)
    cube, lab, names = prepare(cfg)
    rows = []
    with Outputs(cfg.out_dir) as out:
        _echo(out, cfg)
        for v, c in zip(values, configs):
            result = _protocol(c, cube, lab, names, n_partitions)
            secs = float(np.mean([p.train_seconds for p in result.partitions]))
            params = network.param_count(c.network_config(cube.B, lab.n_classes))
            rows.append((v, result.mean, result.std, result.best, secs, params))
            print(f"{axis}={v}: {result.summary()}  {secs:.1f} s", flush=True)
        with open(out.path("sweep.csv"), "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow([axis, "mean_oa", "std_oa", "best_oa", "train_seconds", "params"])
            for v, m, s, b, secs, params in rows:
                wr.writerow([v, f"{m:.4f}", f"{s:.4f}", f"{b:.4f}", f"{secs:.3f}", params])
        head = f"{axis:>8}  {'OA mean ± std (best)':>24}  {'train s':>9}  {'params':>9}"
        body = [f"{v!s:>8}  {evaluation.format_oa(m, s, b):>24}  {secs:9.1f}  {params:9d}" for v, m, s, b, secs, params in rows]
        _write_text(out.path("sweep.txt"), "\n".join([head] + body) + "\n")
        plotting.plot_sweep(axis, values, [r[1] for r in rows], [r[2] for r in rows], [r[4] for r in rows],
                            out.path("sweep.png"))
    return 0


def cmd_classify(args):
    net = network.load_weights(args.weights)
    cube = load_cube(args.cube)
    expected = net.config.bands
    if cube.B != expected:
        raise UsageError(f"band mismatch: weights expect B={expected}, cube has B={cube.B}")
    norm = args.norm or f"{args.weights}.norm.json"
    if os.path.exists(norm):
        cube = data.apply_normalization(cube, *data.read_normalization(norm))
    elif args.norm:
        raise UsageError(f"normalisation file {args.norm} not found")
    else:
        log.warning("no normalisation file next to the weights; classifying the raw cube")
    with Outputs() as out:
        pred = network.predict(net, cube, tile=args.tile) + 1
        data.write_hsil(data.LabelMap(pred.astype(np.uint16), net.config.n_classes), out.path(args.out_map))
        if args.out_ppm:
            evaluation.write_ppm(out.path(args.out_ppm), pred)
    print(f"H={cube.H} W={cube.W} classes={net.config.n_classes}")
    return 0


# --- entry point -------------------------------------------------------------------

def _config_from_args(args):
    cfg = ExperimentConfig.load(args.config, args.set or ())
    if args.out_dir:
        cfg.out_dir = args.out_dir
    if args.fast:
        cfg = cfg.with_iterations(FAST_ITERS)
    if args.max_iters is not None:
        cfg = cfg.with_iterations(args.max_iters)
    return cfg


def build_parser():
    ap = argparse.ArgumentParser(prog="hsicnn", description="Contextual CNN for hyperspectral classification.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="ENVI raster -> HSIC cube or HSIL label file")
    p.add_argument("--envi-header", required=True)
    p.add_argument("--envi-raw", default=None, help="raw companion (default: header path without extension)")
    p.add_argument("--out", required=True)

    for name, text in (("train", "one split -> train -> evaluate pass"),
                       ("protocol", "repeated random partitions"),
                       ("sweep", "protocol per width / depth / bank value")):
        p = sub.add_parser(name, help=text)
        p.add_argument("config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out-dir", default=None)
        p.add_argument("--max-iters", type=int, default=None, help="iterations; lr steps scale along")
        p.add_argument("--fast", action="store_true", help=f"{FAST_ITERS} iterations with proportional lr steps")
        if name != "train":
            p.add_argument("--partitions", type=int, default=None)
        if name == "sweep":
            p.add_argument("--axis", required=True, choices=("width", "depth", "bank"))
            p.add_argument("--values", required=True, type=_ints)

    p = sub.add_parser("classify", help="label a cube with trained weights")
    p.add_argument("--weights", required=True)
    p.add_argument("--cube", required=True)
    p.add_argument("--out-map", required=True)
    p.add_argument("--out-ppm", default=None)
    p.add_argument("--norm", default=None, help="normalisation JSON (default: <weights>.norm.json)")
    p.add_argument("--tile", type=int, default=128)
    return ap


def run(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "convert":
        return cmd_convert(args)
    if args.command == "classify":
        return cmd_classify(args)
    cfg = _config_from_args(args)
    if args.command == "train":
        return cmd_train(cfg)
    n = args.partitions if args.partitions is not None else cfg.n_partitions
    if args.command == "protocol":
        return cmd_protocol(cfg, n)
    return cmd_sweep(cfg, args.axis, args.values, n)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    verbose = "-v" in argv or "--verbose" in argv
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        code = run(argv)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        # FormatError, UsageError and config validation all land here
        print(f"error: {exc}", file=sys.stderr)
        return 2
    log.info("done in %.1f s", time.perf_counter() - t0)
    return code
