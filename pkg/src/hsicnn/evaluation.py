"""Accuracy, confusion matrices, boundary analysis, map rendering and the
repeated-partition protocol.

Prediction and label rasters share one id space: 1..C for classes and 0 for
unlabelled pixels.  ``test_pixels`` is an n x 2 array of (row, col).
"""
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import data, network, optim

log = logging.getLogger(__name__)


def _at(raster, pixels):
    px = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    return np.asarray(raster)[px[:, 0], px[:, 1]]


def _labels(labels):
    return labels.labels if isinstance(labels, data.LabelMap) else np.asarray(labels)


def overall_accuracy(pred, labels, test_pixels):
    """Percent of test pixels whose predicted id equals the ground truth."""
    truth = _at(_labels(labels), test_pixels)
    if truth.size == 0:
        raise ValueError("overall accuracy of an empty test set")
    return 100.0 * float(np.mean(_at(pred, test_pixels) == truth))


@dataclass
class EvalReport:
    overall_accuracy: float
    per_class_accuracy: np.ndarray  # percent, NaN where a class has no test pixels
    confusion: np.ndarray  # C x C, row-normalised percent; undefined rows are all zero
    counts: np.ndarray  # C x C raw counts, rows = truth, columns = prediction
    n_test: np.ndarray
    class_names: list = field(default_factory=list)

    @property
    def defined(self):
        return self.n_test > 0

    def oa_from_confusion(self):
        """OA recomputed as the class-count-weighted mean of the diagonal."""
        ok = self.defined
        diag = np.diag(self.confusion)[ok]
        return float(np.sum(diag * self.n_test[ok]) / np.sum(self.n_test[ok]))

    def to_csv(self, path):
        c = len(self.n_test)
        with open(path, "w") as fh:
            fh.write("truth," + ",".join(f"pred_{j + 1}" for j in range(c)) + ",n_test\n")
            for i in range(c):
                row = ",".join(f"{v:.4f}" for v in self.confusion[i]) if self.defined[i] else ",".join(["undefined"] * c)
                fh.write(f"{i + 1},{row},{self.n_test[i]}\n")

    def to_text(self):
        c = len(self.n_test)
        lines = [f"overall accuracy: {self.overall_accuracy:.2f} %", ""]
        lines.append("      " + "".join(f"{j + 1:>8d}" for j in range(c)))
        for i in range(c):
            cells = "".join(f"{v:7.1f}%" for v in self.confusion[i]) if self.defined[i] else "  (no test pixels)"
            name = f"  {self.class_names[i]}" if i < len(self.class_names) else ""
            lines.append(f"{i + 1:>5d} {cells}{name}")
        return "\n".join(lines)


def confusion(pred, labels, test_pixels, n_classes):
    """Row-normalised confusion matrix (percent) over the test pixels."""
    if n_classes < 2:
        raise ValueError("confusion matrix needs at least two classes")
    truth = _at(_labels(labels), test_pixels).astype(np.int64)
    guess = _at(pred, test_pixels).astype(np.int64)
    if truth.size and (truth.min() < 1 or truth.max() > n_classes):
        raise ValueError("test pixels must carry labels in 1..C")
    if guess.size and (guess.min() < 1 or guess.max() > n_classes):
        raise ValueError("predictions must lie in 1..C")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (truth - 1, guess - 1), 1)
    n_test = counts.sum(axis=1)
    pct = np.zeros((n_classes, n_classes))
    ok = n_test > 0
    pct[ok] = 100.0 * counts[ok] / n_test[ok, None]
    return pct, counts, n_test


def evaluate(pred, labels, test_pixels, n_classes, class_names=()):
    pct, counts, n_test = confusion(pred, labels, test_pixels, n_classes)
    diag = np.diag(pct).copy()
    diag[n_test == 0] = np.nan
    return EvalReport(
        overall_accuracy=overall_accuracy(pred, labels, test_pixels),
        per_class_accuracy=diag,
        confusion=pct,
        counts=counts,
        n_test=n_test,
        class_names=list(class_names),
    )


# --- boundary analysis ---------------------------------------------------------

CATEGORIES = ("0", "1", ">=2")


def boundary_distance(labels):
    """Per-pixel boundary category: 0, 1 or 2 (meaning >= 2); -1 for unlabelled pixels.

    With ``d`` the Chebyshev distance from a labelled pixel to the nearest
    labelled pixel of another class, the category is ``min(d - 1, 2)``: pixels
    touching another class are 0, the next ring is 1, and a pixel is 2 when no
    other class occurs within its 5 x 5 neighbourhood or the ring around it.
    Unlabelled pixels neither receive a category nor form boundaries.
    """
    lab = _labels(labels)
    out = np.full(lab.shape, -1, dtype=np.int8)
    labelled = lab > 0
    out[labelled] = 2
    for cat, radius in ((1, 2), (0, 1)):
        box = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
        near_other = np.zeros(lab.shape, dtype=bool)
        for c in np.unique(lab[labelled]):
            present = ndimage.binary_dilation(lab == c, structure=box)
            near_other |= present & labelled & (lab != c)
        out[near_other] = cat
    return out


@dataclass
class BoundaryReport:
    false_positives: np.ndarray  # per category
    n_test: np.ndarray

    @property
    def percentage(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.n_test > 0, 100.0 * self.false_positives / np.maximum(self.n_test, 1), np.nan)

    def rows(self):
        return [
            (name, int(fp), int(n), float(p))
            for name, fp, n, p in zip(CATEGORIES, self.false_positives, self.n_test, self.percentage)
        ]

    def to_text(self):
        head = "category   FP / test      percent"
        body = [f"{name:>8}  {fp:>5d} / {n:<6d}  {p:7.2f} %" for name, fp, n, p in self.rows()]
        return "\n".join([head] + body)


def fp_by_category(pred, labels, test_pixels):
    cats = _at(boundary_distance(labels), test_pixels)
    wrong = _at(pred, test_pixels) != _at(_labels(labels), test_pixels)
    fp = np.array([int(np.sum(wrong & (cats == k))) for k in range(3)])
    n = np.array([int(np.sum(cats == k)) for k in range(3)])
    return BoundaryReport(fp, n)


# --- map rendering --------------------------------------------------------------

# entry 0 is unlabelled; 1.. are classes
DEFAULT_PALETTE = (
    (0, 0, 0),
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 190), (0, 128, 128), (230, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
    (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
)


def render_map(class_map, palette=DEFAULT_PALETTE):
    """Binary PPM (P6, maxval 255) bytes colouring each id with ``palette[id]``."""
    m = np.asarray(class_map)
    if m.ndim != 2:
        raise ValueError(f"class map must be H x W, got shape {m.shape}")
    pal = np.asarray(palette, dtype=np.uint8).reshape(-1, 3)
    if m.size and (m.min() < 0 or m.max() >= len(pal)):
        raise ValueError(f"palette has {len(pal)} entries but the map holds id {int(m.max())}")
    h, w = m.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pal[m.astype(np.int64)].tobytes()


def write_ppm(path, class_map, palette=DEFAULT_PALETTE):
    payload = render_map(class_map, palette)
    with open(path, "wb") as fh:
        fh.write(payload)


# --- protocol ---------------------------------------------------------------------

@dataclass
class PartitionResult:
    seed: int
    report: EvalReport
    boundary: BoundaryReport
    train_seconds: float
    prediction: np.ndarray = None  # ids 1..C over the whole image
    net: object = None
    history: object = None
    split: object = None
    band_mean: np.ndarray = None
    band_std: np.ndarray = None


def run_partition(cube, labels, net_config, plan, n_per_class=200, seed=0, input_gain=1.0, tile=128,
                  eval_every=0, class_names=(), snapshot_path=None):
    """One split -> standardise -> train -> predict -> evaluate pass.

    ``labels`` must already hold ids 1..C (see :func:`hsicnn.data.select_classes`).
    """
    lab = _labels(labels)
    classes = list(range(1, net_config.n_classes + 1))
    split = data.sample_split(lab, classes, n_per_class, seed)
    scaled, mean, std = data.standardize(cube, split.train_pixels())
    if input_gain != 1.0:
        scaled = data.HSICube(scaled.values * np.float32(input_gain))
    pool = data.build_pool(scaled, lab, split, radius=net_config.radius, augmentation=plan.augmentation)
    net = network.build(net_config, seed=seed)
    plan = optim.TrainPlan(**{**plan.__dict__, "seed": seed})

    eval_fn = None
    if eval_every:
        probe = split.test_pixels()
        probe = probe[np.random.default_rng(seed).permutation(len(probe))[:2000]]
        probe_patches = data.extract_patches(scaled, probe, net_config.radius)
        probe_truth = _at(lab, probe).astype(np.int64) - 1

        def eval_fn(n):
            logits = network.forward_patch(n, probe_patches, mode="eval")
            return 100.0 * float(np.mean(np.argmax(logits, axis=-1) == probe_truth))

    t0 = time.perf_counter()
    net, history = optim.train(net, pool, plan, eval_fn=eval_fn, eval_every=eval_every, snapshot_path=snapshot_path)
    seconds = time.perf_counter() - t0
    pred = network.predict(net, scaled, tile=tile) + 1
    test = split.test_pixels()
    report = evaluate(pred, lab, test, net_config.n_classes, class_names)
    boundary = fp_by_category(pred, lab, test)
    log.info("partition seed=%d OA=%.2f%% (%.1fs training)", seed, report.overall_accuracy, seconds)
    return PartitionResult(seed, report, boundary, seconds, pred, net, history, split, mean, std)


@dataclass
class ProtocolResult:
    partitions: list

    @property
    def accuracies(self):
        return np.array([p.report.overall_accuracy for p in self.partitions])

    @property
    def mean(self):
        return float(self.accuracies.mean())

    @property
    def std(self):
        a = self.accuracies
        return float(a.std(ddof=1)) if len(a) > 1 else 0.0

    @property
    def best(self):
        return float(self.accuracies.max())

    def summary(self):
        return format_oa(self.mean, self.std, self.best)


def format_oa(mean, std, best):
    return f"{mean:.2f} ± {std:.2f} ({best:.2f})"


def run_protocol(cube, labels, net_config, plan, n_partitions=20, seed=0, **kwargs):
    """Repeat :func:`run_partition` over seeds ``seed, seed + 1, ...``; std is the n-1 estimator."""
    if n_partitions < 1:
        raise ValueError("n_partitions must be >= 1")
    parts = [run_partition(cube, labels, net_config, plan, seed=seed + i, **kwargs) for i in range(n_partitions)]
    return ProtocolResult(sorted(parts, key=lambda p: p.seed))
