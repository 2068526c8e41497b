"""Cube and label ingestion, standardisation, splits, patches and mirroring.

Binary containers (all little-endian):

* ``HSIC``: magic, u32 version=1, u32 H, u32 W, u32 B, then H*W*B float32
  values, band-interleaved by pixel, rows outermost.
* ``HSIL``: magic, u32 version=1, u32 H, u32 W, u32 C, then H*W u16 labels
  (0 = unlabelled, 1..C = classes).

ENVI rasters (text header + raw companion) are read for the three standard
interleaves and the float32 / uint16 data types.
"""
import json
import os
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

HSIC_MAGIC = b"HSIC"
HSIL_MAGIC = b"HSIL"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4s4I")
# u32 extents, but keep files addressable
_MAX_ELEMENTS = 1 << 34


@dataclass
class HSICube:
    values: np.ndarray  # H x W x B float32
    wavelengths: list = None

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ValueError(f"cube must be a non-empty H x W x B array, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("cube contains non-finite values")

    @property
    def shape(self):
        return self.values.shape

    H = property(lambda self: self.values.shape[0])
    W = property(lambda self: self.values.shape[1])
    B = property(lambda self: self.values.shape[2])


@dataclass
class LabelMap:
    labels: np.ndarray  # H x W uint16, 0 = unlabelled
    n_classes: int = None
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValueError(f"label map must be H x W, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() > np.iinfo(np.uint16).max):
            raise ValueError("labels must fit in unsigned 16 bits")
        self.labels = np.ascontiguousarray(labels, dtype=np.uint16)
        top = int(self.labels.max()) if self.labels.size else 0
        if self.n_classes is None:
            self.n_classes = top
        if top > self.n_classes:
            raise ValueError(f"label {top} exceeds declared class count {self.n_classes}")

    @property
    def shape(self):
        return self.labels.shape


# --- HSIC / HSIL -------------------------------------------------------------

def _read_header(buf, magic, path):
    if len(buf) < _HEADER.size:
        raise FormatError(f"file shorter than the {_HEADER.size}-byte header", path, len(buf))
    got, version, a, b, c = _HEADER.unpack_from(buf)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}", path, 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", path, 4)
    return a, b, c


def hsic_bytes(cube):
    h, w, b = cube.values.shape
    return _HEADER.pack(HSIC_MAGIC, FORMAT_VERSION, h, w, b) + cube.values.astype("<f4").tobytes()


def hsic_from_bytes(buf, path=None):
    h, w, b = _read_header(buf, HSIC_MAGIC, path)
    if min(h, w, b) < 1 or h * w * b > _MAX_ELEMENTS:
        raise FormatError(f"extents H={h} W={w} B={b} out of range", path, 8)
    need = _HEADER.size + 4 * h * w * b
    if len(buf) != need:
        raise FormatError(f"payload size {len(buf)} bytes, header implies {need}", path, min(len(buf), need))
    values = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(h, w, b)
    try:
        return HSICube(values.astype(np.float32))
    except ValueError as exc:
        raise FormatError(str(exc), path, _HEADER.size) from exc


def write_hsic(cube, path):
    _atomic_write(path, hsic_bytes(cube))


def read_hsic(path):
    with open(path, "rb") as fh:
        return hsic_from_bytes(fh.read(), str(path))


def hsil_bytes(label_map):
    h, w = label_map.labels.shape
    return _HEADER.pack(HSIL_MAGIC, FORMAT_VERSION, h, w, label_map.n_classes) + label_map.labels.astype("<u2").tobytes()


def hsil_from_bytes(buf, path=None):
    h, w, c = _read_header(buf, HSIL_MAGIC, path)
    if min(h, w) < 1 or h * w > _MAX_ELEMENTS or c > np.iinfo(np.uint16).max:
        raise FormatError(f"extents H={h} W={w} C={c} out of range", path, 8)
    need = _HEADER.size + 2 * h * w
    if len(buf) != need:
        raise FormatError(f"payload size {len(buf)} bytes, header implies {need}", path, min(len(buf), need))
    labels = np.frombuffer(buf, dtype="<u2", offset=_HEADER.size).reshape(h, w)
    top = int(labels.max())
    if top > c:
        bad = int(np.argmax(labels.ravel() > c))
        raise FormatError(f"label {top} exceeds declared class count {c}", path, _HEADER.size + 2 * bad)
    return LabelMap(labels.astype(np.uint16), n_classes=c)


def write_hsil(label_map, path):
    _atomic_write(path, hsil_bytes(label_map))


def read_hsil(path):
    with open(path, "rb") as fh:
        return hsil_from_bytes(fh.read(), str(path))


def _atomic_write(path, payload):
    tmp = f"{path}.part"
    try:
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


# --- ENVI --------------------------------------------------------------------

_ENVI_TYPES = {4: np.float32, 12: np.uint16}


def parse_envi_header(text):
    """Parse ``key = value`` lines; ``{...}`` values may span lines."""
    lines = text.splitlines()
    if not lines or lines[0].strip().upper() != "ENVI":
        raise FormatError("ENVI header must start with the line 'ENVI'")
    out = {}
    body = "\n".join(lines[1:])
    for m in re.finditer(r"^\s*([^=\n]+?)\s*=\s*(\{[^}]*\}|[^\n]*)", body, flags=re.MULTILINE):
        key = m.group(1).strip().lower()
        value = m.group(2).strip()
        if value.startswith("{"):
            value = [v.strip() for v in value[1:-1].split(",") if v.strip()]
        out[key] = value
    return out


def read_envi(header_path, raw_path=None):
    """Read an ENVI raster into :class:`HSICube` (float32) or :class:`LabelMap` (uint16)."""
    header_path = str(header_path)
    with open(header_path, encoding="ascii", errors="replace") as fh:
        hdr = parse_envi_header(fh.read())
    if raw_path is None:
        raw_path = os.path.splitext(header_path)[0]
    try:
        samples, lines, bands = int(hdr["samples"]), int(hdr["lines"]), int(hdr["bands"])
        dtype_code = int(hdr["data type"])
    except KeyError as exc:
        raise FormatError(f"ENVI header lacks required key {exc.args[0]!r}", header_path) from exc
    except ValueError as exc:
        raise FormatError(f"non-integer ENVI extent or data type: {exc}", header_path) from exc
    interleave = str(hdr.get("interleave", "bsq")).lower()
    if interleave not in ("bsq", "bil", "bip"):
        raise FormatError(f"unknown interleave {interleave!r}", header_path)
    if dtype_code not in _ENVI_TYPES:
        raise FormatError(f"unsupported ENVI data type {dtype_code} (only 4=float32, 12=uint16)", header_path)
    order = int(hdr.get("byte order", 0))
    if order not in (0, 1):
        raise FormatError(f"byte order must be 0 or 1, got {order}", header_path)
    offset = int(hdr.get("header offset", 0))
    if min(samples, lines, bands) < 1:
        raise FormatError(f"non-positive extents samples={samples} lines={lines} bands={bands}", header_path)

    dt = np.dtype(_ENVI_TYPES[dtype_code]).newbyteorder("<" if order == 0 else ">")
    need = offset + dt.itemsize * samples * lines * bands
    size = os.path.getsize(raw_path)
    if size != need:
        raise FormatError(f"raw file holds {size} bytes, header promises {need}", str(raw_path), min(size, need))
    with open(raw_path, "rb") as fh:
        fh.seek(offset)
        flat = np.frombuffer(fh.read(need - offset), dtype=dt)
    if interleave == "bsq":
        arr = flat.reshape(bands, lines, samples).transpose(1, 2, 0)
    elif interleave == "bil":
        arr = flat.reshape(lines, bands, samples).transpose(0, 2, 1)
    else:
        arr = flat.reshape(lines, samples, bands)
    arr = np.ascontiguousarray(arr.astype(dt.newbyteorder("=")))

    if dtype_code == 12:
        if bands != 1:
            raise FormatError(f"label rasters must have one band, found {bands}", header_path)
        names = hdr.get("class names") or []
        n_classes = int(hdr["classes"]) - 1 if "classes" in hdr else None
        try:
            return LabelMap(arr[:, :, 0], n_classes=n_classes, class_names=list(names))
        except ValueError as exc:
            raise FormatError(str(exc), str(raw_path)) from exc
    wl = hdr.get("wavelength")
    try:
        return HSICube(arr, wavelengths=[float(v) for v in wl] if isinstance(wl, list) else None)
    except ValueError as exc:
        raise FormatError(str(exc), str(raw_path)) from exc


def envi_header_text(samples, lines, bands, interleave, data_type, byte_order=0):
    return (
        "ENVI\n"
        f"samples = {samples}\nlines = {lines}\nbands = {bands}\n"
        f"header offset = 0\nfile type = ENVI Standard\ndata type = {data_type}\n"
        f"interleave = {interleave}\nbyte order = {byte_order}\n"
    )


def write_envi(values, header_path, raw_path, interleave="bsq", byte_order=0):
    """Write an H x W x B float32 array or H x W uint16 array as ENVI (used for fixtures)."""
    values = np.asarray(values)
    if values.ndim == 2:
        values = values[:, :, None]
    code = 12 if values.dtype == np.uint16 else 4
    dt = np.dtype(_ENVI_TYPES[code]).newbyteorder("<" if byte_order == 0 else ">")
    lines, samples, bands = values.shape
    if interleave == "bsq":
        arr = values.transpose(2, 0, 1)
    elif interleave == "bil":
        arr = values.transpose(0, 2, 1)
    elif interleave == "bip":
        arr = values
    else:
        raise ValueError(f"unknown interleave {interleave!r}")
    with open(raw_path, "wb") as fh:
        fh.write(np.ascontiguousarray(arr).astype(dt).tobytes())
    with open(header_path, "w") as fh:
        fh.write(envi_header_text(samples, lines, bands, interleave, code, byte_order))


# --- preprocessing -------------------------------------------------------------

def standardize(cube, train_pixels):
    """Per-band zero mean / unit variance using statistics of ``train_pixels`` only.

    ``train_pixels`` is a sequence of (row, col) pairs or an n x 2 array.
    Bands whose training std is below 1e-12 are only centred.
    Returns ``(cube', mean, std)`` with the std actually divided by.
    """
    values = cube.values if isinstance(cube, HSICube) else np.asarray(cube)
    px = np.asarray(train_pixels, dtype=np.int64).reshape(-1, 2)
    if len(px) == 0:
        raise ValueError("standardize needs at least one training pixel")
    samples = values[px[:, 0], px[:, 1]].astype(np.float64)
    mean = samples.mean(axis=0)
    std = samples.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    out = ((values - mean) / std).astype(np.float32)
    return HSICube(out, getattr(cube, "wavelengths", None)), mean, std


def apply_normalization(cube, mean, std, gain=1.0):
    """Re-apply stored standardisation statistics (and an optional input gain) to a new cube."""
    values = cube.values if isinstance(cube, HSICube) else np.asarray(cube)
    mean, std = np.asarray(mean, dtype=np.float64), np.asarray(std, dtype=np.float64)
    if mean.shape != (values.shape[-1],) or std.shape != mean.shape:
        raise ValueError(f"normalisation covers {mean.size} bands but the cube has {values.shape[-1]}")
    out = ((values - mean) / std).astype(np.float32)
    if gain != 1.0:
        out *= np.float32(gain)
    return HSICube(out, getattr(cube, "wavelengths", None))


def write_normalization(path, mean, std, gain=1.0):
    """JSON sidecar with the per-band statistics used at training time."""
    doc = {"mean": [float(v) for v in mean], "std": [float(v) for v in std], "input_gain": float(gain)}
    _atomic_write(path, (json.dumps(doc, indent=1) + "\n").encode("ascii"))


def read_normalization(path):
    """Returns ``(mean, std, gain)``."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
        mean, std = np.array(doc["mean"], dtype=np.float64), np.array(doc["std"], dtype=np.float64)
        gain = float(doc.get("input_gain", 1.0))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed normalisation file: {exc}", str(path)) from exc
    if mean.shape != std.shape or mean.ndim != 1 or np.any(std <= 0):
        raise FormatError("normalisation mean/std must be equal-length with positive std", str(path))
    return mean, std, gain


def select_classes(labels, classes):
    """Relabel ``classes`` (original ids) to 1..len(classes); everything else becomes 0."""
    lab = labels.labels if isinstance(labels, LabelMap) else np.asarray(labels)
    out = np.zeros(lab.shape, dtype=np.uint16)
    names = []
    for new, old in enumerate(classes, start=1):
        if not np.any(lab == old):
            raise ValueError(f"class {old} is absent from the label map")
        out[lab == old] = new
        if isinstance(labels, LabelMap) and labels.class_names and old < len(labels.class_names):
            names.append(labels.class_names[old])
    return LabelMap(out, n_classes=len(classes), class_names=names)


@dataclass
class SplitSpec:
    """Per-class train/test pixel lists (arrays of (row, col))."""

    seed: int
    n_train_per_class: int
    classes: list
    train: dict
    test: dict

    def train_pixels(self):
        return np.concatenate([self.train[c] for c in self.classes]).reshape(-1, 2)

    def test_pixels(self):
        return np.concatenate([self.test[c] for c in self.classes]).reshape(-1, 2)

    @property
    def n_train(self):
        return sum(len(v) for v in self.train.values())

    @property
    def n_test(self):
        return sum(len(v) for v in self.test.values())


def sample_split(labels, classes, n_per_class=200, seed=0):
    """Draw ``min(n_per_class, class size)`` training pixels per class without replacement."""
    lab = labels.labels if isinstance(labels, LabelMap) else np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, test = {}, {}
    for c in classes:
        pix = np.argwhere(lab == c)
        if len(pix) == 0:
            raise ValueError(f"class {c} is absent from the label map")
        pick = rng.permutation(len(pix))
        k = min(n_per_class, len(pix))
        train[c] = pix[np.sort(pick[:k])]
        test[c] = pix[np.sort(pick[k:])]
    return SplitSpec(seed, n_per_class, list(classes), train, test)


def extract_patch(cube, pixel, radius=2):
    """``(2r+1) x (2r+1) x B`` neighbourhood of ``pixel`` with zeros outside the image."""
    values = cube.values if isinstance(cube, HSICube) else np.asarray(cube)
    h, w, b = values.shape
    y, x = int(pixel[0]), int(pixel[1])
    if not (0 <= y < h and 0 <= x < w):
        raise IndexError(f"pixel ({y}, {x}) outside {h}x{w} image")
    size = 2 * radius + 1
    out = np.zeros((size, size, b), dtype=values.dtype)
    y0, y1 = max(0, y - radius), min(h, y + radius + 1)
    x0, x1 = max(0, x - radius), min(w, x + radius + 1)
    out[y0 - y + radius:y1 - y + radius, x0 - x + radius:x1 - x + radius] = values[y0:y1, x0:x1]
    return out


def extract_patches(cube, pixels, radius=2):
    """Stack of patches for an n x 2 pixel array, via one zero-padded copy of the cube."""
    values = cube.values if isinstance(cube, HSICube) else np.asarray(cube)
    px = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    padded = np.pad(values, ((radius, radius), (radius, radius), (0, 0)))
    size = 2 * radius + 1
    out = np.empty((len(px), size, size, values.shape[2]), dtype=values.dtype)
    for i, (y, x) in enumerate(px):
        out[i] = padded[y:y + size, x:x + size]
    return out


VARIANTS = ("orig", "h", "v", "d")


def mirror(patch, variant):
    """Spatial mirror of a square patch (batched patches allowed); the band axis is untouched."""
    if variant == "orig":
        return patch
    if variant == "h":
        return np.flip(patch, axis=-2)  # left-right, across the vertical axis
    if variant == "v":
        return np.flip(patch, axis=-3)  # up-down, across the horizontal axis
    if variant == "d":
        return np.swapaxes(patch, -3, -2)
    raise ValueError(f"unknown mirror variant {variant!r}")


@dataclass
class PatchSample:
    patch: np.ndarray
    label: int
    variant: str


def augment(patch, label=0):
    """The four training variants of one patch: original, two flips and the transpose."""
    patch = np.asarray(patch)
    if patch.shape[0] != patch.shape[1]:
        raise ValueError(f"augment needs a square patch, got {patch.shape[:2]}")
    return [PatchSample(np.ascontiguousarray(mirror(patch, v)), label, v) for v in VARIANTS]


class PatchPool:
    """Training pool of centre-labelled patches, mirrored lazily.

    With augmentation on, pool index ``i`` is variant ``i % 4`` of base patch
    ``i // 4``, so the pool is four times the number of training pixels.
    """

    def __init__(self, patches, labels, augmentation=True):
        self.patches = np.ascontiguousarray(patches)
        self.labels = np.asarray(labels, dtype=np.int64)
        if len(self.patches) != len(self.labels):
            raise ValueError("patch and label counts differ")
        self.augmentation = augmentation

    def __len__(self):
        return len(self.patches) * (4 if self.augmentation else 1)

    def batch(self, indices):
        indices = np.asarray(indices)
        if not self.augmentation:
            return self.patches[indices], self.labels[indices]
        base, var = np.divmod(indices, 4)
        out = self.patches[base].copy()
        for v in (1, 2, 3):
            sel = var == v
            if np.any(sel):
                out[sel] = mirror(self.patches[base[sel]], VARIANTS[v])
        return out, self.labels[base]


def build_pool(cube, labels, split, radius=2, augmentation=True):
    """Patch pool for the training pixels of ``split``; class ``c`` maps to index ``classes.index(c)``."""
    lab = labels.labels if isinstance(labels, LabelMap) else np.asarray(labels)
    px = split.train_pixels()
    index = {c: i for i, c in enumerate(split.classes)}
    y = np.array([index[int(lab[r, c])] for r, c in px], dtype=np.int64)
    return PatchPool(extract_patches(cube, px, radius), y, augmentation)
