"""Small synthetic scenes for smoke runs and sanity checks."""
import numpy as np

from .data import HSICube, LabelMap


def class_spectra(n_classes, bands, rng, smooth=4):
    """Smooth random class mean spectra, roughly unit scale."""
    raw = rng.normal(size=(n_classes, bands + 2 * smooth))
    kernel = np.ones(2 * smooth + 1) / (2 * smooth + 1)
    spectra = np.stack([np.convolve(r, kernel, mode="valid") for r in raw])
    return spectra / spectra.std(axis=1, keepdims=True)


def make_scene(height=32, width=32, bands=32, n_classes=8, block=4, noise=0.3, unlabeled=0.0, seed=0):
    """Blocky ground truth with Gaussian class spectra.

    The map is tiled with ``block x block`` squares, each assigned a random
    class; every pixel is its class mean spectrum plus isotropic Gaussian
    noise of std ``noise``.  A fraction ``unlabeled`` of squares is left at 0.
    Returns ``(HSICube, LabelMap)``.
    """
    rng = np.random.default_rng(seed)
    spectra = class_spectra(n_classes, bands, rng)
    by, bx = -(-height // block), -(-width // block)
    cells = rng.integers(1, n_classes + 1, size=(by, bx))
    # make sure each class occurs at least once
    flat = cells.ravel()
    flat[rng.permutation(flat.size)[:n_classes]] = np.arange(1, n_classes + 1)
    if unlabeled > 0:
        drop = rng.random(flat.size) < unlabeled
        for c in range(1, n_classes + 1):
            own = np.flatnonzero(flat == c)
            if drop[own].all():
                drop[own[0]] = False
        flat[drop] = 0
    labels = np.kron(cells, np.ones((block, block), dtype=cells.dtype))[:height, :width]
    values = np.zeros((height, width, bands), dtype=np.float64)
    mask = labels > 0
    values[mask] = spectra[labels[mask] - 1]
    values += rng.normal(scale=noise, size=values.shape)
    return HSICube(values.astype(np.float32)), LabelMap(labels.astype(np.uint16), n_classes=n_classes)


def labels_with_sizes(sizes, width=256, seed=0):
    """Label raster holding exactly ``sizes[i]`` pixels of class ``i + 1`` (shuffled, rest unlabelled)."""
    total = int(sum(sizes))
    height = -(-total // width)
    flat = np.zeros(height * width, dtype=np.uint16)
    flat[:total] = np.repeat(np.arange(1, len(sizes) + 1, dtype=np.uint16), sizes)
    np.random.default_rng(seed).shuffle(flat)
    return LabelMap(flat.reshape(height, width), n_classes=len(sizes))
