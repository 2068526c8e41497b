"""Acceptance suite: one test per criterion, each reported as a PASS/FAIL/SKIP line.

Run alone with ``pytest tests/test_acceptance.py -v``; the summary section at
the end lists every criterion with its measured values.
"""
import os
import time
from pathlib import Path

import numpy as np
import pytest

from hsicnn import data, evaluation, layers, network, optim, presets, synthetic, tensor
from hsicnn.errors import FormatError
from hsicnn.network import NetworkConfig

import gradcheck
import oracles
from test_data import hsic_corpus
from test_network import _random_net, corrupt_weight_corpus, image_vs_patches


def test_gradient_suite(criterion):
    criterion("gradient suite")
    t0 = time.perf_counter()
    errs = gradcheck.run_all(seed=0)
    seconds = time.perf_counter() - t0
    layer_errs = {k: v for k, v in errs.items() if k not in ("network", "dropout_expectation")}
    criterion("gradient suite", f"worst layer {max(layer_errs.values()):.1e}, network {errs['network']:.1e}, "
                                f"dropout mean {errs['dropout_expectation']:.1e}, {seconds:.1f} s")
    assert all(v < 1e-5 for v in layer_errs.values()), layer_errs
    assert errs["network"] < 1e-4
    # the averaged backward pass over 4000 masks has std ~ 0.004
    assert errs["dropout_expectation"] < 0.02
    assert seconds < 60


def test_fcn_equivalence(criterion):
    criterion("FCN equivalence")
    rng = np.random.default_rng(0)
    cube64 = rng.normal(size=(20, 15, 8))
    net64 = _random_net(NetworkConfig(bands=8, n_classes=4, width=8), 0, np.float64)
    img, ref = image_vs_patches(cube64, net64)
    bitwise = np.array_equal(img, ref)
    net32 = _random_net(NetworkConfig(bands=8, n_classes=4, width=8), 0, np.float32)
    img32, ref32 = image_vs_patches(cube64.astype(np.float32), net32)
    diff32 = float(np.max(np.abs(img32 - ref32)))
    criterion("FCN equivalence", f"float64 bitwise={bitwise}, float32 max diff {diff32:.1e}")
    assert bitwise
    assert diff32 <= 1e-5 * max(1.0, float(np.abs(ref32).max()))


def test_shape_arithmetic(criterion):
    criterion("bank shape arithmetic")
    rng = np.random.default_rng(1)
    extents = [tuple(int(v) for v in rng.integers(1, 40, size=2)) for _ in range(5)]
    bank = layers.FilterBank(3, 2, (1, 3, 5), dtype=np.float64)
    for h, w in extents:
        x = tensor.pad_spatial(rng.normal(size=(h, w, 3)), 2)
        pre = [conv.forward(x).shape[:2] for conv in bank.convs]
        assert pre == [(h + 4, w + 4), (h + 2, w + 2), (h, w)]
        for conv, window in zip(bank.convs, (5, 3, 1)):
            pooled, _ = tensor.maxpool2d_forward(conv.forward(x), window)
            assert pooled.shape[:2] == (h, w)
        assert bank.forward(x).shape == (h, w, 6)
    criterion("bank shape arithmetic", f"extents {extents}")


def test_parameter_counts(criterion):
    criterion("parameter counts")
    for kw in ([dict(width=w) for w in (64, 128, 192, 256)] + [dict(n_residual_modules=d) for d in range(4)]
               + [dict(bank_scales=s) for s in ((1,), (1, 3), (1, 3, 5), (1, 3, 5, 7))]):
        cfg = NetworkConfig(bands=103, n_classes=9, **kw)
        assert network.param_count(cfg) == sum(p.size for p in network.build(cfg).parameters())
    notes, ok = [], True
    for name, tol in (("pavia_university", 0.01), ("indian_pines", 0.03), ("salinas", 0.03)):
        p = presets.PRESETS[name]
        n = network.param_count(NetworkConfig(bands=p.shape[2], n_classes=p.n_classes, width=p.width)) / 1000
        rel = (n - p.reported_params) / p.reported_params
        notes.append(f"{name} {n:.1f}K vs {p.reported_params}K ({100 * rel:+.2f}%)")
        ok &= abs(rel) <= tol
    criterion("parameter counts", "; ".join(notes))
    assert ok


def test_split_counts_and_pools(criterion):
    criterion("split counts and pool sizes")
    notes = []
    for name in ("indian_pines", "salinas", "pavia_university"):
        p = presets.PRESETS[name]
        lab = synthetic.labels_with_sizes(p.sizes, width=256, seed=0)
        split = data.sample_split(lab, range(1, p.n_classes + 1), 200, seed=0)
        assert (split.n_train, split.n_test) == presets.REPORTED_TOTALS[name]
        cube = data.HSICube(np.zeros(lab.labels.shape + (1,), np.float32))
        pool = len(data.build_pool(cube, lab, split))
        assert pool == 4 * split.n_train
        notes.append(f"{name} {split.n_train}/{split.n_test} pool {pool / 1000:.1f}K "
                     f"(table {presets.REPORTED_POOL_K[name]}K)")
    assert len(data.build_pool(cube, lab, split)) == 7200
    criterion("split counts and pool sizes", "; ".join(notes))


def test_learning_rate_schedule(criterion):
    criterion("learning-rate schedule")
    plan = optim.TrainPlan()
    got = [optim.lr_at(plan, i) for i in (0, 40000, 70000)]
    criterion("learning-rate schedule", f"{got}")
    assert got == [0.001, 0.0001, 0.00001]


# --- training criteria on the synthetic scene --------------------------------------------

# Inputs are standardised then multiplied by INPUT_GAIN: with the small default
# initialisation and standardised inputs the signal reaching the classifier is too
# weak to learn from within 2,000 iterations.
INPUT_GAIN = 1000.0
OVERFIT_PLAN = dict(base_lr=0.005, batch_size=64, max_iters=2000, step_iters=())
_RUNS = {}


def synthetic_run(seed, plain=0):
    if (seed, plain) not in _RUNS:
        cube, lab = synthetic.make_scene(48, 48, 32, 8, block=4, noise=0.3, seed=seed)
        split = data.sample_split(lab, range(1, 9), 20, seed=seed)
        scaled, _, _ = data.standardize(cube, split.train_pixels())
        scaled = data.HSICube(scaled.values * np.float32(INPUT_GAIN))
        pool = data.build_pool(scaled, lab, split)
        cfg = NetworkConfig(bands=32, n_classes=8, width=32, dropout_rate=0.0, plain_modules=plain)
        t0 = time.perf_counter()
        net, log = optim.train(network.build(cfg, seed=seed), pool,
                               optim.TrainPlan(**OVERFIT_PLAN, seed=seed), every_iteration=True)
        _RUNS[seed, plain] = dict(net=net, log=log, pool=pool, cube=scaled, lab=lab, split=split,
                                  seconds=time.perf_counter() - t0)
    return _RUNS[seed, plain]


def test_overfit_sanity(criterion):
    criterion("overfit sanity")
    run = synthetic_run(0)
    acc = optim.pool_accuracy(run["net"], run["pool"])
    criterion("overfit sanity", f"training accuracy {acc:.2f}% in {run['seconds']:.1f} s")
    assert acc >= 99.0
    assert run["seconds"] < 300


def test_residual_learning_effect(criterion):
    criterion("residual learning effect")
    pairs = [(synthetic_run(s)["log"].tail_loss(), synthetic_run(s, plain=1)["log"].tail_loss()) for s in range(3)]
    criterion("residual learning effect", ", ".join(f"seed {s}: residual {r:.2e} vs plain {p:.3f}" for s, (r, p) in enumerate(pairs)))
    assert all(r < p for r, p in pairs)


def test_boundary_analysis(criterion):
    criterion("boundary analysis")
    lab = np.ones((8, 8), dtype=np.int64)
    lab[:, 4:] = 2
    cats = evaluation.boundary_distance(lab)
    hand = np.tile([2, 2, 1, 0, 0, 1, 2, 2], (8, 1))
    assert np.array_equal(cats, hand)
    assert np.array_equal(cats, oracles.boundary_brute(lab))
    run = synthetic_run(0)
    pred = network.predict(run["net"], run["cube"]) + 1
    rep = evaluation.fp_by_category(pred, run["lab"], run["split"].test_pixels())
    pct = rep.percentage
    criterion("boundary analysis", "fixture exact; error % by category " + ", ".join(f"{p:.2f}" for p in pct))
    assert pct[0] >= pct[2]


def test_format_round_trips(criterion, tmp_path):
    criterion("format round trips")
    rng = np.random.default_rng(2)
    cube = data.HSICube(rng.normal(size=(6, 5, 4)))
    lab = data.LabelMap(rng.integers(0, 4, size=(6, 5)).astype(np.uint16), n_classes=3)
    net = network.build(NetworkConfig(bands=4, n_classes=3, width=3), seed=1)
    pairs = (
        (data.write_hsic, data.read_hsic, cube, "c.hsic"),
        (data.write_hsil, data.read_hsil, lab, "l.hsil"),
        (lambda o, p: network.save_weights(o, p), network.load_weights, net, "w.hsiw"),
    )
    for write, read, obj, name in pairs:
        a, b = tmp_path / name, tmp_path / ("2" + name)
        write(obj, a)
        write(read(a), b)
        assert a.read_bytes() == b.read_bytes(), name
    decoded = []
    for il in ("bsq", "bil", "bip"):
        data.write_envi(cube.values, tmp_path / f"{il}.hdr", tmp_path / f"{il}.raw", il)
        decoded.append(data.read_envi(tmp_path / f"{il}.hdr", tmp_path / f"{il}.raw").values)
    assert all(np.array_equal(d, cube.values) for d in decoded)
    rejected = 0
    corpus = [(p, data.read_hsic) for p in hsic_corpus().values()]
    corpus += [(p, network.load_weights) for p, _ in corrupt_weight_corpus().values()]
    for i, (payload, read) in enumerate(corpus):
        path = tmp_path / f"bad{i}"
        path.write_bytes(payload)
        with pytest.raises(FormatError) as info:
            read(path)
        assert str(path) in str(info.value) and info.value.offset is not None
        rejected += 1
    criterion("format round trips", f"HSIC/HSIL/HSIW byte-identical, 3 interleaves agree, {rejected} corrupt files rejected")


# --- full-scale reproduction ----------------------------------------------------------

DATA_DIR = os.environ.get("HSICNN_DATA_DIR", "")
FULL_TARGETS = {"indian_pines": 91.0, "pavia_university": 93.5}


@pytest.mark.extended
@pytest.mark.parametrize("name", list(FULL_TARGETS))
def test_full_reproduction(criterion, name):
    criterion(f"full reproduction ({name})")
    root = Path(DATA_DIR)
    cube_path, lab_path = root / f"{name}.hsic", root / f"{name}.hsil"
    if not DATA_DIR or not cube_path.exists() or not lab_path.exists():
        pytest.skip(f"set HSICNN_DATA_DIR to a directory holding {name}.hsic and {name}.hsil")
    p = presets.PRESETS[name]
    cube = data.read_hsic(cube_path)
    lab = data.select_classes(data.read_hsil(lab_path), p.classes)
    cfg = NetworkConfig(bands=cube.B, n_classes=p.n_classes, width=p.width)
    result = evaluation.run_protocol(cube, lab, cfg, optim.TrainPlan(), n_partitions=3)
    criterion(f"full reproduction ({name})", f"OA {result.summary()} vs target {FULL_TARGETS[name]}")
    assert result.mean >= FULL_TARGETS[name]
