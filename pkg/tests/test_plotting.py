import numpy as np
import pytest

from hsicnn import evaluation, optim, plotting

PNG = b"\x89PNG\r\n\x1a\n"


def _history():
    log = optim.TrainLog()
    for i, lr in zip(range(0, 100, 10), [0.01] * 5 + [0.001] * 5):
        log.append(i, lr, 2.0 / (1 + i), 0.1 * i)
    log.accuracy[49] = 60.0
    return log


def _report():
    labels = np.array([[1, 1, 2, 2], [3, 3, 1, 2]])
    pred = np.array([[1, 2, 2, 2], [3, 1, 1, 2]])
    return evaluation.evaluate(pred, labels, np.argwhere(labels > 0), 4, ["a", "b", "c", "d"])


CASES = {
    "training": lambda p: plotting.plot_training(_history(), p, title="run"),
    "confusion": lambda p: plotting.plot_confusion(_report(), p),
    "sweep": lambda p: plotting.plot_sweep("width", [4, 8], [80.0, 85.0], [1.0, 0.0], [1.0, 2.0], p),
    "partitions": lambda p: plotting.plot_partitions([0, 1, 2], np.array([90.0, 91.5, 89.0]), p),
    "boundary": lambda p: plotting.plot_boundary(evaluation.BoundaryReport(np.array([3, 1, 0]), np.array([10, 5, 0])), p),
}


@pytest.mark.parametrize("name", list(CASES))
def test_plots_are_deterministic_pngs(tmp_path, name):
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    CASES[name](a)
    CASES[name](b)
    payload = a.read_bytes()
    assert payload[:8] == PNG and len(payload) > 1000
    assert payload == b.read_bytes()
