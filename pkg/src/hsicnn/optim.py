"""Mini-batch SGD with momentum, L2 weight decay and a stepped learning rate."""
import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, NonFiniteError
from .layers import softmax_xent
from .network import backward_patch, forward_patch, save_weights

log = logging.getLogger(__name__)


@dataclass
class TrainPlan:
    base_lr: float = 0.001
    gamma: float = 0.1
    step_iters: tuple = (33333, 66666)
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 10
    max_iters: int = 100000
    seed: int = 0
    augmentation: bool = True
    snapshot_every: int = 0
    log_every: int = 100

    def __post_init__(self):
        self.step_iters = tuple(int(s) for s in self.step_iters)
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.max_iters < 0:
            raise ValueError("batch_size must be >= 1 and max_iters >= 0")
        if any(b <= a for a, b in zip(self.step_iters, self.step_iters[1:])):
            raise ValueError(f"step_iters must be strictly increasing, got {self.step_iters}")
        if self.step_iters and self.max_iters and self.step_iters[-1] >= self.max_iters:
            raise ValueError(f"step_iters {self.step_iters} must lie below max_iters {self.max_iters}")

    def scaled(self, max_iters):
        """Same schedule shape compressed (or stretched) to ``max_iters`` iterations."""
        f = max_iters / self.max_iters
        steps = tuple(int(s * f) for s in self.step_iters)
        return TrainPlan(**{**self.__dict__, "max_iters": max_iters, "step_iters": steps})


def lr_at(plan, iteration):
    # one multiplication per drop, so 0.001 * 0.1 * 0.1 lands exactly on 1e-05
    lr = plan.base_lr
    for s in plan.step_iters:
        if s <= iteration:
            lr *= plan.gamma
    return lr


def sgd_step(params, grads, velocity, lr, momentum, weight_decay):
    """In-place ``v = momentum * v - lr * (g + wd * p); p += v``."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient; step aborted")
    for p, g, v in zip(params, grads, velocity):
        v *= momentum
        v -= lr * (g + weight_decay * p)
        p += v
    return params, velocity


@dataclass
class TrainLog:
    iterations: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    accuracy: dict = field(default_factory=dict)  # iteration -> held-out accuracy (percent)

    def append(self, iteration, lr, loss, seconds):
        if self.iterations and iteration <= self.iterations[-1]:
            raise ValueError("log iterations must increase")
        self.iterations.append(iteration)
        self.lrs.append(lr)
        self.losses.append(loss)
        self.seconds.append(seconds)

    def tail_loss(self, fraction=0.1):
        n = max(1, int(round(len(self.losses) * fraction)))
        return float(np.mean(self.losses[-n:]))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["iteration", "lr", "loss", "accuracy", "seconds"])
            for it, lr, loss, sec in zip(self.iterations, self.lrs, self.losses, self.seconds):
                acc = self.accuracy.get(it)
                wr.writerow([it, repr(lr), repr(loss), "" if acc is None else f"{acc:.4f}", f"{sec:.3f}"])

    @classmethod
    def read_csv(cls, path):
        out = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                it = int(row["iteration"])
                out.append(it, float(row["lr"]), float(row["loss"]), float(row["seconds"]))
                if row["accuracy"]:
                    out.accuracy[it] = float(row["accuracy"])
        return out


def train(net, pool, plan, eval_fn=None, eval_every=0, snapshot_path=None, every_iteration=False):
    """Train ``net`` in place on ``pool`` (a :class:`~hsicnn.data.PatchPool`).

    Each iteration draws ``batch_size`` pool entries uniformly with
    replacement, averages the centre-pixel softmax loss and takes one SGD
    step.  ``eval_fn(net) -> percent`` is called in eval mode every
    ``eval_every`` iterations.  The loss is logged every ``plan.log_every``
    iterations (every iteration with ``every_iteration``); logged values are
    single-batch means.
    """
    if len(pool) < 1:
        raise ValueError("training pool is empty")
    if plan.augmentation != pool.augmentation:
        log.warning("plan.augmentation=%s but pool.augmentation=%s; using the pool", plan.augmentation, pool.augmentation)
    rng = np.random.default_rng(plan.seed)
    params, grads, vel = net.parameters(), net.gradients(), net.velocities()
    history = TrainLog()
    start = time.perf_counter()
    step = 1 if every_iteration else max(1, plan.log_every)

    for it in range(plan.max_iters):
        idx = rng.integers(0, len(pool), size=plan.batch_size)
        x, y = pool.batch(idx)
        net.zero_grad()
        try:
            logits = forward_patch(net, x, mode="train")
            loss, grad = softmax_xent(logits, y)
            if not np.isfinite(loss):
                raise DivergenceError("non-finite training loss", it)
            backward_patch(net, grad)
        except NonFiniteError as exc:
            raise DivergenceError(f"training diverged: {exc}", it) from exc
        lr = lr_at(plan, it)
        try:
            sgd_step(params, grads, vel, lr, plan.momentum, plan.weight_decay)
        except DivergenceError as exc:
            raise DivergenceError(str(exc), it) from exc

        due = eval_fn is not None and eval_every and (it + 1) % eval_every == 0
        if due or it % step == 0 or it == plan.max_iters - 1:
            history.append(it, lr, loss, time.perf_counter() - start)
        if due:
            net.eval()
            history.accuracy[it] = float(eval_fn(net))
        if snapshot_path is not None and plan.snapshot_every and (it + 1) % plan.snapshot_every == 0:
            save_weights(net, str(snapshot_path).format(iteration=it + 1))
    net.eval()
    return net, history


def pool_accuracy(net, pool, batch=256):
    """Percent of un-mirrored pool patches whose centre pixel is classified correctly."""
    net.eval()
    correct = 0
    for i in range(0, len(pool.patches), batch):
        logits = forward_patch(net, pool.patches[i:i + batch], mode="eval")
        correct += int(np.sum(np.argmax(logits, axis=-1) == pool.labels[i:i + batch]))
    return 100.0 * correct / len(pool.patches)
