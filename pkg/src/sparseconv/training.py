"""Momentum SGD, incremental densification, evaluation, run records."""

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, TrainingDiverged
from .layers import SparseConv
from .network import Network, cost_report


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 2
    seed: int = 0
    eval_every: int = 200
    precision: int = 32
    lr_decay: float = 1.0  # per-epoch multiplicative step decay

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0,1), got {self.momentum}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError(f"lr_decay must lie in (0,1], got {self.lr_decay}")
        return self

    def to_json_dict(self):
        return {
            "batch_size": self.batch_size, "lr": self.lr, "momentum": self.momentum,
            "epochs": self.epochs, "seed": self.seed, "eval_every": self.eval_every,
            "precision": self.precision, "lr_decay": self.lr_decay,
        }

    @classmethod
    def from_json_dict(cls, d):
        known = {f: d[f] for f in (
            "batch_size", "lr", "momentum", "epochs", "seed", "eval_every",
            "precision", "lr_decay") if f in d}
        return cls(**known).validate()


@dataclass(frozen=True)
class DensifySchedule:
    """Density targets over training: start at initial_density and double
    every `period` steps until the cap."""

    initial_density: float = 0.01
    period: int = 1000
    growth: str = "double"  # double | none
    cap: float = 1.0
    new_weights: str = "fresh"  # fresh | zero

    def validate(self):
        if not 0.0 < self.initial_density <= 1.0:
            raise ConfigError(
                f"initial_density must lie in (0,1], got {self.initial_density}"
            )
        if self.period < 1:
            raise ConfigError(f"period must be >= 1, got {self.period}")
        if self.growth not in ("double", "none"):
            raise ConfigError(f"growth must be double|none, got {self.growth!r}")
        if self.new_weights not in ("fresh", "zero"):
            raise ConfigError(f"new_weights must be fresh|zero, got {self.new_weights!r}")
        if not 0.0 < self.cap <= 1.0:
            raise ConfigError(f"cap must lie in (0,1], got {self.cap}")
        return self

    def to_json_dict(self):
        return {
            "initial_density": self.initial_density, "period": self.period,
            "growth": self.growth, "cap": self.cap, "new_weights": self.new_weights,
        }

    @classmethod
    def from_json_dict(cls, d):
        known = {f: d[f] for f in (
            "initial_density", "period", "growth", "cap", "new_weights") if f in d}
        return cls(**known).validate()

    def doublings_to_full(self):
        if self.growth == "none" or self.initial_density >= self.cap:
            return 0
        return math.ceil(math.log2(self.cap / self.initial_density))


def target_density(schedule, step):
    """min(cap, d0 * 2^(step // period)) for the doubling growth rule."""
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    if schedule.growth == "none":
        return schedule.initial_density
    return min(schedule.cap, schedule.initial_density * 2.0 ** (step // schedule.period))


def apply_densification(net, schedule, step, rng):
    """Grow every sparse conv mask to the schedule's target density.

    Adds uniformly chosen inactive connections per layer until each mask
    holds at least ceil(target * n_in * n_out) entries; existing weights
    are untouched. Returns True when any layer changed; the per-layer
    storage remap is left on the layer as `last_growth_map` for the
    optimizer to consume.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    target = target_density(schedule, step)
    changed = False
    for layer in net.sparse_layers():
        total = layer.c_in * layer.c_out
        want = min(total, math.ceil(target * total))
        have = layer.active_connections()
        if want <= have:
            continue
        inactive = np.argwhere(~layer.mask.active)
        picks = inactive[rng.choice(len(inactive), size=want - have, replace=False)]
        remap = layer.add_connections(picks, rng, init=schedule.new_weights)
        layer.last_growth_map = remap
        changed = True
    return changed


def sgd_update(param, grad, velocity, lr, momentum):
    """Classic momentum update: v <- momentum*v + g; w <- w - lr*v."""
    velocity *= momentum
    velocity += grad
    param -= lr * velocity


class Trainer:
    """Owns one network plus its optimizer state for one training run."""

    def __init__(self, net, config):
        self.net = net
        self.config = config.validate()
        self.lr = config.lr
        self.velocities = {
            name: np.zeros_like(arr) for name, arr in net.param_blocks()
        }

    def _remap_velocities(self):
        for idx, layer in enumerate(self.net._stack()):
            remap = getattr(layer, "last_growth_map", None)
            if remap is None:
                continue
            key = f"layer{idx}.values"
            old_v = self.velocities[key]
            new_v = np.zeros_like(layer.values)
            new_v[remap] = old_v
            self.velocities[key] = new_v
            del layer.last_growth_map

    def densify(self, schedule, step, rng):
        if apply_densification(self.net, schedule, step, rng):
            self._remap_velocities()
            return True
        return False

    def step(self, x, y):
        """One SGD step; returns the pre-update batch loss."""
        stack = self.net._stack()
        logits = self.net.forward(x, train=True)
        loss, dlogits = _loss_with_grad_check(self.net, logits, y, x)
        g = dlogits
        for layer in reversed(stack):
            g = layer.backward(g)
        for idx, layer in enumerate(stack):
            for pname, arr in layer.param_items():
                sgd_update(arr, layer.grads[pname],
                           self.velocities[f"layer{idx}.{pname}"],
                           self.lr, self.config.momentum)
        return loss

    def end_epoch(self):
        self.lr *= self.config.lr_decay


def _loss_with_grad_check(net, logits, labels, x):
    from . import ops

    loss, dlogits = ops.softmax_xent(logits, labels)
    if not np.isfinite(loss):
        diag = []
        h = np.ascontiguousarray(x, dtype=net.dtype)
        for idx, layer in enumerate(net._stack()):
            h = layer.forward(h, train=False)
            diag.append(
                f"layer{idx} ({type(layer).__name__}): "
                f"max|a|={np.abs(h).max():.3e} mean|a|={np.abs(h).mean():.3e}"
            )
        raise TrainingDiverged(
            f"loss became non-finite ({loss}); activation norms follow",
            diagnostics=diag,
        )
    return loss, dlogits


@dataclass
class EvalPoint:
    step: int
    density: float
    params: int
    madds: int
    train_loss: float
    test_accuracy: float

    def to_json_dict(self):
        return {
            "step": self.step, "density": self.density, "params": self.params,
            "madds": self.madds, "train_loss": self.train_loss,
            "test_accuracy": self.test_accuracy,
        }


@dataclass
class RunRecord:
    seed: int
    config: dict
    points: list = field(default_factory=list)
    wall_time_s: float = 0.0

    @property
    def final(self):
        return self.points[-1]

    def check_invariants(self):
        steps = [p.step for p in self.points]
        if steps != sorted(set(steps)):
            raise ConfigError("eval steps must be strictly increasing")
        dens = [p.density for p in self.points]
        if any(b < a - 1e-12 for a, b in zip(dens, dens[1:])):
            raise ConfigError("density must be non-decreasing")
        return self


def evaluate(net, dataset, batch_size=512):
    """Top-1 accuracy of net.predict over the dataset, deterministic."""
    hits = 0
    for lo in range(0, len(dataset), batch_size):
        batch = dataset.images[lo:lo + batch_size]
        hits += int((net.predict(batch) == dataset.labels[lo:lo + batch_size]).sum())
    return hits / len(dataset)


def batch_stream(n, batch_size, epochs, seed):
    """Deterministic shuffled batch index stream, reshuffled per epoch."""
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n - batch_size + 1, batch_size):
            yield epoch, order[lo:lo + batch_size]


def run_training(arch, masks, train_set, test_set, config, schedule=None,
                 jsonl_path=None, label=None):
    """Train one network and record eval points.

    Fully determined by (arch, masks, data, config, schedule): the same
    seed gives the same batch order, init, densification draws, and so
    the same RunRecord (wall time aside).
    """
    config.validate()
    if schedule is not None:
        schedule.validate()
    net = Network.build(arch, masks=masks, seed=config.seed, precision=config.precision)
    trainer = Trainer(net, config)
    densify_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xD15F]))
    record = RunRecord(seed=config.seed, config={
        "train": config.to_json_dict(),
        "densify": schedule.to_json_dict() if schedule else None,
        "label": label,
    })
    sink = open(jsonl_path, "w") if jsonl_path else None
    started = time.time()
    try:
        if sink:
            sink.write(json.dumps(
                {"type": "run", **record.config, "seed": config.seed},
                sort_keys=True) + "\n")

        def snapshot(step, loss):
            cost = cost_report(net)
            point = EvalPoint(
                step=step,
                density=net.density(),
                params=cost.params_total,
                madds=cost.madds_total,
                train_loss=float(loss),
                test_accuracy=evaluate(net, test_set),
            )
            record.points.append(point)
            if sink:
                sink.write(json.dumps(
                    {"type": "eval", **point.to_json_dict()}, sort_keys=True) + "\n")
                sink.flush()

        step = 0
        loss = float("nan")
        last_epoch = 0
        for epoch, idx in batch_stream(len(train_set), config.batch_size,
                                       config.epochs, config.seed):
            if epoch != last_epoch:
                trainer.end_epoch()
                last_epoch = epoch
            if schedule is not None:
                trainer.densify(schedule, step, densify_rng)
            loss = trainer.step(train_set.images[idx], train_set.labels[idx])
            step += 1
            if step % config.eval_every == 0:
                snapshot(step, loss)
        if not record.points or record.points[-1].step != step:
            snapshot(step, loss)
        record.wall_time_s = time.time() - started
        if sink:
            sink.write(json.dumps(
                {"type": "summary", "wall_time_s": record.wall_time_s,
                 "final_accuracy": record.final.test_accuracy}, sort_keys=True) + "\n")
        return net, record.check_invariants()
    finally:
        if sink:
            sink.close()
