"""Sequence training, spec fitting and retraining in the quantized domain."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import netcore
from .quantizer import (SIGNAL_BOUNDED_SYM, SIGNAL_BOUNDED_UNIT, SIGNAL_SYM,
                        SIGNAL_UNBOUNDED, ActivationStats, fixed_step_size,
                        optimize_relu_step_size, optimize_step_size)

log = logging.getLogger(__name__)

EVAL_BATCH = 64


@dataclass
class TrainConfig:
    initial_lr: float = 1e-5
    final_lr: float = 1e-8
    momentum: float = 0.9
    optimizer: str = "adadelta"
    adadelta_rho: float = 0.95
    adadelta_eps: float = 1e-6
    max_epochs: int = 100
    patience: float = 5
    seed: int = 0
    batch_size: int = 8
    bptt_steps: int = 64

    def __post_init__(self):
        if not 0 < self.final_lr <= self.initial_lr:
            raise ValueError("need 0 < final_lr <= initial_lr")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.optimizer not in ("adadelta", "nesterov"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class RetrainPlan:
    weights: dict = field(default_factory=dict)
    signals: dict = field(default_factory=dict)
    epochs: int = 20
    config: TrainConfig = field(default_factory=TrainConfig)

    @property
    def empty(self):
        return not self.weights and not self.signals


@dataclass
class TrainResult:
    model: netcore.MasterModel
    curve: list
    best_epoch: int = 0
    best_valid_miss: float = float("nan")
    test_miss: float = float("nan")


def adadelta_update(grad, accumulators, rho=0.95, eps=1e-6):
    """One AdaDelta step.  Returns ``(delta, (mean_sq_grad, mean_sq_delta))``."""
    eg2, edx2 = accumulators
    eg2 = rho * eg2 + (1.0 - rho) * grad * grad
    delta = -np.sqrt(edx2 + eps) / np.sqrt(eg2 + eps) * grad
    edx2 = rho * edx2 + (1.0 - rho) * delta * delta
    return delta, (eg2, edx2)


class AdaDelta:
    """AdaDelta with the scheduled learning rate applied as a relative step
    scale (``lr / initial_lr``); the accumulators see the unscaled update."""

    def __init__(self, params, config):
        self.rho, self.eps = config.adadelta_rho, config.adadelta_eps
        self.base = config.initial_lr
        self.acc = {k: (np.zeros_like(v), np.zeros_like(v)) for k, v in params.items()}

    def step(self, params, grads, lr):
        scale = lr / self.base
        for k, g in grads.items():
            delta, self.acc[k] = adadelta_update(g, self.acc[k], self.rho, self.eps)
            params[k] += scale * delta


class Nesterov:
    def __init__(self, params, config):
        self.mu = config.momentum
        self.vel = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads, lr):
        for k, g in grads.items():
            v = self.vel[k]
            v *= self.mu
            v -= lr * g
            params[k] += self.mu * v - lr * g


def _optimizer(params, config):
    cls = AdaDelta if config.optimizer == "adadelta" else Nesterov
    return cls(params, config)


def predict(model, samples, mode="float"):
    out = []
    for i in range(0, len(samples), EVAL_BATCH):
        post, _ = netcore.forward_batch(model, samples[i:i + EVAL_BATCH], mode)
        out.append(post)
    return np.concatenate(out) if out else np.zeros((0, model.graph.output_classes))


def evaluate(model, samples, mode="float"):
    """Miss classification rate (%).  Ties go to the lowest class index."""
    if not samples:
        raise ValueError("cannot evaluate on an empty split")
    post = predict(model, samples, mode)
    labels = np.array([s.label for s in samples])
    return 100.0 * float(np.mean(post.argmax(axis=1) != labels))


def _loss(model, samples, mode):
    post = predict(model, samples, mode)
    labels = np.array([s.label for s in samples])
    return float(-np.mean(np.log(np.maximum(post[np.arange(len(samples)), labels], 1e-300))))


def _fit_loop(model, split, config, mode, on_epoch_end=None, max_epochs=None):
    if not split.train:
        raise ValueError("empty training set")
    valid = split.valid or split.train
    max_epochs = config.max_epochs if max_epochs is None else max_epochs
    model = model.copy()
    rng = np.random.default_rng(config.seed)
    opt = _optimizer(model.params, config)
    lr = config.initial_lr
    best = model.copy()
    best_key = (evaluate(model, valid, mode), _loss(model, valid, mode))
    best_epoch, stale = 0, 0
    curve = []
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(len(split.train))
        losses = []
        for i in range(0, len(order), config.batch_size):
            batch = [split.train[j] for j in order[i:i + config.batch_size]]
            grads, loss = netcore.forward_backward(
                model, batch, [s.label for s in batch], mode, config.bptt_steps)
            opt.step(model.params, grads, lr)
            losses.append(loss)
        if on_epoch_end is not None:
            model = on_epoch_end(model)
        miss = evaluate(model, valid, mode)
        key = (miss, _loss(model, valid, mode))
        curve.append(dict(epoch=epoch, train_loss=float(np.mean(losses)),
                          valid_miss=miss, lr=lr))
        if key < best_key:
            best, best_key, best_epoch, stale = model.copy(), key, epoch, 0
        else:
            stale += 1
            if stale >= config.patience:
                lr /= 2.0
                stale = 0
                if lr < config.final_lr:
                    log.info("stopping at epoch %d: lr %.3g below floor", epoch, lr)
                    break
    return TrainResult(best, curve, best_epoch, best_key[0])


def train_float(model, split, config):
    """Train with early stopping; returns the best-validation weights."""
    return _fit_loop(model, split, config, "float")


# quantizer fitting

def collect_signal_stats(model, samples, groups, seed=0, mode="float"):
    """Run ``samples`` through the model recording the named signal groups."""
    kinds = model.graph.signal_groups()
    stats = {g: ActivationStats(g, seed=seed, signed=kinds[g] == SIGNAL_SYM)
             for g in groups}
    hooks = {g: stats[g].update for g in groups}
    for i in range(0, len(samples), EVAL_BATCH):
        netcore.forward_batch(model, samples[i:i + EVAL_BATCH], mode, hooks=hooks)
    return stats


def fit_weight_specs(model, weight_bits):
    specs = {}
    for group, bits in weight_bits.items():
        values = model.group_values(group)
        if not np.any(values != 0):
            log.warning("weight group %s is all zeros; left unquantized", group)
            continue
        specs[group] = optimize_step_size(values, bits, group)
    return specs


def fit_signal_specs(model, signal_bits, samples, seed=0):
    kinds = model.graph.signal_groups()
    unknown = set(signal_bits) - set(kinds)
    if unknown:
        raise KeyError(f"unknown signal groups {sorted(unknown)}")
    specs = {}
    to_collect = [g for g in signal_bits if kinds[g] in (SIGNAL_UNBOUNDED, SIGNAL_SYM)]
    stats = collect_signal_stats(model, samples, to_collect, seed) if to_collect else {}
    for group, bits in signal_bits.items():
        kind = kinds[group]
        if kind in (SIGNAL_BOUNDED_SYM, SIGNAL_BOUNDED_UNIT):
            specs[group] = fixed_step_size(kind, bits, group)
        elif kind == SIGNAL_UNBOUNDED:
            specs[group] = optimize_relu_step_size(stats[group], bits)
        else:
            specs[group] = optimize_step_size(stats[group].values, bits, group, kind)
    return specs


def attach_specs(model, weight_bits, signal_bits, samples, seed=0):
    """Copy of ``model`` with L2-fitted weight specs and signal specs
    (fixed for bounded activations, fitted on ``samples`` otherwise)."""
    unknown = set(weight_bits) - set(model.graph.weight_groups())
    if unknown:
        raise KeyError(f"unknown weight groups {sorted(unknown)}")
    out = model.copy()
    out.weight_specs = fit_weight_specs(model, weight_bits)
    out.signal_specs = fit_signal_specs(model, signal_bits, samples, seed) if signal_bits else {}
    return out


def refit_weight_specs(model):
    """Re-fit every attached weight spec at its current bit width."""
    out = model.copy()
    out.weight_specs = fit_weight_specs(
        model, {g: s.bits for g, s in model.weight_specs.items()})
    return out


def retrain_quantized(model, plan, split):
    """Fine-tune float master weights through quantized forward passes.

    Specs are fitted for the plan's groups first, weight step sizes are
    refitted after every epoch, and the returned result carries the
    quantized test miss rate of the best-validation model.
    """
    start = attach_specs(model, plan.weights, plan.signals, split.train,
                         plan.config.seed)
    hook = refit_weight_specs if start.weight_specs else None
    result = _fit_loop(start, split, plan.config, "quantized", hook, plan.epochs)
    if split.test:
        result.test_miss = evaluate(result.model, split.test, "quantized")
    return result


def write_curve(curve, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "valid_miss", "lr"],
                           lineterminator="\n")
        w.writeheader()
        for row in curve:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
