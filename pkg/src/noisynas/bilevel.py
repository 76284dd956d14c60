"""Search dynamics: alternating architecture and weight updates.

The architecture gradient is either the plain validation gradient
(first order) or the single-unrolling estimate (second order): take a
virtual momentum-SGD step on the training batch, differentiate the
validation loss at the stepped weights, and correct with a
finite-difference Hessian-vector product through the training loss.
Weights are restored bit-identically after every estimate.

Models are duck-typed: anything exposing ``weight_params()``,
``alpha_params()`` and ``loss_on(batch) -> LossReport`` can be searched;
``frozen_noise()`` is optional and pins stochastic draws during the
finite-difference evaluations.
"""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .objective import LossReport, nas_loss
from .tensor import Tensor, gradients, no_grad, zero_grads

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite; carries epoch/step context."""

    def __init__(self, message: str, epoch: int, step: int):
        super().__init__(f"{message} (epoch {epoch}, step {step})")
        self.epoch = epoch
        self.step = step


@dataclass
class SearchConfig:
    """Optimization settings for both phases."""

    epochs: int = 50
    batch_size: int = 96
    w_lr: float = 0.025
    w_lr_min: float = 0.0
    w_momentum: float = 0.9
    w_weight_decay: float = 3e-4
    cosine: bool = True
    arch_lr: float = 3e-4
    arch_weight_decay: float = 1e-3
    order: str = "second"
    eta: float = 0.025
    fd_scale: float = 0.01

    def __post_init__(self):
        if self.order not in ("first", "second"):
            raise ValueError(f"order must be 'first' or 'second', got {self.order!r}")
        if self.order == "second" and self.eta <= 0:
            raise ValueError("second-order search needs eta > 0")
        for name in ("w_lr", "arch_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Half-cosine anneal from lr_max (step 0) to lr_min (step total)."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def sgd_step(param: Tensor, grad: np.ndarray, velocity: np.ndarray, lr: float,
             momentum: float, weight_decay: float) -> np.ndarray:
    """v <- momentum*v + (grad + wd*param); param <- param - lr*v."""
    v = momentum * velocity + (grad + weight_decay * param.data)
    param.data = param.data - lr * v
    return v


class MomentumSGD:
    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray] | None = None) -> None:
        for k, p in self.params.items():
            g = grads[k] if grads is not None else p.grad
            if g is None:
                continue
            self.velocity[k] = sgd_step(p, g, self.velocity[k], self.lr,
                                        self.momentum, self.weight_decay)


class Adam:
    """Adaptive-moment optimizer for the architecture logits."""

    def __init__(self, params: dict[str, Tensor], lr: float = 3e-4, beta1: float = 0.5,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 1e-3):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray] | None = None) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            g = grads[k] if grads is not None else p.grad
            if g is None:
                continue
            g = g + self.weight_decay * p.data
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _frozen_noise(model):
    ctx = getattr(model, "frozen_noise", None)
    return ctx() if ctx is not None else contextlib.nullcontext()


def _global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def arch_grad_first_order(model, val_batch) -> dict[str, np.ndarray]:
    """Validation-loss gradient of the architecture logits at the current
    weights (the eta = 0 degenerate case of the unrolled estimate)."""
    alphas = model.alpha_params()
    report = model.loss_on(val_batch)
    return gradients(report.total, alphas)


def arch_grad_second_order(model, trn_batch, val_batch, eta: float, *,
                           w_momentum: float = 0.0, w_weight_decay: float = 0.0,
                           velocity: dict[str, np.ndarray] | None = None,
                           fd_scale: float = 0.01) -> dict[str, np.ndarray]:
    """Single-unrolling architecture gradient.

    1. virtual momentum step on the training batch: w' = w - eta*(m*v + g + wd*w)
    2. g_alpha, g_w = gradients of the validation loss at (w', alpha)
    3. hvp via central differences over the training loss at w +- eps*g_w
    4. return g_alpha - eta * hvp, with weights restored exactly
    """
    if eta == 0.0:
        return arch_grad_first_order(model, val_batch)
    weights = model.weight_params()
    alphas = model.alpha_params()
    original = {k: w.data for k, w in weights.items()}

    with _frozen_noise(model):
        try:
            g_trn = gradients(model.loss_on(trn_batch).total, weights)
            for k, w in weights.items():
                v = velocity[k] if velocity is not None else 0.0
                step = w_momentum * v + g_trn[k] + w_weight_decay * original[k]
                w.data = original[k] - eta * step

            val_report = model.loss_on(val_batch)
            zero_grads(weights)
            g_alpha = gradients(val_report.total, alphas)
            g_w_val = {k: (w.grad if w.grad is not None else np.zeros_like(w.data))
                       for k, w in weights.items()}

            norm = _global_norm(g_w_val)
            if norm == 0.0:
                log.warning("validation weight gradient vanished; skipping the "
                            "second-order correction")
                return g_alpha
            eps = fd_scale / norm

            for k, w in weights.items():
                w.data = original[k] + eps * g_w_val[k]
            ga_plus = gradients(model.loss_on(trn_batch).total, alphas)
            for k, w in weights.items():
                w.data = original[k] - eps * g_w_val[k]
            ga_minus = gradients(model.loss_on(trn_batch).total, alphas)

            return {k: g_alpha[k] - eta * (ga_plus[k] - ga_minus[k]) / (2 * eps)
                    for k in alphas}
        finally:
            for k, w in weights.items():
                w.data = original[k]
            zero_grads(weights)
            zero_grads(alphas)


class SupernetTrainer:
    """Binds a network to the objective so the bilevel routines can treat
    it as a plain model with scalar losses over batches."""

    def __init__(self, net, beta: float, mu_mode: str = "pooled",
                 kl_aggregate: str = "mean"):
        self.net = net
        self.beta = beta
        self.mu_mode = mu_mode
        self.kl_aggregate = kl_aggregate

    def weight_params(self):
        return self.net.weight_params()

    def alpha_params(self):
        return self.net.alpha_params()

    def frozen_noise(self):
        return self.net.frozen_noise()

    def loss_on(self, batch, train: bool = True) -> LossReport:
        logits, sites = self.net.forward(batch.inputs, train=train)
        return nas_loss(logits, batch.onehot, sites, self.beta, self.mu_mode,
                        self.kl_aggregate)

    def accuracy(self, batch) -> float:
        with no_grad():
            logits, _ = self.net.forward(batch.inputs, train=False)
        return float((logits.data.argmax(axis=1) == batch.labels).mean())

    def eval_report(self, batch) -> tuple[LossReport, float]:
        """Deterministic loss decomposition and accuracy on a batch."""
        with no_grad():
            logits, sites = self.net.forward(batch.inputs, train=False)
            report = nas_loss(logits, batch.onehot, sites, self.beta, self.mu_mode,
                              self.kl_aggregate)
        return report, float((logits.data.argmax(axis=1) == batch.labels).mean())


def _check_finite(report: LossReport, epoch: int, step: int) -> None:
    if not np.isfinite(float(report.total.data)):
        raise TrainingDiverged("non-finite training loss", epoch, step)


def search_phase(net, trn_stream, val_stream, cfg: SearchConfig, *, beta: float,
                 mu_mode: str = "pooled", kl_aggregate: str = "mean",
                 metrics_cb=None) -> tuple[list[dict[str, np.ndarray]], list[dict]]:
    """Alternate architecture and weight updates over the bilevel split.

    Per step: (a) update alpha with the configured-order gradient on a
    validation batch, (b) update theta and phi with momentum SGD on the
    training-batch loss. Returns the per-epoch alpha snapshots and
    metric rows.
    """
    model = SupernetTrainer(net, beta, mu_mode, kl_aggregate)
    weight_opt = MomentumSGD(model.weight_params(), cfg.w_lr, cfg.w_momentum,
                             cfg.w_weight_decay)
    arch_opt = Adam(model.alpha_params(), cfg.arch_lr,
                    weight_decay=cfg.arch_weight_decay)
    trajectory: list[dict[str, np.ndarray]] = []
    metrics: list[dict] = []

    for epoch in range(cfg.epochs):
        if cfg.cosine:
            weight_opt.lr = cosine_lr(epoch, max(cfg.epochs, 1), cfg.w_lr, cfg.w_lr_min)
        sums = {"loss": 0.0, "nll": 0.0, "kl": 0.0}
        steps = 0
        val_batches = val_stream.epoch(epoch)
        for step, trn_batch in enumerate(trn_stream.epoch(epoch)):
            val_batch = next(val_batches, None)
            if val_batch is None:
                val_batches = val_stream.epoch(epoch * 7919 + step)
                val_batch = next(val_batches)

            if cfg.order == "second":
                g_alpha = arch_grad_second_order(
                    model, trn_batch, val_batch, cfg.eta,
                    w_momentum=cfg.w_momentum, w_weight_decay=cfg.w_weight_decay,
                    velocity=weight_opt.velocity, fd_scale=cfg.fd_scale)
            else:
                g_alpha = arch_grad_first_order(model, val_batch)
            arch_opt.step(g_alpha)

            report = model.loss_on(trn_batch)
            _check_finite(report, epoch, step)
            zero_grads(model.weight_params())
            report.total.backward()
            weight_opt.step()
            zero_grads(model.weight_params())
            zero_grads(model.alpha_params())

            sums["loss"] += float(report.total.data)
            sums["nll"] += report.nll
            sums["kl"] += report.kl
            steps += 1

        val_report, val_acc = model.eval_report(val_stream.full())
        trn_acc = model.accuracy(trn_stream.full())
        row = {
            "epoch": epoch,
            "train_loss": sums["loss"] / max(steps, 1),
            "train_nll": sums["nll"] / max(steps, 1),
            "train_kl": sums["kl"] / max(steps, 1),
            "train_accuracy": trn_acc,
            "val_loss": float(val_report.total.data),
            "val_nll": val_report.nll,
            "val_kl": val_report.kl,
            "val_accuracy": val_acc,
            "w_lr": weight_opt.lr,
        }
        metrics.append(row)
        trajectory.append(net.alphas.snapshot())
        if metrics_cb is not None:
            metrics_cb(row)
    return trajectory, metrics


def train_weights(model, trn_stream, cfg: SearchConfig, *, eval_stream=None,
                  metrics_cb=None) -> list[dict]:
    """Plain weight training (the retraining phase): momentum SGD over the
    objective, deterministic accuracy passes per epoch."""
    weight_opt = MomentumSGD(model.weight_params(), cfg.w_lr, cfg.w_momentum,
                             cfg.w_weight_decay)
    metrics: list[dict] = []
    for epoch in range(cfg.epochs):
        if cfg.cosine:
            weight_opt.lr = cosine_lr(epoch, max(cfg.epochs, 1), cfg.w_lr, cfg.w_lr_min)
        sums = {"loss": 0.0, "nll": 0.0, "kl": 0.0}
        steps = 0
        for step, batch in enumerate(trn_stream.epoch(epoch)):
            report = model.loss_on(batch)
            _check_finite(report, epoch, step)
            zero_grads(model.weight_params())
            report.total.backward()
            weight_opt.step()
            zero_grads(model.weight_params())
            sums["loss"] += float(report.total.data)
            sums["nll"] += report.nll
            sums["kl"] += report.kl
            steps += 1
        row = {
            "epoch": epoch,
            "train_loss": sums["loss"] / max(steps, 1),
            "train_nll": sums["nll"] / max(steps, 1),
            "train_kl": sums["kl"] / max(steps, 1),
            "train_accuracy": model.accuracy(trn_stream.full()),
            "w_lr": weight_opt.lr,
        }
        if eval_stream is not None:
            val_report, val_acc = model.eval_report(eval_stream.full())
            row["val_loss"] = float(val_report.total.data)
            row["val_nll"] = val_report.nll
            row["val_kl"] = val_report.kl
            row["val_accuracy"] = val_acc
        metrics.append(row)
        if metrics_cb is not None:
            metrics_cb(row)
    return metrics


def evaluation_phase(genotype, trn_stream, test_stream, cfg: SearchConfig, *,
                     n_classes: int, init_channels: int, n_cells: int, seed: int,
                     beta: float, mu_mode: str = "pooled", kl_aggregate: str = "mean",
                     input_channels: int = 3, metrics_cb=None):
    """Retrain a discrete architecture from scratch under the objective.

    Noise injection is active exactly when the genotype contains noisy
    conv kinds; the final test pass runs in deterministic eval mode.
    """
    from .search_space import build_discrete_network

    net = build_discrete_network(genotype, n_classes, init_channels, n_cells,
                                 seed, input_channels=input_channels)
    model = SupernetTrainer(net, beta, mu_mode, kl_aggregate)
    metrics = train_weights(model, trn_stream, cfg, eval_stream=test_stream,
                            metrics_cb=metrics_cb)
    final_acc = model.accuracy(test_stream.full())
    return net, metrics, final_acc
