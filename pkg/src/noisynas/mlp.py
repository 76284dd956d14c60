"""Small fully connected classifier for the information-plane study.

Six linear layers by default: tanh on the intermediate layers, sigmoid
on the final outputs. Noise injection sites (learned or fixed-scale)
sit on the input of every layer after the first, mirroring where the
convolutional search-space blocks inject.
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import tensor as T
from .objective import LossReport, nas_loss
from .operators import FixedNoiseInjector, NoiseInjector
from .tensor import ParamStore, Tensor, no_grad


class ToyMLP:
    """injection: None, "learned", or ("fixed", std, mean)."""

    def __init__(self, n_inputs: int, hidden, n_classes: int, seed: int,
                 injection=None, injector_reduction: int = 4):
        self.widths = [n_inputs, *hidden, n_classes]
        self.n_layers = len(self.widths) - 1
        self.store = ParamStore()
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 41]))
        noise_ss = np.random.SeedSequence([int(seed), 42])

        self.linears = []
        for i, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            w = self.store.add("theta", f"l{i}.w",
                               Tensor(rng.normal(0.0, np.sqrt(1.0 / fan_in),
                                                 size=(fan_in, fan_out))))
            b = self.store.add("theta", f"l{i}.b", Tensor(np.zeros(fan_out)))
            self.linears.append((w, b))

        self.injectors: list = [None] * self.n_layers
        if injection is not None:
            for i in range(1, self.n_layers):
                seed_i = int(noise_ss.spawn(1)[0].generate_state(1, np.uint64)[0])
                width = self.widths[i]
                if injection == "learned":
                    self.injectors[i] = NoiseInjector(
                        width, self.store, f"l{i}.inj", seed_i,
                        reduction=injector_reduction, init_rng=rng)
                else:
                    kind, std, mean = injection
                    if kind != "fixed":
                        raise ValueError(f"unknown injection mode {injection!r}")
                    self.injectors[i] = FixedNoiseInjector(width, std, mean, seed_i)

    def weight_params(self) -> dict[str, Tensor]:
        return self.store.weights()

    def injector_list(self):
        return [inj for inj in self.injectors
                if isinstance(inj, NoiseInjector)]

    @contextlib.contextmanager
    def frozen_noise(self):
        for inj in self.injector_list():
            inj.freeze()
        try:
            yield
        finally:
            for inj in self.injector_list():
                inj.thaw()

    def _apply_injector(self, inj, h: Tensor, train: bool):
        b, d = h.shape
        out, stats = inj.forward(h.reshape((b, d, 1, 1)), train)
        return out.reshape((b, d)), stats

    def forward(self, x: Tensor, train: bool, with_taps: bool = False):
        """Returns (logits, sites) or (logits, sites, taps). Taps are the
        post-activation outputs of the intermediate layers."""
        h = x
        sites = []
        taps = []
        for i, (w, b) in enumerate(self.linears):
            inj = self.injectors[i]
            if inj is not None:
                h, stats = self._apply_injector(inj, h, train)
                if stats is not None:
                    sites.append(stats)
            h = h @ w + b
            if i < self.n_layers - 1:
                h = T.tanh(h)
                taps.append((f"layer{i}", h.data))
            else:
                h = T.sigmoid(h)
        if with_taps:
            return h, sites, taps
        return h, sites


class MLPTrainer:
    """Objective binding, mirroring the supernet trainer surface."""

    def __init__(self, net: ToyMLP, beta: float, mu_mode: str = "pooled",
                 kl_aggregate: str = "mean"):
        self.net = net
        self.beta = beta
        self.mu_mode = mu_mode
        self.kl_aggregate = kl_aggregate

    def weight_params(self):
        return self.net.weight_params()

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
        with no_grad():
            logits, sites = self.net.forward(batch.inputs, train=False)
            report = nas_loss(logits, batch.onehot, sites, self.beta, self.mu_mode,
                              self.kl_aggregate)
        return report, float((logits.data.argmax(axis=1) == batch.labels).mean())
