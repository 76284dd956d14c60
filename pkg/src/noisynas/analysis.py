"""Analysis tooling: binned mutual-information estimates over layer
activations (information-plane trajectories), clean/noisy gradient-norm
tracking, and operator histograms over derived genotypes.

MI uses the plug-in estimator on discretized activations: each
activation vector is clamped to a range, mapped to equal-width bin
indices, and the index tuple is hashed injectively to one discrete
symbol per sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .operators import OPERATOR_KINDS, PARAMETERLESS_KINDS
from .search_space import Genotype
from .tensor import no_grad, zero_grads


def bin_activations(z: np.ndarray, n_bins: int, lo: float, hi: float) -> np.ndarray:
    """Discretize (M, d) activations into one integer code per sample.
    Values are clamped to [lo, hi]; two samples collide only when every
    coordinate falls in the same bin."""
    if n_bins < 2:
        raise ValueError("need at least 2 bins")
    if not lo < hi:
        raise ValueError("empty bin range")
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    idx = np.floor((np.clip(z, lo, hi) - lo) / (hi - lo) * n_bins).astype(np.int64)
    np.clip(idx, 0, n_bins - 1, out=idx)
    _, codes = np.unique(idx, axis=0, return_inverse=True)
    return codes.astype(np.int64)


def mutual_information(codes: np.ndarray, labels: np.ndarray) -> float:
    """Plug-in MI in bits from the empirical joint distribution."""
    codes = np.asarray(codes)
    labels = np.asarray(labels)
    if codes.size == 0:
        return 0.0
    if codes.shape != labels.shape:
        raise ValueError("codes and labels must align")
    m = codes.size
    _, ci = np.unique(codes, return_inverse=True)
    _, li = np.unique(labels, return_inverse=True)
    joint = np.zeros((ci.max() + 1, li.max() + 1))
    np.add.at(joint, (ci, li), 1.0)
    joint /= m
    pz = joint.sum(axis=1, keepdims=True)
    py = joint.sum(axis=0, keepdims=True)
    mask = joint > 0
    ratio = np.where(mask, joint / (pz * py), 1.0)
    return float((joint[mask] * np.log2(ratio[mask])).sum())


@dataclass
class MIRecord:
    """Per-(epoch, layer) MI estimates: against all (noisy) labels,
    against clean labels on the uncorrupted subset, and against noisy
    labels on the corrupted subset."""

    epoch: int
    layer: str
    i_all: float
    i_clean: float
    i_noisy: float
    i_zx: float | None = None
    clean_empty: bool = False
    noisy_empty: bool = False


def mi_trajectory(model, dataset, epoch: int, n_bins: int = 30,
                  bin_range="auto", compute_zx: bool = False) -> list[MIRecord]:
    """Deterministic (eval-mode) forward over the full dataset, one record
    per tapped layer. ``model.forward`` must accept ``with_taps=True``."""
    from .tensor import Tensor

    with no_grad():
        _, _, taps = model.forward(Tensor(dataset.inputs), train=False, with_taps=True)
    clean_mask = ~dataset.corrupted
    noisy_mask = dataset.corrupted
    x_codes = None
    if compute_zx:
        flat = dataset.inputs.reshape(len(dataset), -1)
        x_codes = bin_activations(flat, n_bins, float(flat.min()), float(flat.max()) + 1e-12)

    records = []
    for name, z in taps:
        if bin_range == "auto":
            lo, hi = (-1.0, 1.0) if z.min() < 0 else (0.0, max(np.percentile(z, 99), 1e-9))
        else:
            lo, hi = bin_range
        codes = bin_activations(z, n_bins, lo, hi)
        i_all = mutual_information(codes, dataset.noisy_labels)
        clean_empty = not clean_mask.any()
        noisy_empty = not noisy_mask.any()
        i_clean = 0.0 if clean_empty else mutual_information(
            codes[clean_mask], dataset.clean_labels[clean_mask])
        i_noisy = 0.0 if noisy_empty else mutual_information(
            codes[noisy_mask], dataset.noisy_labels[noisy_mask])
        i_zx = mutual_information(codes, x_codes) if compute_zx else None
        records.append(MIRecord(epoch, name, i_all, i_clean, i_noisy, i_zx,
                                clean_empty, noisy_empty))
    return records


@dataclass
class GradNormRecord:
    """Mean/std of per-sample weight-gradient L2 norms, split by the
    corruption flag. A missing side is marked absent, not zero."""

    epoch: int
    clean_mean: float
    clean_std: float
    noisy_mean: float
    noisy_std: float
    clean_count: int
    noisy_count: int

    @property
    def clean_absent(self) -> bool:
        return self.clean_count == 0

    @property
    def noisy_absent(self) -> bool:
        return self.noisy_count == 0


def grad_norm_split(model, dataset, indices: np.ndarray, epoch: int,
                    batch_builder) -> GradNormRecord:
    """Per-sample gradient norms over the clean and corrupted subsets of
    the given sample indices. Weights are read, never written."""
    params = model.weight_params()
    norms = {True: [], False: []}
    for i in indices:
        batch = batch_builder(np.array([i]))
        zero_grads(params)
        report = model.loss_on(batch)
        report.total.backward()
        sq = sum(float((p.grad * p.grad).sum()) for p in params.values()
                 if p.grad is not None)
        norms[bool(dataset.corrupted[i])].append(np.sqrt(sq))
    zero_grads(params)

    def stats(vals):
        if not vals:
            return 0.0, 0.0
        arr = np.asarray(vals)
        return float(arr.mean()), float(arr.std())

    clean_mean, clean_std = stats(norms[False])
    noisy_mean, noisy_std = stats(norms[True])
    return GradNormRecord(epoch, clean_mean, clean_std, noisy_mean, noisy_std,
                          len(norms[False]), len(norms[True]))


@dataclass
class OpHistogram:
    """Operator counts per cell type aggregated over genotypes."""

    counts: dict = field(default_factory=dict)
    runs: int = 0

    def parameterless_fraction(self, cell_type: str) -> float:
        table = self.counts[cell_type]
        total = sum(table.values())
        if total == 0:
            return 0.0
        return sum(table[k] for k in PARAMETERLESS_KINDS) / total


def op_histogram(genotypes: list[Genotype]) -> OpHistogram:
    if not genotypes:
        raise ValueError("need at least one genotype")
    counts = {ct: {k: 0 for k in OPERATOR_KINDS} for ct in ("normal", "reduce")}
    for g in genotypes:
        for cell_type in ("normal", "reduce"):
            for op in g.all_ops(cell_type):
                counts[cell_type][op] += 1
    return OpHistogram(counts, len(genotypes))
