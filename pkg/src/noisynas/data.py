"""Datasets, label-noise models, splits and batch streams.

Corruption is exact-quota: within each (source) class, round(rate * n)
samples are chosen by a seeded shuffle and relabeled, so corrupted
counts are deterministic and tests can assert them exactly. A dataset
keeps both label arrays plus a per-sample corruption flag; training
code only ever sees the noisy labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from .tensor import Tensor


@dataclass
class NoiseSpec:
    kind: str = "none"            # none | symmetric | asymmetric
    rate: float = 0.0
    mapping: list[tuple[int, int]] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "symmetric", "asymmetric"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("noise rate must lie in [0, 1]")
        if self.kind == "asymmetric":
            srcs = [s for s, _ in self.mapping]
            if len(set(srcs)) != len(srcs):
                raise ValueError("asymmetric mapping sources must be distinct")
            if any(s == d for s, d in self.mapping):
                raise ValueError("asymmetric mapping must change the class")


@dataclass
class NoisyDataset:
    """Inputs plus clean and (possibly) corrupted labels."""

    inputs: np.ndarray
    clean_labels: np.ndarray
    noisy_labels: np.ndarray
    corrupted: np.ndarray
    n_classes: int
    name: str = "dataset"

    def __post_init__(self):
        m = len(self.inputs)
        if not (len(self.clean_labels) == len(self.noisy_labels) == len(self.corrupted) == m):
            raise ValueError("label arrays must match the sample count")
        if self.clean_labels.min(initial=0) < 0 or \
                self.clean_labels.max(initial=0) >= self.n_classes or \
                self.noisy_labels.max(initial=0) >= self.n_classes:
            raise ValueError("labels out of range")
        if not np.array_equal(self.corrupted, self.clean_labels != self.noisy_labels):
            raise ValueError("corrupted flags inconsistent with the label pair")

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, idx: np.ndarray, name: str | None = None) -> "NoisyDataset":
        return NoisyDataset(self.inputs[idx], self.clean_labels[idx],
                            self.noisy_labels[idx], self.corrupted[idx],
                            self.n_classes, name or self.name)

    def with_noise(self, spec: NoiseSpec) -> "NoisyDataset":
        """Apply a noise model to the clean labels; inputs are untouched."""
        if spec.kind == "none" or spec.rate == 0.0:
            return replace(self, noisy_labels=self.clean_labels.copy(),
                           corrupted=np.zeros(len(self), dtype=bool))
        if spec.kind == "symmetric":
            noisy, flags = corrupt_symmetric(self.clean_labels, self.n_classes,
                                             spec.rate, spec.seed)
        else:
            noisy, flags = corrupt_asymmetric(self.clean_labels, self.n_classes,
                                              spec.rate, spec.mapping, spec.seed)
        return replace(self, noisy_labels=noisy, corrupted=flags)


def corrupt_symmetric(labels: np.ndarray, n_classes: int, rate: float,
                      seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Relabel round(rate * n_c) seeded-chosen samples of every class
    uniformly to one of the other n_classes - 1 classes."""
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    labels = np.asarray(labels, dtype=np.int64)
    noisy = labels.copy()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    for c in range(n_classes):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            continue
        k = int(round(rate * members.size))
        chosen = rng.permutation(members)[:k]
        dst = rng.integers(0, n_classes - 1, size=k)
        dst = dst + (dst >= c)
        noisy[chosen] = dst
    return noisy, noisy != labels


def corrupt_asymmetric(labels: np.ndarray, n_classes: int, rate: float,
                       mapping, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """For each (src, dst) pair relabel round(rate * n_src) seeded-chosen
    samples of src as dst; classes outside the mapping are untouched."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    labels = np.asarray(labels, dtype=np.int64)
    for src, dst in mapping:
        if not (0 <= src < n_classes and 0 <= dst < n_classes):
            raise ValueError(f"mapping {src}->{dst} references a class >= {n_classes}")
        if src == dst:
            raise ValueError("mapping must change the class")
    noisy = labels.copy()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 13]))
    for src, dst in mapping:
        members = np.flatnonzero(labels == src)
        k = int(round(rate * members.size))
        chosen = rng.permutation(members)[:k]
        noisy[chosen] = dst
    return noisy, noisy != labels


def generate_toy_dataset(n_bits: int, n_samples: int, seed: int) -> NoisyDataset:
    """Balanced binary task over {-1,+1}^n_bits patterns: the label is 1
    exactly when a fixed smooth score (tanh of a random linear plus
    pairwise form) exceeds the median score."""
    if n_bits < 4:
        raise ValueError("need at least 4 bits")
    total = 2 ** n_bits
    if n_samples > total:
        raise ValueError(f"cannot draw {n_samples} distinct patterns from {total}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 21]))
    if n_samples == total:
        codes = np.arange(total, dtype=np.uint64)
    else:
        codes = rng.choice(total, size=n_samples, replace=False).astype(np.uint64)
    bits = ((codes[:, None] >> np.arange(n_bits, dtype=np.uint64)) & 1).astype(np.float64)
    inputs = 2.0 * bits - 1.0

    w = rng.normal(size=n_bits)
    pair = rng.normal(size=(n_bits, n_bits)) / np.sqrt(n_bits)
    pair = np.triu(pair, k=1)
    score = np.tanh(inputs @ w + np.einsum("bi,ij,bj->b", inputs, pair, inputs))
    labels = (score > np.median(score)).astype(np.int64)
    return NoisyDataset(inputs, labels, labels.copy(),
                        np.zeros(n_samples, dtype=bool), 2, name="toy")


def generate_image_dataset(n_classes: int, per_class: int, hw: int,
                           seed: int) -> NoisyDataset:
    """Class-conditional 3-channel images: a fixed random low-frequency
    pattern per class plus Gaussian pixel noise."""
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if hw < 8:
        raise ValueError("need at least 8x8 images")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 22]))
    yy, xx = np.meshgrid(np.arange(hw), np.arange(hw), indexing="ij")
    means = np.empty((n_classes, 3, hw, hw))
    for c in range(n_classes):
        for ch in range(3):
            fy, fx = rng.uniform(0.5, 2.0, size=2)
            phase = rng.uniform(0, 2 * np.pi, size=2)
            means[c, ch] = (np.sin(2 * np.pi * fy * yy / hw + phase[0])
                            + np.cos(2 * np.pi * fx * xx / hw + phase[1]))
    inputs = np.repeat(means, per_class, axis=0)
    inputs = inputs + 0.3 * rng.standard_normal(inputs.shape)
    labels = np.repeat(np.arange(n_classes), per_class).astype(np.int64)
    perm = rng.permutation(len(labels))
    inputs, labels = inputs[perm], labels[perm]
    return NoisyDataset(inputs, labels, labels.copy(),
                        np.zeros(len(labels), dtype=bool), n_classes, name="synthetic-image")


def split(dataset: NoisyDataset, fractions, seed: int) -> list[NoisyDataset]:
    """Seeded stratified partition: per class, a shuffled index list is cut
    at the rounded cumulative fractions, so class proportions carry over."""
    fractions = list(fractions)
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 23]))
    parts: list[list[np.ndarray]] = [[] for _ in fractions]
    for c in range(dataset.n_classes):
        members = rng.permutation(np.flatnonzero(dataset.clean_labels == c))
        bounds = np.round(np.cumsum(fractions) * members.size).astype(int)
        start = 0
        for i, stop in enumerate(bounds):
            parts[i].append(members[start:stop])
            start = stop
    out = []
    for i, chunks in enumerate(parts):
        idx = np.sort(np.concatenate(chunks)) if chunks else np.array([], dtype=int)
        if idx.size == 0:
            raise ValueError(f"split fraction {fractions[i]} produced an empty part")
        out.append(dataset.subset(idx, name=f"{dataset.name}/part{i}"))
    return out


def load_dataset_file(path) -> NoisyDataset:
    """Plain-text loader: header `n_samples n_features n_classes`, then one
    sample per line (features then a 0-based integer label)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 3:
            raise ValueError("header must be: n_samples n_features n_classes")
        m, n_feat, n_classes = (int(v) for v in header)
        inputs = np.empty((m, n_feat))
        labels = np.empty(m, dtype=np.int64)
        for i in range(m):
            row = fh.readline().split()
            if len(row) != n_feat + 1:
                raise ValueError(f"line {i + 2}: expected {n_feat} features + label")
            inputs[i] = [float(v) for v in row[:n_feat]]
            labels[i] = int(row[n_feat])
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("label out of range")
    return NoisyDataset(inputs, labels, labels.copy(), np.zeros(m, dtype=bool),
                        n_classes, name="file")


def save_dataset_file(dataset: NoisyDataset, path) -> None:
    flat = dataset.inputs.reshape(len(dataset), -1)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(dataset)} {flat.shape[1]} {dataset.n_classes}\n")
        for row, label in zip(flat, dataset.clean_labels):
            fh.write(" ".join(f"{v:.9g}" for v in row) + f" {label}\n")


@dataclass
class Batch:
    """What training sees: inputs and the (noisy) labels, nothing else."""

    inputs: Tensor
    labels: np.ndarray
    onehot: np.ndarray
    indices: np.ndarray


class BatchStream:
    """Seeded minibatch iterator over a dataset's noisy labels."""

    def __init__(self, dataset: NoisyDataset, batch_size: int, seed: int):
        if batch_size < 1:
            raise ValueError("batch size must be positive")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = int(seed)
        self._eye = np.eye(dataset.n_classes)

    def _batch(self, idx: np.ndarray) -> Batch:
        labels = self.dataset.noisy_labels[idx]
        return Batch(Tensor(self.dataset.inputs[idx]), labels, self._eye[labels], idx)

    def epoch(self, epoch: int) -> Iterator[Batch]:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 31, int(epoch)]))
        order = rng.permutation(len(self.dataset))
        for start in range(0, len(order), self.batch_size):
            yield self._batch(order[start:start + self.batch_size])

    def full(self) -> Batch:
        return self._batch(np.arange(len(self.dataset)))

    def steps_per_epoch(self) -> int:
        return (len(self.dataset) + self.batch_size - 1) // self.batch_size
