"""Cell-based search space: softmax-relaxed mixed edges, the stacked
supernet, and genotype discretization.

A cell is a DAG over two input states (the previous two cells' outputs)
and ``n_nodes`` intermediate nodes; every intermediate node receives one
mixed edge from each earlier state. A mixed edge evaluates all candidate
operators and combines them with softmax weights over that edge's
architecture logits. Discretization keeps, per node, the two incoming
edges whose strongest operator carries the largest softmax weight.
"""

from __future__ import annotations

import contextlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .operators import (
    OPERATOR_KINDS,
    BatchNorm,
    FactorizedReduce,
    ReLUConvBN,
    SiteStats,
    collect_injectors,
    make_operator,
)
from .tensor import ParamStore, ShapeError, Tensor


@dataclass(frozen=True)
class CellSpec:
    """Edge layout of a cell with ``n_nodes`` intermediate nodes."""

    n_nodes: int

    @property
    def n_edges(self) -> int:
        return sum(t + 2 for t in range(self.n_nodes))

    def edges(self) -> list[tuple[int, int]]:
        """(node, source-state) pairs in evaluation order. States 0 and 1
        are the two cell inputs; intermediate node t is state t + 2."""
        out = []
        for t in range(self.n_nodes):
            for src in range(t + 2):
                out.append((t, src))
        return out


@dataclass
class AlphaParams:
    """Architecture logits: one (n_edges, n_ops) matrix per cell type,
    plus a shared active-operator mask for space restriction."""

    kinds: tuple[str, ...]
    spec: CellSpec
    normal: Tensor
    reduce: Tensor
    active: np.ndarray

    @classmethod
    def create(cls, kinds, spec: CellSpec, store: ParamStore,
               rng: np.random.Generator) -> "AlphaParams":
        nu = len(kinds)
        shape = (spec.n_edges, nu)
        normal = store.add("alpha", "alpha.normal", Tensor(1e-3 * rng.standard_normal(shape)))
        reduce_ = store.add("alpha", "alpha.reduce", Tensor(1e-3 * rng.standard_normal(shape)))
        return cls(tuple(kinds), spec, normal, reduce_, np.ones(nu, dtype=bool))

    def mask_kinds(self, kinds) -> None:
        for kind in kinds:
            if kind not in self.kinds:
                raise ValueError(f"cannot mask unknown kind {kind!r}")
            self.active[self.kinds.index(kind)] = False
        if not self.active.any():
            raise ValueError("mask would exclude every operator")

    def matrix(self, cell_type: str) -> Tensor:
        return self.normal if cell_type == "normal" else self.reduce

    def snapshot(self) -> dict[str, np.ndarray]:
        return {"normal": self.normal.data.copy(), "reduce": self.reduce.data.copy()}


@dataclass
class Genotype:
    """Discrete cell description: per intermediate node, exactly two
    (operator, source-state) pairs, for both cell types."""

    normal: list[list[tuple[str, int]]]
    reduce: list[list[tuple[str, int]]]
    meta: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return len(self.normal)

    def all_ops(self, cell_type: str) -> list[str]:
        nodes = self.normal if cell_type == "normal" else self.reduce
        return [op for node in nodes for op, _ in node]

    def validate(self) -> None:
        if len(self.normal) != len(self.reduce):
            raise ValueError("cell types disagree on node count")
        for cell_type, nodes in (("normal", self.normal), ("reduce", self.reduce)):
            for t, node in enumerate(nodes):
                if len(node) != 2:
                    raise ValueError(f"{cell_type} node {t}: expected 2 edges")
                srcs = [src for _, src in node]
                if len(set(srcs)) != 2:
                    raise ValueError(f"{cell_type} node {t}: sources must be distinct")
                for op, src in node:
                    if op not in OPERATOR_KINDS:
                        raise ValueError(f"{cell_type} node {t}: unknown operator {op!r}")
                    if not 0 <= src < t + 2:
                        raise ValueError(f"{cell_type} node {t}: source {src} out of range")


def genotype_to_json(genotype: Genotype) -> str:
    doc = {
        "cells": [
            {"cell_type": "normal",
             "nodes": [[[op, src] for op, src in node] for node in genotype.normal]},
            {"cell_type": "reduce",
             "nodes": [[[op, src] for op, src in node] for node in genotype.reduce]},
        ],
        "meta": genotype.meta,
    }
    return json.dumps(doc, indent=2) + "\n"


def genotype_from_json(text: str) -> Genotype:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed genotype document: {exc}") from exc
    try:
        cells = {cell["cell_type"]: cell["nodes"] for cell in doc["cells"]}
        normal = [[(str(op), int(src)) for op, src in node] for node in cells["normal"]]
        reduce_ = [[(str(op), int(src)) for op, src in node] for node in cells["reduce"]]
        meta = doc.get("meta", {})
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed genotype document: {exc}") from exc
    genotype = Genotype(normal, reduce_, meta)
    genotype.validate()
    return genotype


def derive_genotype(alphas: AlphaParams, meta: dict | None = None) -> Genotype:
    """Argmax operator per edge (masked kinds excluded, ties to the lower
    operator index), then per node keep the two incoming edges with the
    largest winning-operator weight (ties to the lower source index)."""
    spec = alphas.spec
    result: dict[str, list[list[tuple[str, int]]]] = {}
    for cell_type in ("normal", "reduce"):
        logits = alphas.matrix(cell_type).data
        nodes: list[list[tuple[str, int]]] = []
        edge_iter = iter(range(spec.n_edges))
        for t in range(spec.n_nodes):
            candidates = []
            for src in range(t + 2):
                e = next(edge_iter)
                row = logits[e].copy()
                row[~alphas.active] = -np.inf
                shifted = np.exp(row - row[alphas.active].max())
                shifted[~alphas.active] = 0.0
                weights = shifted / shifted.sum()
                best = int(np.argmax(row))
                candidates.append((-weights[best], src, alphas.kinds[best]))
            candidates.sort()
            kept = sorted(candidates[:2], key=lambda c: c[1])
            nodes.append([(kind, src) for _, src, kind in kept])
        result[cell_type] = nodes
    return Genotype(result["normal"], result["reduce"], dict(meta or {}))


class MixedEdge:
    """Softmax-weighted combination of every active candidate operator.
    Branches whose weight underflows to exactly zero are skipped, so a
    fully masked kind contributes neither compute nor noise draws."""

    def __init__(self, kinds, channels: int, stride: int, store: ParamStore,
                 name: str, rng: np.random.Generator, bn_affine: bool,
                 noise_seeds) -> None:
        self.kinds = tuple(kinds)
        self.ops = [
            make_operator(kind, channels, stride, store, f"{name}.{kind}", rng,
                          bn_affine, noise_seeds(kind))
            for kind in self.kinds
        ]

    def forward(self, x: Tensor, logits_row: Tensor, active: np.ndarray,
                train: bool) -> tuple[Tensor, list[SiteStats]]:
        weights = T.softmax(logits_row, mask=active)
        out = None
        sites: list[SiteStats] = []
        for r, op in enumerate(self.ops):
            if weights.data[r] == 0.0:
                continue
            y, s = op.forward(x, train)
            term = weights[r] * y
            out = term if out is None else out + term
            sites.extend(s)
        return out, sites

    def injectors(self):
        return [inj for op in self.ops for inj in collect_injectors(op)]


class Cell:
    """One relaxed cell. Reduction cells apply stride 2 on edges sourced
    at the two cell inputs and run at doubled channel width."""

    def __init__(self, spec: CellSpec, kinds, c_pp: int, c_p: int, c: int,
                 reduction: bool, reduction_prev: bool, store: ParamStore,
                 name: str, rng: np.random.Generator, bn_affine: bool, noise_seeds):
        self.spec = spec
        self.reduction = reduction
        if reduction_prev:
            self.pre0 = FactorizedReduce(c_pp, c, store, f"{name}.pre0", rng, bn_affine)
        else:
            self.pre0 = ReLUConvBN(c_pp, c, store, f"{name}.pre0", rng, bn_affine)
        self.pre1 = ReLUConvBN(c_p, c, store, f"{name}.pre1", rng, bn_affine)
        self.edges = []
        for t, src in spec.edges():
            stride = 2 if reduction and src < 2 else 1
            self.edges.append(
                MixedEdge(kinds, c, stride, store, f"{name}.n{t}_s{src}", rng,
                          bn_affine, noise_seeds))

    def forward(self, s0: Tensor, s1: Tensor, alpha_mat: Tensor, active: np.ndarray,
                train: bool) -> tuple[Tensor, list[SiteStats]]:
        if isinstance(self.pre0, FactorizedReduce):
            p0, _ = self.pre0.forward(s0, train)
        else:
            p0 = self.pre0.forward(s0, train)
        states = [p0, self.pre1.forward(s1, train)]
        sites: list[SiteStats] = []
        e = 0
        for t in range(self.spec.n_nodes):
            acc = None
            for src in range(t + 2):
                y, s = self.edges[e].forward(states[src], alpha_mat[e], active, train)
                sites.extend(s)
                acc = y if acc is None else acc + y
                e += 1
            states.append(acc)
        return T.concat(states[2:], axis=1), sites

    def injectors(self):
        return [inj for edge in self.edges for inj in edge.injectors()]


class _NoiseSeeder:
    """Deterministic per-injector seed stream for a network."""

    def __init__(self, seed: int):
        self._ss = np.random.SeedSequence([int(seed), 0x5eed])
        self._count = 0

    def __call__(self, _kind: str) -> int:
        child = self._ss.spawn(1)[0]
        self._count += 1
        return int(child.generate_state(1, dtype=np.uint64)[0])


def reduction_positions(n_cells: int) -> set[int]:
    return {n_cells // 3, (2 * n_cells) // 3} & set(range(n_cells))


class Supernet:
    """Stem, stacked relaxed cells (reduction at depth thirds with channel
    doubling), global average pooling and a linear classifier."""

    def __init__(self, n_classes: int, init_channels: int, n_cells: int,
                 n_nodes: int, seed: int, kinds=OPERATOR_KINDS,
                 input_channels: int = 3, bn_affine: bool = False):
        self.n_classes = n_classes
        self.kinds = tuple(kinds)
        self.spec = CellSpec(n_nodes)
        self.store = ParamStore()
        self.seed = seed
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
        noise_seeds = _NoiseSeeder(seed)

        c = init_channels
        self.stem_w = self.store.add(
            "theta", "stem.conv",
            Tensor(rng.normal(0.0, np.sqrt(2.0 / (input_channels * 9)),
                              size=(c, input_channels, 3, 3))))
        self.stem_bn = BatchNorm(c, self.store, "stem.bn", affine=True)

        self.cells: list[Cell] = []
        reductions = reduction_positions(n_cells)
        c_pp, c_p, c_cur = c, c, init_channels
        reduction_prev = False
        for i in range(n_cells):
            reduction = i in reductions
            if reduction:
                c_cur *= 2
            cell = Cell(self.spec, self.kinds, c_pp, c_p, c_cur, reduction,
                        reduction_prev, self.store, f"cell{i}", rng, bn_affine,
                        noise_seeds)
            self.cells.append(cell)
            reduction_prev = reduction
            c_pp, c_p = c_p, self.spec.n_nodes * c_cur

        self.final_channels = c_p
        self.fc_w = self.store.add(
            "theta", "classifier.w",
            Tensor(rng.normal(0.0, np.sqrt(1.0 / c_p), size=(c_p, n_classes))))
        self.fc_b = self.store.add("theta", "classifier.b", Tensor(np.zeros(n_classes)))

        alpha_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
        self.alphas = AlphaParams.create(self.kinds, self.spec, self.store, alpha_rng)
        self._injectors = [inj for cell in self.cells for inj in cell.injectors()]

    # -- search surface ------------------------------------------------------

    def mask_kinds(self, kinds) -> None:
        self.alphas.mask_kinds(kinds)

    def weight_params(self) -> dict[str, Tensor]:
        return self.store.weights()

    def alpha_params(self) -> dict[str, Tensor]:
        return self.store.alpha

    def injectors(self):
        return self._injectors

    @contextlib.contextmanager
    def frozen_noise(self):
        """Replay identical noise draws for every forward inside the block."""
        for inj in self._injectors:
            inj.freeze()
        try:
            yield
        finally:
            for inj in self._injectors:
                inj.thaw()

    # -- forward -------------------------------------------------------------

    def forward(self, x: Tensor, train: bool) -> tuple[Tensor, list[SiteStats]]:
        if x.ndim != 4:
            raise ShapeError("supernet expects a (B,C,H,W) batch")
        y = self.stem_bn.forward(T.conv2d(x, self.stem_w, padding=1), train)
        s0 = s1 = y
        sites: list[SiteStats] = []
        for cell in self.cells:
            mat = self.alphas.matrix("reduce" if cell.reduction else "normal")
            out, cell_sites = cell.forward(s0, s1, mat, self.alphas.active, train)
            sites.extend(cell_sites)
            s0, s1 = s1, out
        pooled = s1.mean(axis=(2, 3))
        logits = pooled @ self.fc_w + self.fc_b
        return logits, sites

    def derive_genotype(self, meta: dict | None = None) -> Genotype:
        return derive_genotype(self.alphas, meta)


class FixedCell:
    """Discrete cell: per node exactly the two genotype edges."""

    def __init__(self, nodes: list[list[tuple[str, int]]], n_nodes: int, c_pp: int,
                 c_p: int, c: int, reduction: bool, reduction_prev: bool,
                 store: ParamStore, name: str, rng: np.random.Generator,
                 bn_affine: bool, noise_seeds):
        self.n_nodes = n_nodes
        self.reduction = reduction
        if reduction_prev:
            self.pre0 = FactorizedReduce(c_pp, c, store, f"{name}.pre0", rng, bn_affine)
        else:
            self.pre0 = ReLUConvBN(c_pp, c, store, f"{name}.pre0", rng, bn_affine)
        self.pre1 = ReLUConvBN(c_p, c, store, f"{name}.pre1", rng, bn_affine)
        self.node_ops = []
        for t, node in enumerate(nodes):
            ops = []
            for slot, (kind, src) in enumerate(node):
                stride = 2 if reduction and src < 2 else 1
                op = make_operator(kind, c, stride, store,
                                   f"{name}.n{t}_e{slot}_{kind}", rng, bn_affine,
                                   noise_seeds(kind))
                ops.append((op, src))
            self.node_ops.append(ops)

    def forward(self, s0: Tensor, s1: Tensor, train: bool) -> tuple[Tensor, list[SiteStats]]:
        if isinstance(self.pre0, FactorizedReduce):
            p0, _ = self.pre0.forward(s0, train)
        else:
            p0 = self.pre0.forward(s0, train)
        states = [p0, self.pre1.forward(s1, train)]
        sites: list[SiteStats] = []
        for ops in self.node_ops:
            acc = None
            for op, src in ops:
                y, s = op.forward(states[src], train)
                sites.extend(s)
                acc = y if acc is None else acc + y
            states.append(acc)
        return T.concat(states[2:], axis=1), sites

    def injectors(self):
        return [inj for ops in self.node_ops for op, _ in ops
                for inj in collect_injectors(op)]


class DiscreteNetwork:
    """Same stem/stack/classifier layout as the supernet, but every node
    carries exactly its genotype edges with freshly initialized weights."""

    def __init__(self, genotype: Genotype, n_classes: int, init_channels: int,
                 n_cells: int, seed: int, input_channels: int = 3,
                 bn_affine: bool = True):
        genotype.validate()
        self.genotype = genotype
        self.n_classes = n_classes
        self.store = ParamStore()
        self.seed = seed
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3]))
        noise_seeds = _NoiseSeeder(seed + 1)

        c = init_channels
        self.stem_w = self.store.add(
            "theta", "stem.conv",
            Tensor(rng.normal(0.0, np.sqrt(2.0 / (input_channels * 9)),
                              size=(c, input_channels, 3, 3))))
        self.stem_bn = BatchNorm(c, self.store, "stem.bn", affine=True)

        self.cells: list[FixedCell] = []
        reductions = reduction_positions(n_cells)
        c_pp, c_p, c_cur = c, c, init_channels
        reduction_prev = False
        for i in range(n_cells):
            reduction = i in reductions
            if reduction:
                c_cur *= 2
            nodes = genotype.reduce if reduction else genotype.normal
            cell = FixedCell(nodes, genotype.n_nodes, c_pp, c_p, c_cur, reduction,
                             reduction_prev, self.store, f"cell{i}", rng, bn_affine,
                             noise_seeds)
            self.cells.append(cell)
            reduction_prev = reduction
            c_pp, c_p = c_p, genotype.n_nodes * c_cur

        self.final_channels = c_p
        self.fc_w = self.store.add(
            "theta", "classifier.w",
            Tensor(rng.normal(0.0, np.sqrt(1.0 / c_p), size=(c_p, n_classes))))
        self.fc_b = self.store.add("theta", "classifier.b", Tensor(np.zeros(n_classes)))
        self._injectors = [inj for cell in self.cells for inj in cell.injectors()]

    def weight_params(self) -> dict[str, Tensor]:
        return self.store.weights()

    def injectors(self):
        return self._injectors

    @contextlib.contextmanager
    def frozen_noise(self):
        for inj in self._injectors:
            inj.freeze()
        try:
            yield
        finally:
            for inj in self._injectors:
                inj.thaw()

    def forward(self, x: Tensor, train: bool) -> tuple[Tensor, list[SiteStats]]:
        if x.ndim != 4:
            raise ShapeError("network expects a (B,C,H,W) batch")
        y = self.stem_bn.forward(T.conv2d(x, self.stem_w, padding=1), train)
        s0 = s1 = y
        sites: list[SiteStats] = []
        for cell in self.cells:
            out, cell_sites = cell.forward(s0, s1, train)
            sites.extend(cell_sites)
            s0, s1 = s1, out
        pooled = s1.mean(axis=(2, 3))
        logits = pooled @ self.fc_w + self.fc_b
        return logits, sites


def build_discrete_network(genotype: Genotype, n_classes: int, init_channels: int,
                           n_cells: int, seed: int, input_channels: int = 3,
                           bn_affine: bool = True) -> DiscreteNetwork:
    return DiscreteNetwork(genotype, n_classes, init_channels, n_cells, seed,
                           input_channels, bn_affine)
