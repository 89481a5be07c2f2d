"""Random-graph data model: graphs, edge-probability matrices and their algebra.

Edge-probability matrices are plain ``(n, n)`` arrays (or :class:`Tensor` when
they sit inside a differentiable computation).  The model is an undirected
independent-Bernoulli random graph: entry ``(i, j)`` is the probability that
edge ``{i, j}`` is present.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, ParseError

SYM_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Graph:
    """A labeled undirected graph with node features.

    ``adj`` is a symmetric 0/1 matrix with zero diagonal; ``gt_mask`` marks
    ground-truth explanation edges and must lie inside ``adj``.
    """

    x: np.ndarray
    adj: np.ndarray
    y: int
    gt_mask: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        adj = np.asarray(self.adj, dtype=np.float64)
        if x.ndim != 2:
            raise DimensionError(f"features must be 2-D, got shape {x.shape}")
        n = x.shape[0]
        if adj.shape != (n, n):
            raise DimensionError(f"adjacency {adj.shape} does not match {n} nodes")
        check_adjacency(adj)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "adj", adj)
        object.__setattr__(self, "y", int(self.y))
        if self.gt_mask is not None:
            gt = np.asarray(self.gt_mask, dtype=np.float64)
            if gt.shape != (n, n):
                raise DimensionError(f"gt_mask {gt.shape} does not match {n} nodes")
            check_adjacency(gt)
            if (gt > adj).any():
                raise ContractError("gt_mask has edges outside the adjacency")
            object.__setattr__(self, "gt_mask", gt)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def num_edges(self) -> int:
        return int(np.triu(self.adj, 1).sum())

    def edges(self) -> list[tuple[int, int]]:
        return edge_list(self.adj)

    def gt_edges(self) -> list[tuple[int, int]]:
        return [] if self.gt_mask is None else edge_list(self.gt_mask)

    def permuted(self, perm: Sequence[int]) -> "Graph":
        p = np.asarray(perm)
        gt = None if self.gt_mask is None else self.gt_mask[np.ix_(p, p)]
        return Graph(self.x[p], self.adj[np.ix_(p, p)], self.y, gt)

    def to_json(self) -> dict:
        doc = {"n": self.n, "d": self.d, "x": self.x.tolist(),
               "edges": [list(e) for e in self.edges()], "y": self.y}
        if self.gt_mask is not None:
            doc["gt_edges"] = [list(e) for e in self.gt_edges()]
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "Graph":
        n, d = int(doc["n"]), int(doc["d"])
        x = np.asarray(doc["x"], dtype=np.float64).reshape(n, d)
        adj = adjacency_from_edges(n, doc["edges"])
        gt = adjacency_from_edges(n, doc["gt_edges"]) if "gt_edges" in doc else None
        return cls(x, adj, int(doc["y"]), gt)


def edge_list(adj: np.ndarray) -> list[tuple[int, int]]:
    rows, cols = np.nonzero(np.triu(adj, 1))
    return [(int(i), int(j)) for i, j in zip(rows, cols)]


def adjacency_from_edges(n: int, edges) -> np.ndarray:
    adj = np.zeros((n, n))
    for u, v in edges:
        u, v = int(u), int(v)
        if not (0 <= u < n and 0 <= v < n):
            raise ContractError(f"edge ({u}, {v}) out of range for {n} nodes")
        if u == v:
            continue
        adj[u, v] = adj[v, u] = 1.0
    return adj


def check_adjacency(adj: np.ndarray) -> None:
    if not np.array_equal(adj, adj.T):
        raise ContractError("adjacency must be symmetric")
    if np.diag(adj).any():
        raise ContractError("adjacency must have a zero diagonal")
    if not np.isin(adj, (0.0, 1.0)).all():
        raise ContractError("adjacency entries must be 0 or 1")


def check_edge_probs(p: np.ndarray) -> None:
    """Validate an edge-probability matrix: symmetric, zero diagonal, in [0, 1]."""
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise DimensionError(f"edge probabilities must be square, got {p.shape}")
    if np.abs(p - p.T).max(initial=0.0) > SYM_TOL:
        raise ContractError("edge probabilities must be symmetric")
    if np.diag(p).any():
        raise ContractError("edge probabilities must have a zero diagonal")
    if (p < 0).any() or (p > 1).any():
        raise ContractError("edge probabilities must lie in [0, 1]")


def _data(p):
    return p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)


def normalize_adjacency(w):
    """GCN propagation matrix ``D^-1/2 (W+I) D^-1/2`` for a symmetric nonnegative W.

    Accepts soft weights; returns a Tensor when given one so gradients flow.
    """
    arr = _data(w)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise DimensionError(f"normalize_adjacency needs a square matrix, got {arr.shape}")
    if np.abs(arr - arr.T).max(initial=0.0) > SYM_TOL:
        raise ContractError("normalize_adjacency: input is not symmetric")
    if (arr < 0).any():
        raise ContractError("normalize_adjacency: negative weights")
    out = ad.gcn_norm(w)
    return out if isinstance(w, Tensor) else out.data


def sample_edges(p, rng: np.random.Generator) -> np.ndarray:
    """Draw one adjacency: an independent Bernoulli per upper-triangle entry, mirrored."""
    p = _data(p)
    n = p.shape[0]
    iu = np.triu_indices(n, 1)
    draw = (rng.random(iu[0].size) < p[iu]).astype(np.float64)
    adj = np.zeros((n, n))
    adj[iu] = draw
    return adj + adj.T


def union_probs(pc, ps):
    """Probabilistic OR: ``1 - (1 - pc)(1 - ps)``, entrywise."""
    if isinstance(pc, Tensor) or isinstance(ps, Tensor):
        return ad.sub(ad.add(pc, ps), ad.mul(pc, ps))
    pc, ps = _data(pc), _data(ps)
    if pc.shape != ps.shape:
        raise DimensionError(f"union_probs: {pc.shape} vs {ps.shape}")
    return pc + ps - pc * ps


def mask_to_support(p, adj):
    """Restrict an edge distribution to the observed edges (``P * A``)."""
    adj = _data(adj)
    if isinstance(p, Tensor):
        return ad.mask(p, adj)
    p = _data(p)
    if p.shape != adj.shape:
        raise DimensionError(f"mask_to_support: {p.shape} vs {adj.shape}")
    return p * adj


def top_k_edges(score, adj: np.ndarray, k: int) -> np.ndarray:
    """Keep the ``k`` highest-scoring edges of ``adj``.

    Ties are broken by (min endpoint, max endpoint) ascending.
    """
    score = _data(score)
    edges = edge_list(adj)
    if k < 0 or k > len(edges):
        raise ContractError(f"top_k_edges: k={k} but graph has {len(edges)} edges")
    ranked = sorted(edges, key=lambda e: (-score[e[0], e[1]], e[0], e[1]))
    out = np.zeros_like(adj, dtype=np.float64)
    for i, j in ranked[:k]:
        out[i, j] = out[j, i] = 1.0
    return out


def sparsity_k(ratio: float, num_edges: int) -> int:
    """Edges retained at sparsity ``ratio`` (fraction kept): ``ceil(ratio * |E|)``."""
    # guard against 0.3 * 10 = 3.0000000000000004
    return min(num_edges, math.ceil(round(ratio * num_edges, 9)))


@dataclass
class Dataset:
    graphs: list[Graph]
    class_count: int
    name: str = "dataset"
    splits: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        dims = {g.d for g in self.graphs}
        if len(dims) > 1:
            raise ContractError(f"graphs disagree on feature dimension: {sorted(dims)}")
        for g in self.graphs:
            if not 0 <= g.y < self.class_count:
                raise ContractError(f"label {g.y} outside [0, {self.class_count})")
        if self.splits:
            seen = sorted(i for idx in self.splits.values() for i in idx)
            if seen != list(range(len(self.graphs))):
                raise ContractError("splits must be disjoint and cover every graph")

    def __len__(self):
        return len(self.graphs)

    @property
    def d(self) -> int:
        return self.graphs[0].d if self.graphs else 0

    def subset(self, split: str) -> list[Graph]:
        if split not in self.splits:
            raise ContractError(f"dataset has no {split!r} split")
        return [self.graphs[i] for i in self.splits[split]]


SPLIT_NAMES = ("train", "val", "test")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def split_dataset(ds: Dataset, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> Dataset:
    """Seeded, class-stratified train/val/test split."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ContractError(f"split ratios must be three nonnegative numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    splits = {name: [] for name in SPLIT_NAMES}
    labels = np.array([g.y for g in ds.graphs], dtype=np.int64)
    for c in range(ds.class_count):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            continue
        members = members[rng.permutation(members.size)]
        n_val = _round_half_up(ratios[1] * members.size)
        n_test = _round_half_up(ratios[2] * members.size)
        n_train = members.size - n_val - n_test
        counts = (n_train, n_val, n_test)
        for name, r, cnt in zip(SPLIT_NAMES, ratios, counts):
            if r > 0 and cnt <= 0:
                raise ContractError(f"class {c} has no graphs in the {name} split")
        splits["train"] += members[:n_train].tolist()
        splits["val"] += members[n_train:n_train + n_val].tolist()
        splits["test"] += members[n_train + n_val:].tolist()
    splits = {k: sorted(v) for k, v in splits.items()}
    return replace(ds, splits=splits)


def save_dataset(ds: Dataset, directory) -> None:
    """Write ``graphs.json`` (array of native graph documents) and ``manifest.json``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    (out / "graphs.json").write_text(json.dumps([g.to_json() for g in ds.graphs]) + "\n")
    manifest = {"name": ds.name, "class_count": ds.class_count, "splits": ds.splits}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def load_dataset(directory) -> Dataset:
    src = Path(directory)
    try:
        docs = json.loads((src / "graphs.json").read_text())
        manifest = json.loads((src / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise ParseError(f"missing dataset file {exc.filename}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path=src, line=exc.lineno) from exc
    graphs = []
    for i, doc in enumerate(docs):
        try:
            graphs.append(Graph.from_json(doc))
        except (KeyError, ValueError) as exc:
            raise ParseError(f"graph {i}: {exc}", path=src / "graphs.json") from exc
    splits = {k: [int(i) for i in v] for k, v in manifest.get("splits", {}).items()}
    return Dataset(graphs, int(manifest["class_count"]), manifest.get("name", src.name), splits)
