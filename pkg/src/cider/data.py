"""Benchmark generation, TU-format loading and expression-matrix ingestion."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractError, ParseError
from .graph import Dataset, Graph, adjacency_from_edges, split_dataset

HOUSE_EDGES = ((0, 1), (1, 2), (2, 3), (3, 0), (0, 4), (1, 4))
CYCLE5_EDGES = ((0, 1), (1, 2), (2, 3), (3, 4), (4, 0))


@dataclass(frozen=True)
class MotifSpec:
    kind: str
    edges: tuple[tuple[int, int], ...]
    size: int = 5

    @classmethod
    def house(cls) -> "MotifSpec":
        return cls("house", HOUSE_EDGES)

    @classmethod
    def cycle5(cls) -> "MotifSpec":
        return cls("cycle5", CYCLE5_EDGES)


MOTIFS = {"house": MotifSpec.house(), "cycle5": MotifSpec.cycle5()}


def generate_ba(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """Barabasi-Albert graph grown from an m-clique.

    Each arriving node links to m distinct existing nodes drawn with
    probability proportional to degree.
    """
    if not (n > m >= 1):
        raise ContractError(f"generate_ba needs n > m >= 1, got n={n}, m={m}")
    adj = np.zeros((n, n))
    adj[:m, :m] = 1.0
    np.fill_diagonal(adj, 0.0)
    deg = adj.sum(axis=1)
    for v in range(m, n):
        weights = deg[:v]
        total = weights.sum()
        # only the 1-node seed has no degree to attach by
        p = weights / total if total > 0 else None
        targets = rng.choice(v, size=m, replace=False, p=p)
        for u in targets:
            adj[u, v] = adj[v, u] = 1.0
        deg[targets] += 1
        deg[v] = m
    return adj


def attach_motif(base: np.ndarray, spec: MotifSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Append a motif after the base nodes, bridged from a random base node to motif node 0.

    Returns ``(adjacency, gt_mask)``; the mask covers the motif's own edges only.
    """
    nb = base.shape[0]
    if nb == 0:
        raise ContractError("attach_motif needs a nonempty base graph")
    n = nb + spec.size
    adj = np.zeros((n, n))
    adj[:nb, :nb] = base
    gt = np.zeros((n, n))
    for u, v in spec.edges:
        adj[nb + u, nb + v] = adj[nb + v, nb + u] = 1.0
        gt[nb + u, nb + v] = gt[nb + v, nb + u] = 1.0
    anchor = int(rng.integers(nb))
    adj[anchor, nb] = adj[nb, anchor] = 1.0
    return adj, gt


def generate_ba2motif(count: int = 1000, rng: np.random.Generator | None = None, *,
                      base_n: int = 20, base_m: int = 1, feature_dim: int = 10,
                      ratios=(0.8, 0.1, 0.1)) -> Dataset:
    """BA base graphs with a house (label 0) or 5-cycle (label 1) motif, half each."""
    if count <= 0 or count % 2:
        raise ContractError(f"count must be a positive even number, got {count}")
    rng = rng if rng is not None else np.random.default_rng(0)
    graphs = []
    for i in range(count):
        label = 0 if i < count // 2 else 1
        spec = MOTIFS["house"] if label == 0 else MOTIFS["cycle5"]
        adj, gt = attach_motif(generate_ba(base_n, base_m, rng), spec, rng)
        graphs.append(Graph(np.ones((adj.shape[0], feature_dim)), adj, label, gt))
    ds = Dataset(graphs, 2, name="ba2motif")
    return split_dataset(ds, ratios, seed=int(rng.integers(2**31)))


# ---------------------------------------------------------------------------
# TU text format
# ---------------------------------------------------------------------------

def _read_ints(path: Path, width: int | None = None) -> list[list[int]]:
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text:
                continue
            try:
                vals = [int(float(tok)) for tok in text.replace(",", " ").split()]
            except ValueError:
                raise ParseError(f"expected integers, got {text!r}", path=path, line=lineno) from None
            if width is not None and len(vals) != width:
                raise ParseError(f"expected {width} values, got {len(vals)}", path=path, line=lineno)
            rows.append(vals + [lineno])
    return rows


def _find(directory: Path, suffix: str, required: bool = True) -> Path | None:
    hits = sorted(directory.glob(f"*_{suffix}.txt"))
    if not hits:
        if required:
            raise ParseError(f"no *_{suffix}.txt file", path=directory)
        return None
    return hits[0]


def load_tu_dataset(directory) -> Dataset:
    """Read a TU-format directory (``DS_A.txt``, ``DS_graph_indicator.txt`` ...).

    Node ids in ``DS_A.txt`` are global and 1-indexed.  Node labels, when
    present, become one-hot features; otherwise every node gets a single 1.
    Graph labels are remapped to contiguous 0-based classes in sorted order.
    """
    directory = Path(directory)
    a_path = _find(directory, "A")
    ind_path = _find(directory, "graph_indicator")
    lab_path = _find(directory, "graph_labels")
    node_path = _find(directory, "node_labels", required=False)

    indicator = _read_ints(ind_path, 1)
    graph_of = np.array([row[0] for row in indicator], dtype=np.int64)
    num_nodes = graph_of.size
    ids = np.unique(graph_of)
    if ids.size == 0 or ids[0] != 1 or ids[-1] != ids.size:
        bad = next((r for r in indicator if r[0] < 1 or r[0] > ids.size), indicator[-1] if indicator else [0, 0])
        raise ParseError("graph ids must be contiguous starting at 1", path=ind_path, line=bad[-1])
    for prev, row in zip(indicator, indicator[1:]):
        if row[0] < prev[0]:
            raise ParseError("graph indicator must be sorted by graph id", path=ind_path, line=row[-1])
    n_graphs = ids.size

    labels_raw = [row[0] for row in _read_ints(lab_path, 1)]
    if len(labels_raw) != n_graphs:
        raise ParseError(f"{len(labels_raw)} graph labels for {n_graphs} graphs", path=lab_path)
    classes = sorted(set(labels_raw))
    label_map = {c: i for i, c in enumerate(classes)}

    if node_path is not None:
        node_rows = _read_ints(node_path, 1)
        if len(node_rows) != num_nodes:
            raise ParseError(f"{len(node_rows)} node labels for {num_nodes} nodes", path=node_path)
        node_lab = np.array([r[0] for r in node_rows], dtype=np.int64)
        values = np.unique(node_lab)
        col = {v: i for i, v in enumerate(values.tolist())}
        feats = np.zeros((num_nodes, values.size))
        feats[np.arange(num_nodes), [col[v] for v in node_lab.tolist()]] = 1.0
    else:
        feats = np.ones((num_nodes, 1))

    starts = np.searchsorted(graph_of, np.arange(1, n_graphs + 1))
    ends = np.append(starts[1:], num_nodes)
    edges_per_graph: list[list[tuple[int, int]]] = [[] for _ in range(n_graphs)]
    for u, v, lineno in _read_ints(a_path, 2):
        if not (1 <= u <= num_nodes and 1 <= v <= num_nodes):
            raise ParseError(f"node id out of range 1..{num_nodes}", path=a_path, line=lineno)
        gu, gv = graph_of[u - 1], graph_of[v - 1]
        if gu != gv:
            raise ParseError(f"edge ({u}, {v}) crosses graphs {gu} and {gv}", path=a_path, line=lineno)
        off = starts[gu - 1]
        edges_per_graph[gu - 1].append((u - 1 - off, v - 1 - off))

    graphs = []
    for k in range(n_graphs):
        n = int(ends[k] - starts[k])
        adj = adjacency_from_edges(n, edges_per_graph[k])
        graphs.append(Graph(feats[starts[k]:ends[k]], adj, label_map[labels_raw[k]]))
    name = a_path.name[:-len("_A.txt")]
    return Dataset(graphs, len(classes), name=name)


# ---------------------------------------------------------------------------
# expression matrices
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TabularMatrix:
    """Genes x cells (or cell types) expression values with names."""

    row_names: tuple[str, ...]
    col_names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "row_names", tuple(self.row_names))
        object.__setattr__(self, "col_names", tuple(self.col_names))
        if vals.shape != (len(self.row_names), len(self.col_names)):
            raise ContractError(f"values {vals.shape} do not match "
                                f"{len(self.row_names)} rows x {len(self.col_names)} columns")
        for kind, names in (("row", self.row_names), ("column", self.col_names)):
            if len(set(names)) != len(names):
                raise ContractError(f"duplicate {kind} names")

    @property
    def shape(self):
        return self.values.shape


def read_expression_csv(path) -> TabularMatrix:
    """CSV with a header row of cell names and gene names in the first column."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty expression file", path=path)
    cols = [c.strip() for c in rows[0][1:]]
    genes, values = [], []
    for lineno, row in enumerate(rows[1:], 2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(cols) + 1:
            raise ParseError(f"expected {len(cols) + 1} fields, got {len(row)}", path=path, line=lineno)
        try:
            values.append([float(c) for c in row[1:]])
        except ValueError as exc:
            raise ParseError(str(exc), path=path, line=lineno) from None
        genes.append(row[0].strip())
    try:
        return TabularMatrix(genes, cols, np.array(values).reshape(len(genes), len(cols)))
    except ContractError as exc:
        raise ParseError(str(exc), path=path) from None


def read_annotation_csv(path) -> dict[str, str]:
    """Two-column ``cell,type`` CSV; a leading ``cell,type`` header is skipped."""
    path = Path(path)
    out: dict[str, str] = {}
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise ParseError(f"expected 2 fields, got {len(row)}", path=path, line=lineno)
            cell, kind = row[0].strip(), row[1].strip()
            if lineno == 1 and (cell.lower(), kind.lower()) == ("cell", "type"):
                continue
            if cell in out:
                raise ParseError(f"cell {cell!r} annotated twice", path=path, line=lineno)
            out[cell] = kind
    return out


def clean_matrix(m: TabularMatrix) -> TabularMatrix:
    """Drop all-zero rows and columns until none remain."""
    if m.values.size == 0:
        raise ContractError("clean_matrix needs a nonempty matrix")
    rows = np.arange(m.shape[0])
    cols = np.arange(m.shape[1])
    vals = m.values
    while True:
        keep_r = (vals != 0).any(axis=1)
        keep_c = (vals != 0).any(axis=0)
        if keep_r.all() and keep_c.all():
            break
        rows, cols = rows[keep_r], cols[keep_c]
        vals = vals[np.ix_(keep_r, keep_c)]
        if vals.size == 0:
            raise ContractError("clean_matrix removed every row or column")
    return TabularMatrix([m.row_names[i] for i in rows], [m.col_names[j] for j in cols], vals)


def aggregate_by_celltype(m: TabularMatrix, annotation: Mapping[str, str]) -> TabularMatrix:
    """Average each row over the cells of each type; types ordered by first appearance."""
    missing = [c for c in m.col_names if c not in annotation]
    if missing:
        raise ContractError(f"unannotated cells: {missing[:5]}")
    types: list[str] = []
    for c in m.col_names:
        if annotation[c] not in types:
            types.append(annotation[c])
    labels = np.array([types.index(annotation[c]) for c in m.col_names])
    out = np.column_stack([m.values[:, labels == k].mean(axis=1) for k in range(len(types))])
    return TabularMatrix(m.row_names, types, out)


def pearson_matrix(values: np.ndarray) -> np.ndarray:
    """Row-wise Pearson correlation; rows with zero variance correlate with nothing (0)."""
    centered = values - values.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered * centered).sum(axis=1))
    live = norms > 0
    safe = np.where(live, norms, 1.0)
    unit = centered / safe[:, None]
    r = unit @ unit.T
    r[~live, :] = 0.0
    r[:, ~live] = 0.0
    return np.clip(r, -1.0, 1.0)


def correlation_network(m: TabularMatrix, threshold: float = 0.6, label: int = 0) -> Graph:
    """Graph over rows with an edge wherever ``|pearson| >= threshold``.

    Node features are the matrix rows.
    """
    if m.shape[1] < 2:
        raise ContractError("correlation_network needs at least 2 columns")
    r = pearson_matrix(m.values)
    # round off float noise so |r| == 1 survives any threshold <= 1
    adj = (np.abs(r) >= threshold - 1e-12).astype(np.float64)
    np.fill_diagonal(adj, 0.0)
    return Graph(m.values.copy(), adj, label)
