"""Recurrent causal distillation: the T-step chain, its training loop and evaluation.

Each step splits the carried edge distribution ``P_t`` into a causal factor
``Pc`` and a spurious factor ``Ps``; the chain continues with
``P_{t-1} = P_t * Pc`` so causal mass only ever shrinks.  ``P_0`` is the
per-edge causal score.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .errors import ContractError, NumericError
from .gnn import TaskModel, propagation_matrix, task_forward
from .graph import Dataset, Graph, edge_list, mask_to_support, sample_edges, top_k_edges, union_probs, sparsity_k
from .model import (
    CiderParams,
    LossBreakdown,
    decode_inner_product,
    encode_shared,
    infer_causal,
    infer_spurious,
    loss_kld,
    loss_l1_model,
    loss_l1_phenomenon,
    loss_reconstruction,
    loss_task,
    make_counterfactual,
    reparam_sample,
    total_loss,
)

log = logging.getLogger(__name__)

OBJECTIVES = ("model", "phenomenon")
UPDATE_MODES = ("per-step", "per-chain")


@dataclass
class DiffusionConfig:
    steps: int = 10
    n_causal: int = 1
    n_spurious: int = 4
    objective: str = "model"
    epochs: int = 500
    batch_size: int = 128
    learning_rate: float = 0.001
    weight_decay: float = 0.0005
    lambda_task: float = 1.0
    update_mode: str = "per-step"
    hidden: int = 20
    latent: int = 16
    eval_draws: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.n_causal < 1 or self.n_spurious < 1:
            raise ContractError("steps, n_causal and n_spurious must all be >= 1")
        if self.objective not in OBJECTIVES:
            raise ContractError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.update_mode not in UPDATE_MODES:
            raise ContractError(f"update_mode must be one of {UPDATE_MODES}, got {self.update_mode!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch_size >= 1")
        if self.eval_draws < self.n_spurious:
            raise ContractError("eval_draws must be at least n_spurious")


@dataclass
class StepRecord:
    t: int
    pc: np.ndarray
    ps: np.ndarray
    losses: LossBreakdown
    audit_recon: float


@dataclass
class DiffusionTrace:
    steps: list[StepRecord]
    scores: np.ndarray

    def to_json(self, effect: float | None = None, agreement: float | None = None) -> dict:
        doc = {
            "steps": [{"t": s.t, "pc": s.pc.tolist(), "losses": s.losses.as_dict(),
                       "audit_recon": s.audit_recon}
                      for s in self.steps],
            "scores": self.scores.tolist(),
        }
        if effect is not None:
            doc["effect"] = effect
        if agreement is not None:
            doc["agreement"] = agreement
        return doc


@dataclass
class ExplanationResult:
    scores: np.ndarray
    adj: np.ndarray
    causal_effect: float
    label_agreement: float
    untrained: bool = False

    @property
    def score_sparsity(self) -> float:
        """Expected fraction of edges kept: mean score over the observed edges."""
        m = self.adj.sum()
        return float(self.scores.sum() / m) if m else 0.0

    def subgraph_at(self, ratio: float) -> np.ndarray:
        return top_k_edges(self.scores, self.adj, sparsity_k(ratio, int(self.adj.sum() // 2)))


def _check_support(p: np.ndarray, adj: np.ndarray) -> None:
    if p.shape != adj.shape:
        raise ContractError(f"edge distribution {p.shape} does not match graph {adj.shape}")
    if (p > adj + 1e-12).any() or (p < 0).any():
        raise ContractError("edge distribution is not supported on the graph's edges")


def step_loss(params: CiderParams, task_model: TaskModel, graph: Graph, p_t,
              cfg: DiffusionConfig, rng: np.random.Generator, ref_rep: np.ndarray | None = None):
    """Forward pass of one step as a Tensor expression: ``(Pc, Ps, LossBreakdown)``.

    ``Pc`` and ``Ps`` are the sample means of the decoded causal and spurious
    edge probabilities over all node pairs.  ``p_t`` may be a Tensor, which
    keeps a whole chain differentiable (used for gradient checks).
    """
    adj = graph.adj
    if ref_rep is None:
        with ad.no_grad():
            ref_rep = task_forward(task_model, graph.x, adj)[0].data
    a_hat = propagation_matrix(p_t, params.propagation)
    h = encode_shared(params, graph.x, p_t, a_hat=a_hat)
    gc = infer_causal(params, h, a_hat)
    pcs, ps_all, cfs, spurious = [], [], [], []
    for _ in range(cfg.n_causal):
        zc = reparam_sample(gc, rng)
        pc_full = decode_inner_product(zc)
        gs = infer_spurious(params, h, zc, a_hat)
        spurious.append(gs)
        pcs.append(pc_full)
        for _ in range(cfg.n_spurious):
            ps_draw = decode_inner_product(reparam_sample(gs, rng))
            ps_all.append(ps_draw)
            cfs.append(make_counterfactual(pc_full, ps_draw, adj))
    pc_mean = _mean(pcs)
    ps_mean = _mean(ps_all)
    if cfg.objective == "model":
        l1 = loss_l1_model(task_model, graph.x, adj, cfs, ref_rep=ref_rep)
    else:
        l1 = loss_l1_phenomenon(task_model, graph.x, cfs, graph.y)
    kld = loss_kld(gc, *spurious)
    recon = loss_reconstruction(union_probs(pc_mean, ps_mean), adj)
    task = loss_task(task_model, pc_mean, graph.x, graph.y, adj)
    return pc_mean, ps_mean, total_loss(l1, kld, recon, task, cfg.lambda_task)


def distill_step(params: CiderParams, task_model: TaskModel, graph: Graph, p_t,
                 cfg: DiffusionConfig, rng: np.random.Generator, learn: bool = False,
                 optimizer: Adam | None = None, ref_rep: np.ndarray | None = None,
                 step_update: bool = True):
    """One distillation step on ``P_t``; returns ``(Pc, Ps, LossBreakdown)``.

    ``Pc`` and ``Ps`` are restricted to the graph's edges.  With ``learn``
    the loss is backpropagated into ``params``; the Adam update is applied
    here unless ``step_update`` is false (per-chain accumulation).
    """
    adj = graph.adj
    p_t = np.asarray(p_t.data if isinstance(p_t, Tensor) else p_t, dtype=np.float64)
    _check_support(p_t, adj)
    if learn and optimizer is None:
        raise ContractError("learning step needs an optimizer")
    with ad.Tape() if learn else ad.no_grad():
        pc_mean, ps_mean, parts = step_loss(params, task_model, graph, p_t, cfg, rng, ref_rep)
        if learn:
            ad.backward(parts.tensor)
    if learn and step_update:
        _apply(optimizer)
    return mask_to_support(pc_mean.data, adj), mask_to_support(ps_mean.data, adj), parts


def chain_loss(params: CiderParams, task_model: TaskModel, graph: Graph,
               cfg: DiffusionConfig, rng: np.random.Generator) -> Tensor:
    """Summed loss of all T steps with ``P_{t-1} = P_t * Pc`` kept differentiable."""
    adj = graph.adj
    with ad.no_grad():
        ref_rep = task_forward(task_model, graph.x, adj)[0].data
    p = Tensor(adj)
    out = None
    for _ in range(cfg.steps):
        pc, _, parts = step_loss(params, task_model, graph, p, cfg, rng, ref_rep)
        out = parts.tensor if out is None else ad.add(out, parts.tensor)
        p = ad.mul(p, mask_to_support(pc, adj))
    return out


def _mean(ts: Sequence[Tensor]) -> Tensor:
    out = ts[0]
    for t in ts[1:]:
        out = ad.add(out, t)
    return out if len(ts) == 1 else ad.scale(out, 1.0 / len(ts))


def _apply(optimizer: Adam) -> None:
    for p in optimizer.params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    optimizer.step()


def audit_reconstruction(pc: np.ndarray, ps: np.ndarray, p_t: np.ndarray, adj: np.ndarray) -> float:
    """Reconstruction loss of ``union(Pc*P_t, Ps*P_t)`` against the step's input support."""
    support = (p_t > 0).astype(np.float64)
    if not support.any():
        return 0.0
    rebuilt = union_probs(pc * p_t, ps * p_t)
    with ad.no_grad():
        return loss_reconstruction(Tensor(rebuilt), support).item()


def graph_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, graph index)."""
    return np.random.default_rng((seed, index))


def run_chain(params, task_model, graph, cfg, rng, learn=False, optimizer=None):
    """Run ``P_T = A``, ..., ``P_0``; returns the trace (and updates params when learning)."""
    with ad.no_grad():
        ref_rep = task_forward(task_model, graph.x, graph.adj)[0].data
    p = graph.adj.copy()
    records = []
    per_chain = learn and cfg.update_mode == "per-chain"
    for t in range(cfg.steps, 0, -1):
        pc, ps, parts = distill_step(params, task_model, graph, p, cfg, rng, learn=learn,
                                     optimizer=optimizer, ref_rep=ref_rep, step_update=not per_chain)
        records.append(StepRecord(t, pc, ps, parts, audit_reconstruction(pc, ps, p, graph.adj)))
        p = p * pc
    if per_chain:
        _apply(optimizer)
    return DiffusionTrace(records, p)


def _hard_counterfactual(causal_p, spurious_p, adj, rng):
    keep = sample_edges(causal_p, rng)
    fresh = sample_edges(spurious_p, rng)
    return np.maximum(keep, fresh) * adj


def _intervention_stats(task_model, graph, draws: Sequence[np.ndarray]) -> tuple[float, float]:
    with ad.no_grad():
        ref_rep, ref_logits = task_forward(task_model, graph.x, graph.adj)
        ref_label = int(np.argmax(ref_logits.data))
        gaps, agree = [], 0
        for cf in draws:
            rep, logits = task_forward(task_model, graph.x, cf)
            gaps.append(float(np.abs(rep.data - ref_rep.data).sum()))
            agree += int(np.argmax(logits.data)) == ref_label
    return float(np.mean(gaps)), agree / len(draws)


def explain_graph(params: CiderParams, task_model: TaskModel, graph: Graph,
                  cfg: DiffusionConfig, rng: np.random.Generator,
                  untrained: bool = False) -> tuple[ExplanationResult, DiffusionTrace]:
    """Score every edge and measure counterfactual invariance of the explanation.

    Counterfactuals keep a Bernoulli draw of the scored causal edges and
    replace the rest with a fresh draw from the spurious channel at ``P_T = A``.
    A graph without edges has nothing to explain: its trace has no steps.
    """
    if graph.num_edges == 0:
        empty = np.zeros_like(graph.adj)
        return ExplanationResult(empty, graph.adj, 0.0, 1.0, untrained), DiffusionTrace([], empty)
    trace = run_chain(params, task_model, graph, cfg, rng, learn=False)
    spurious_p = trace.steps[0].ps
    draws = [_hard_counterfactual(trace.scores, spurious_p, graph.adj, rng)
             for _ in range(cfg.eval_draws)]
    effect, agreement = _intervention_stats(task_model, graph, draws)
    result = ExplanationResult(trace.scores, graph.adj, effect, agreement, untrained)
    return result, trace


def causal_strength(task_model: TaskModel, graph: Graph, subgraph: np.ndarray, draws: int,
                    rng: np.random.Generator) -> tuple[float, float]:
    """Model-free intervention: resample ``A \\ subgraph`` as Bernoulli(0.5) edges.

    Returns ``(effect, agreement)``: the mean L1 representation gap and the
    fraction of draws whose predicted class matches the full graph's.
    """
    subgraph = np.asarray(subgraph, dtype=np.float64)
    if subgraph.shape != graph.adj.shape or (subgraph > graph.adj).any():
        raise ContractError("subgraph is not contained in the graph")
    if draws < 1:
        raise ContractError("causal_strength needs at least one draw")
    rest = graph.adj - subgraph
    cfs = [subgraph + sample_edges(0.5 * rest, rng) * rest for _ in range(draws)]
    return _intervention_stats(task_model, graph, cfs)


@dataclass
class EpochLog:
    epoch: int
    l1: float
    kld: float
    recon: float
    task: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class CiderTrainResult:
    params: CiderParams
    log: list[EpochLog] = field(default_factory=list)


def train_cider(params: CiderParams, task_model: TaskModel, ds: Dataset, cfg: DiffusionConfig,
                split: str = "train", limit: int | None = None,
                on_epoch: Callable[[EpochLog], None] | None = None) -> CiderTrainResult:
    """Fit the VGAE heads over every graph's chain; losses are averaged per epoch.

    ``limit`` caps the number of training graphs (taken in split order).
    Edgeless graphs are skipped since their reconstruction weight is undefined.
    """
    if any(p.requires_grad for p in task_model.parameters()):
        raise ContractError("task model must be frozen before CIDER training")
    if not ds.splits:
        raise ContractError("train_cider needs a split dataset")
    if params.d != ds.d:
        raise ContractError(f"CIDER params expect {params.d} features, dataset has {ds.d}")
    graphs = ds.subset(split)
    if limit is not None:
        graphs = graphs[:limit]
    skipped = sum(g.num_edges == 0 for g in graphs)
    graphs = [g for g in graphs if g.num_edges > 0]
    if skipped:
        log.warning("skipping %d edgeless training graphs", skipped)
    if not graphs:
        raise ContractError(f"split {split!r} has no graphs with edges")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(params.parameters(), learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(graphs))
        sums = np.zeros(5)
        count = 0
        for start in range(0, len(order), cfg.batch_size):
            for i in order[start:start + cfg.batch_size]:
                try:
                    trace = run_chain(params, task_model, graphs[i], cfg, rng, learn=True, optimizer=opt)
                except NumericError as exc:
                    raise NumericError(f"epoch {epoch}, graph {i}: {exc}") from exc
                for rec in trace.steps:
                    b = rec.losses
                    sums += (b.l1, b.kld, b.recon, b.task, b.total)
                    count += 1
        entry = EpochLog(epoch, *(sums / count).tolist())
        if not all(np.isfinite(v) for v in sums):
            raise NumericError(f"non-finite loss at epoch {epoch}")
        history.append(entry)
        if on_epoch:
            on_epoch(entry)
    return CiderTrainResult(params, history)


def explain_dataset(params, task_model, graphs: Sequence[Graph], cfg: DiffusionConfig,
                    indices: Sequence[int] | None = None, untrained: bool = False):
    """Explain each graph with its own RNG stream; returns ``[(result, trace)]``."""
    indices = list(range(len(graphs))) if indices is None else list(indices)
    return [explain_graph(params, task_model, g, cfg, graph_rng(cfg.seed, idx), untrained)
            for g, idx in zip(graphs, indices)]


def motif_recall(scores: np.ndarray, graph: Graph, k: int) -> float:
    """Fraction of ground-truth edges among the ``k`` highest-scored edges."""
    gt = graph.gt_edges()
    if not gt:
        raise ContractError("graph has no ground-truth edges")
    top = top_k_edges(scores, graph.adj, min(k, graph.num_edges))
    return sum(top[i, j] for i, j in gt) / len(gt)


def motif_precision(scores: np.ndarray, graph: Graph, k: int) -> float:
    top = top_k_edges(scores, graph.adj, min(k, graph.num_edges))
    kept = edge_list(top)
    if not kept:
        return 0.0
    return sum(graph.gt_mask[i, j] for i, j in kept) / len(kept)


def save_trace(path, trace: DiffusionTrace, result: ExplanationResult) -> None:
    doc = trace.to_json(result.causal_effect, result.label_agreement)
    doc["untrained"] = result.untrained
    Path(path).write_text(json.dumps(doc) + "\n")
