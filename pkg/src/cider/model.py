"""Two-channel variational graph autoencoder and its loss terms.

A shared GCN layer feeds two Gaussian heads: a causal head ``z_c`` and a
spurious head ``z_s | z_c`` that also sees the causal sample.  Both decode to
edge probabilities with an inner-product decoder.  A counterfactual graph
keeps the causal edges and swaps the spurious ones for a fresh draw.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, NumericError
from .gnn import GcnLayer, TaskModel, gcn_forward, glorot, propagation_matrix, task_forward
from .graph import mask_to_support, union_probs

LOG_VAR_RANGE = (-10.0, 10.0)

_HEADS = ("shared", "mu_c", "logvar_c", "mu_s", "logvar_s")


@dataclass
class LatentGaussian:
    """Per-node diagonal Gaussian (mean and clamped log-variance)."""

    mu: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise DimensionError(f"mu {self.mu.shape} vs log_var {self.log_var.shape}")


@dataclass
class CiderParams:
    """Trainable weights: one shared GCN layer and one GCN layer per head output."""

    shared: GcnLayer
    mu_c: GcnLayer
    logvar_c: GcnLayer
    mu_s: GcnLayer
    logvar_s: GcnLayer
    propagation: str = "sum"

    def __post_init__(self):
        hidden, h = self.shared.width_out, self.mu_c.width_out
        for name in ("mu_c", "logvar_c"):
            layer = getattr(self, name)
            if (layer.width_in, layer.width_out) != (hidden, h):
                raise DimensionError(f"{name} must map {hidden} -> {h}")
        for name in ("mu_s", "logvar_s"):
            layer = getattr(self, name)
            if (layer.width_in, layer.width_out) != (hidden + h, h):
                raise DimensionError(f"{name} must map {hidden + h} -> {h}")

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, hidden: int = 20, h: int = 16,
             propagation: str = "sum") -> "CiderParams":
        def layer(name, fan_in, fan_out, act, bias):
            w = Tensor(glorot(rng, fan_in, fan_out), requires_grad=True, name=name)
            b = Tensor(bias, requires_grad=True, name=f"{name}_b")
            return GcnLayer(w, b, act)

        return cls(
            shared=layer("shared", d, hidden, "relu", rng.uniform(-1.0, 1.0, size=(1, hidden))),
            mu_c=layer("mu_c", hidden, h, "identity", np.zeros((1, h))),
            logvar_c=layer("logvar_c", hidden, h, "identity", np.zeros((1, h))),
            mu_s=layer("mu_s", hidden + h, h, "identity", np.zeros((1, h))),
            logvar_s=layer("logvar_s", hidden + h, h, "identity", np.zeros((1, h))),
            propagation=propagation,
        )

    @property
    def d(self) -> int:
        return self.shared.width_in

    @property
    def hidden(self) -> int:
        return self.shared.width_out

    @property
    def h(self) -> int:
        return self.mu_c.width_out

    def layers(self) -> dict[str, GcnLayer]:
        return {name: getattr(self, name) for name in _HEADS}

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for name, layer in self.layers().items():
            out[name] = layer.weight
            out[f"{name}_b"] = layer.bias
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def frozen(self) -> "CiderParams":
        clone = copy.deepcopy(self)
        for t in clone.parameters():
            t.requires_grad = False
            t.grad = None
        return clone

    def descriptor(self) -> dict:
        return {"h": self.h, "d": self.d, "hidden": self.hidden,
                "propagation": self.propagation, "version": 1}

    def save(self, path, extra: dict | None = None) -> None:
        """Checkpoint the weights; ``extra`` is stored alongside the descriptor."""
        desc = self.descriptor()
        if extra:
            desc["extra"] = extra
        ad.save_checkpoint(path, self.named_tensors(), desc)

    @classmethod
    def load(cls, path) -> "CiderParams":
        tensors, desc = ad.load_checkpoint(path)
        if not desc or desc.get("version") != 1 or "h" not in desc:
            raise ContractError(f"{path}: not a CIDER checkpoint")
        layers = {}
        for name in _HEADS:
            act = "relu" if name == "shared" else "identity"
            layers[name] = GcnLayer(Tensor(tensors[name], name=name),
                                    Tensor(tensors[f"{name}_b"], name=f"{name}_b"), act)
        params = cls(**layers, propagation=desc.get("propagation", "sum"))
        if params.h != desc["h"] or params.d != desc["d"]:
            raise ContractError(f"{path}: tensors disagree with descriptor {desc}")
        return params


def encode_shared(params: CiderParams, x, p_t, a_hat=None) -> Tensor:
    """``relu(A_hat(P_t) X W + b)`` for the current edge distribution."""
    if a_hat is None:
        a_hat = propagation_matrix(p_t, params.propagation)
    return gcn_forward(a_hat, x if isinstance(x, Tensor) else Tensor(x), params.shared)


def _gaussian(a_hat, inp, mu_layer, lv_layer) -> LatentGaussian:
    mu = gcn_forward(a_hat, inp, mu_layer)
    log_var = ad.clamp(gcn_forward(a_hat, inp, lv_layer), *LOG_VAR_RANGE)
    return LatentGaussian(mu, log_var)


def infer_causal(params: CiderParams, h, a_hat) -> LatentGaussian:
    return _gaussian(a_hat, h, params.mu_c, params.logvar_c)


def infer_spurious(params: CiderParams, h, z_c, a_hat) -> LatentGaussian:
    """Spurious posterior conditioned on the causal sample via ``[H || z_c]``."""
    if z_c.shape != (h.shape[0], params.h):
        raise DimensionError(f"z_c must be {(h.shape[0], params.h)}, got {z_c.shape}")
    return _gaussian(a_hat, ad.concat_cols(h, z_c), params.mu_s, params.logvar_s)


def reparam_sample(g: LatentGaussian, rng: np.random.Generator) -> Tensor:
    """``mu + exp(log_var / 2) * eps`` with ``eps ~ N(0, I)``."""
    eps = rng.standard_normal(g.mu.shape)
    return ad.add(g.mu, ad.mul(ad.exp(ad.scale(g.log_var, 0.5)), eps))


def decode_inner_product(z) -> Tensor:
    """``sigmoid(z z^T)`` with the diagonal zeroed."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    n = z.shape[0]
    return ad.mask(ad.sigmoid(ad.matmul(z, ad.transpose(z))), 1.0 - np.eye(n))


def make_counterfactual(pc, ps_draw, adj):
    """Causal edges kept, spurious edges replaced: ``(pc OR ps_draw)`` on the support of A."""
    return mask_to_support(union_probs(pc, ps_draw), adj)


def _sum(terms: Sequence[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


def loss_l1_model(task_model: TaskModel, x, adj, cf_list: Sequence, ref_rep=None) -> Tensor:
    """Summed L1 gap between pooled representations on each counterfactual and on A."""
    if not cf_list:
        raise ContractError("loss_l1_model needs at least one counterfactual")
    if ref_rep is None:
        with ad.no_grad():
            ref_rep, _ = task_forward(task_model, x, adj)
    ref = ref_rep.data if isinstance(ref_rep, Tensor) else np.asarray(ref_rep)
    terms = []
    for cf in cf_list:
        rep, _ = task_forward(task_model, x, cf)
        terms.append(ad.total(ad.absolute(ad.sub(rep, ref))))
    return _sum(terms)


def loss_l1_phenomenon(task_model: TaskModel, x, cf_list: Sequence, y: int) -> Tensor:
    """Summed cross-entropy of the label under each counterfactual."""
    if not cf_list:
        raise ContractError("loss_l1_phenomenon needs at least one counterfactual")
    terms = []
    for cf in cf_list:
        _, logits = task_forward(task_model, x, cf)
        terms.append(ad.softmax_cross_entropy(logits, y))
    return _sum(terms)


def loss_kld(*gaussians: LatentGaussian) -> Tensor:
    """KL to N(0, I) summed over nodes, dims and channels, divided by node count."""
    if not gaussians:
        raise ContractError("loss_kld needs at least one Gaussian")
    n = gaussians[0].mu.shape[0]
    terms = []
    for g in gaussians:
        inner = ad.sub(ad.add(ad.exp(g.log_var), ad.mul(g.mu, g.mu)), ad.shift(g.log_var, 1.0))
        terms.append(ad.scale(ad.total(inner), 0.5 / n))
    return _sum(terms)


def positive_weight(adj: np.ndarray) -> float:
    """``n^2 / (2|E|)`` with |E| the undirected edge count."""
    ones = float(np.asarray(adj).sum())
    if ones == 0:
        raise ContractError("reconstruction weight undefined for a graph with no edges")
    return adj.shape[0] ** 2 / ones


def loss_reconstruction(p_union, adj) -> Tensor:
    """Positive-weighted binary cross-entropy over all node pairs (mean)."""
    adj = np.asarray(adj.data if isinstance(adj, Tensor) else adj, dtype=np.float64)
    return ad.weighted_bce(p_union, adj, positive_weight(adj))


def one_hot(y: int, classes: int) -> np.ndarray:
    out = np.zeros((1, classes))
    out[0, y] = 1.0
    return out


def loss_task(task_model: TaskModel, pc, x, y: int, adj) -> Tensor:
    """MSE between class probabilities on the causal subgraph and the one-hot label."""
    _, logits = task_forward(task_model, x, mask_to_support(pc, adj))
    return ad.mse(ad.softmax(logits), one_hot(y, task_model.classes))


@dataclass
class LossBreakdown:
    l1: float
    kld: float
    recon: float
    task: float
    total: float
    lambda_task: float = 1.0
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict:
        return {"l1": self.l1, "kld": self.kld, "recon": self.recon,
                "task": self.task, "total": self.total}


def _value(x) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def total_loss(l1, kld, recon, task, lambda_task: float = 1.0) -> LossBreakdown:
    """``l1 + kld + recon + lambda_task * task``; the Tensor total is kept for backward."""
    parts = {"l1": l1, "kld": kld, "recon": recon, "task": task}
    values = {}
    for name, part in parts.items():
        v = _value(part)
        if not np.isfinite(v):
            raise NumericError(f"loss part {name!r} is not finite ({v})")
        values[name] = v
    tensors = [p for p in (l1, kld, recon) if isinstance(p, Tensor)]
    if isinstance(task, Tensor) and lambda_task != 0:
        tensors.append(ad.scale(task, lambda_task))
    tot = _sum(tensors) if tensors else None
    total_value = values["l1"] + values["kld"] + values["recon"] + lambda_task * values["task"]
    return LossBreakdown(total=total_value, lambda_task=lambda_task, tensor=tot, **values)
