"""GCN layers and the graph classifier that CIDER explains.

The classifier is ``logits = head(mean_nodes(gcn_K(...gcn_1(A_hat, X))))``.
The pooled vector is the representation used by the counterfactual L1 loss;
the head maps it to class logits.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .errors import ContractError, DimensionError, NumericError
from .graph import Dataset, Graph

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "identity")
PROPAGATIONS = ("sum", "sym")


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class GcnLayer:
    """One propagation step ``act(A_hat @ H @ W + b)``.

    The bias matters: with constant node features and no bias, a ReLU GCN is
    positively homogeneous and collapses to a single scalar per graph.
    """

    weight: Tensor
    bias: Tensor | None = None
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")

    @property
    def width_in(self) -> int:
        return self.weight.shape[0]

    @property
    def width_out(self) -> int:
        return self.weight.shape[1]


def gcn_forward(a_hat, h, layer: GcnLayer) -> Tensor:
    """``act(A_hat @ H @ W + b)``."""
    h_width = h.shape[1]
    if h_width != layer.width_in:
        raise DimensionError(f"layer expects width {layer.width_in}, got {h_width}")
    if h_width <= layer.width_out:
        out = ad.matmul(ad.matmul(a_hat, h), layer.weight)
    else:
        out = ad.matmul(a_hat, ad.matmul(h, layer.weight))
    if layer.bias is not None:
        out = ad.add(out, layer.bias)
    return ad.relu(out) if layer.activation == "relu" else out


def propagation_matrix(edge_weights, mode: str = "sum"):
    """Message-passing matrix for (soft) edge weights ``W``.

    ``"sum"`` is ``W + I`` (self loop plus weighted neighbor sum); ``"sym"`` is
    the symmetric GCN normalization ``D^-1/2 (W + I) D^-1/2``.  Constant input
    gives a constant Tensor that never lands on the tape.
    """
    if mode not in PROPAGATIONS:
        raise ContractError(f"unknown propagation {mode!r}; expected one of {PROPAGATIONS}")
    if isinstance(edge_weights, Tensor):
        if mode == "sym":
            return ad.gcn_norm(edge_weights)
        return ad.add(edge_weights, np.eye(edge_weights.shape[0]))
    w = np.asarray(edge_weights, dtype=np.float64)
    if mode == "sym":
        return Tensor(ad.gcn_norm(Tensor(w)).data)
    return Tensor(w + np.eye(w.shape[0]))


class TaskModel:
    """K GCN layers, mean-pool readout and a linear head to C logits."""

    def __init__(self, layers: Sequence[GcnLayer], head_w: Tensor, head_b: Tensor,
                 propagation: str = "sum"):
        if propagation not in PROPAGATIONS:
            raise ContractError(f"unknown propagation {propagation!r}")
        self.layers = list(layers)
        self.head_w = head_w
        self.head_b = head_b
        self.propagation = propagation
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.width_out != nxt.width_in:
                raise DimensionError("GCN layer widths do not chain")
        if head_w.shape[0] != self.d_pool:
            raise DimensionError(f"head expects {head_w.shape[0]} inputs, pool gives {self.d_pool}")

    @classmethod
    def init(cls, d: int, widths: Sequence[int], classes: int, rng: np.random.Generator,
             propagation: str = "sum") -> "TaskModel":
        layers = []
        fan_in = d
        for i, w in enumerate(widths):
            weight = Tensor(glorot(rng, fan_in, w), requires_grad=True, name=f"gcn{i}")
            # random offsets put ReLU kinks inside the data range from the start
            bias = Tensor(rng.uniform(-1.0, 1.0, size=(1, w)), requires_grad=True, name=f"gcn{i}_b")
            layers.append(GcnLayer(weight, bias, "relu"))
            fan_in = w
        head_w = Tensor(glorot(rng, fan_in, classes), requires_grad=True, name="head_w")
        head_b = Tensor(np.zeros((1, classes)), requires_grad=True, name="head_b")
        return cls(layers, head_w, head_b, propagation)

    @property
    def d(self) -> int:
        return self.layers[0].width_in

    @property
    def d_pool(self) -> int:
        return self.layers[-1].width_out

    @property
    def classes(self) -> int:
        return self.head_w.shape[1]

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def named_tensors(self) -> dict[str, Tensor]:
        named = {}
        for i, layer in enumerate(self.layers):
            named[f"gcn{i}"] = layer.weight
            if layer.bias is not None:
                named[f"gcn{i}_b"] = layer.bias
        named["head_w"] = self.head_w
        named["head_b"] = self.head_b
        return named

    def descriptor(self) -> dict:
        return {"layers": [layer.width_out for layer in self.layers],
                "classes": self.classes, "d": self.d, "propagation": self.propagation}

    def frozen(self) -> "TaskModel":
        """A copy whose tensors do not require gradients."""
        clone = copy.deepcopy(self)
        for t in clone.parameters():
            t.requires_grad = False
            t.grad = None
        return clone

    def snapshot(self) -> list[np.ndarray]:
        return [t.data.copy() for t in self.parameters()]

    def restore(self, snap: list[np.ndarray]) -> None:
        for t, arr in zip(self.parameters(), snap):
            t.data = arr.copy()

    def save(self, path) -> None:
        ad.save_checkpoint(path, self.named_tensors(), self.descriptor())

    @classmethod
    def load(cls, path) -> "TaskModel":
        tensors, desc = ad.load_checkpoint(path)
        if not desc or "layers" not in desc:
            raise ContractError(f"{path}: not a task-model checkpoint")
        layers = []
        for i, width in enumerate(desc["layers"]):
            w = tensors[f"gcn{i}"]
            if w.shape[1] != width:
                raise ContractError(f"{path}: gcn{i} width {w.shape[1]} != descriptor {width}")
            b = tensors.get(f"gcn{i}_b")
            layers.append(GcnLayer(Tensor(w, name=f"gcn{i}"),
                                   None if b is None else Tensor(b, name=f"gcn{i}_b"), "relu"))
        model = cls(layers, Tensor(tensors["head_w"], name="head_w"), Tensor(tensors["head_b"], name="head_b"),
                    desc.get("propagation", "sum"))
        if model.d != desc["d"] or model.classes != desc["classes"]:
            raise ContractError(f"{path}: tensors disagree with architecture descriptor")
        return model


def task_forward(model: TaskModel, x, edge_weights, a_hat=None) -> tuple[Tensor, Tensor]:
    """Return ``(rep, logits)``: the mean-pooled last GCN output and the head's logits.

    ``edge_weights`` may be a soft (Tensor) edge-probability matrix so that
    interventions stay differentiable.  ``a_hat`` short-circuits the
    normalization when the caller has it cached.
    """
    if a_hat is None:
        a_hat = propagation_matrix(edge_weights, model.propagation)
    h = x if isinstance(x, Tensor) else Tensor(x)
    if h.shape[1] != model.d:
        raise DimensionError(f"model expects {model.d} features, got {h.shape[1]}")
    for layer in model.layers:
        h = gcn_forward(a_hat, h, layer)
    rep = ad.mean_rows(h)
    logits = ad.add(ad.matmul(rep, model.head_w), model.head_b)
    return rep, logits


def predict(model: TaskModel, x, edge_weights) -> int:
    with ad.no_grad():
        _, logits = task_forward(model, x, edge_weights)
    return int(np.argmax(logits.data[0]))


@dataclass
class TrainConfig:
    widths: tuple[int, ...] = (20, 20, 20)
    learning_rate: float = 0.001
    weight_decay: float = 0.0005
    batch_size: int = 32
    epochs: int = 500
    patience: int = 100
    seed: int = 0
    propagation: str = "sum"


@dataclass
class TrainResult:
    model: TaskModel
    test_accuracy: float
    val_accuracy: float
    best_epoch: int
    epoch_loss: list[float] = field(default_factory=list)
    epoch_val_accuracy: list[float] = field(default_factory=list)

    def metrics(self) -> dict:
        return {"test_accuracy": self.test_accuracy, "val_accuracy": self.val_accuracy,
                "best_epoch": self.best_epoch, "epochs_run": len(self.epoch_loss),
                "final_train_loss": self.epoch_loss[-1] if self.epoch_loss else None}


def train_task_model(ds: Dataset, cfg: TrainConfig | None = None,
                     on_epoch: Callable[[int, float, float], None] | None = None) -> TrainResult:
    """Fit the classifier with softmax cross-entropy and Adam.

    Gradients are accumulated over each minibatch (one tape per graph) and
    the weights with the best validation accuracy are kept.
    """
    cfg = cfg or TrainConfig()
    if not ds.splits:
        raise ContractError("train_task_model needs a split dataset")
    rng = np.random.default_rng(cfg.seed)
    model = TaskModel.init(ds.d, cfg.widths, ds.class_count, rng, cfg.propagation)
    opt = Adam(model.parameters(), learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay)

    train = ds.subset("train")
    val = ds.subset("val") or train
    a_hats = [propagation_matrix(g.adj, cfg.propagation) for g in train]
    xs = [Tensor(g.x) for g in train]

    best_acc, best_epoch, best = -1.0, 0, model.snapshot()
    if cfg.epochs <= 0:
        best_acc = evaluate_accuracy(model, val)
    losses, val_curve = [], []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            for i in batch:
                with ad.Tape():
                    _, logits = task_forward(model, xs[i], None, a_hat=a_hats[i])
                    loss = ad.scale(ad.softmax_cross_entropy(logits, train[i].y), 1.0 / len(batch))
                    ad.backward(loss)
                epoch_loss += loss.item() * len(batch)
            for p in model.parameters():
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            opt.step()
        epoch_loss /= max(len(train), 1)
        if not np.isfinite(epoch_loss):
            raise NumericError(f"task training diverged at epoch {epoch}")
        acc = evaluate_accuracy(model, val)
        losses.append(epoch_loss)
        val_curve.append(acc)
        if on_epoch:
            on_epoch(epoch, epoch_loss, acc)
        if acc > best_acc:
            best_acc, best_epoch, best = acc, epoch, model.snapshot()
        elif epoch - best_epoch >= cfg.patience:
            log.info("early stop at epoch %d (best %d, val acc %.4f)", epoch, best_epoch, best_acc)
            break
    model.restore(best)
    model = model.frozen()
    test = ds.subset("test") if ds.splits.get("test") else val
    return TrainResult(model, evaluate_accuracy(model, test), best_acc, best_epoch, losses, val_curve)


def evaluate_accuracy(model: TaskModel, graphs: Sequence[Graph],
                      mask_provider: Callable[[int, Graph], np.ndarray] | None = None) -> float:
    """Fraction of graphs whose argmax logits on (X, masked A) equal the label.

    ``mask_provider(i, graph)`` returns the adjacency to evaluate on; it must
    be a subgraph of ``graph.adj``.  ``None`` uses the full graph.
    """
    if not graphs:
        return float("nan")
    correct = 0
    for i, g in enumerate(graphs):
        adj = g.adj if mask_provider is None else np.asarray(mask_provider(i, g), dtype=np.float64)
        if adj.shape != g.adj.shape or (adj > g.adj).any():
            raise ContractError(f"mask for graph {i} is not a subgraph of its adjacency")
        correct += predict(model, g.x, adj) == g.y
    return correct / len(graphs)
