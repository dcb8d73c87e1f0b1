"""Attention-aware graph convolutional network over Markov call graphs.

Per graph with present nodes ``idx`` (n of them) and one-hot rows X:

    AF = X · diag(fa)
    P  = AA[idx][:, idx] ∘ P0            (P0 from ``normalize_adjacency``)
    H1 = ReLU(P · AF · W0)
    H2 = ReLU(P · H1 · W1)
    H3 = ReLU(P · H2 · W2)
    z  = mean of the rows of H3          (graph latent vector)
    logits = dropout(z) · dense + bias

Graphs are processed in zero-padded batches; padded rows and columns of P
are zero so they contribute nothing to any activation or gradient.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .graphgen import MarkovGraph, normalize_adjacency
from .ingest import Vocabulary
from .numerics import (
    dropout_mask,
    relu_fwd,
    sigmoid,
    sigmoid_bce_bwd,
    sigmoid_bce_fwd,
    softmax_xent_bwd,
    softmax_xent_fwd,
)
from .rng import derive_rng

PARAM_NAMES = ("fa", "aa", "w0", "w1", "w2", "dense", "bias")
CHECKPOINT_FORMAT = "awgcn-checkpoint"
CHECKPOINT_VERSION = 1


class VocabMismatch(ValueError):
    pass


@dataclass(frozen=True)
class AwgcnConfig:
    d: int
    num_classes: int
    dims: tuple[int, int, int] = (128, 256, 64)
    dropout: float = 0.35
    lr: float = 0.005
    propagation: str = "transition"
    directed: bool = False
    kgram: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(k) for k in self.dims))
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive sizes, got {self.dims}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.num_classes < 1 or self.d < 1:
            raise ValueError("d and num_classes must be >= 1")
        if self.propagation not in ("transition", "symmetric-gcn"):
            raise ValueError(f"unknown propagation mode {self.propagation!r}")

    @property
    def binary(self) -> bool:
        return self.num_classes == 1

    def to_dict(self) -> dict:
        out = asdict(self)
        out["dims"] = list(self.dims)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "AwgcnConfig":
        return cls(**{**d, "dims": tuple(d["dims"])})


def param_shapes(config: AwgcnConfig) -> dict[str, tuple[int, ...]]:
    d, (k1, k2, k3), c = config.d, config.dims, config.num_classes
    return {
        "fa": (d,),
        "aa": (d, d),
        "w0": (d, k1),
        "w1": (k1, k2),
        "w2": (k2, k3),
        "dense": (k3, c),
        "bias": (c,),
    }


def init_params(config: AwgcnConfig) -> dict[str, np.ndarray]:
    """Seeded uniform initialisation.

    Attention tensors start near 1 so early propagation follows the plain
    Markov graph; weight matrices are uniform in ±1/sqrt(fan_in).
    """
    params = {}
    for name, shape in param_shapes(config).items():
        rng = derive_rng(config.seed, "init", name)
        if name in ("fa", "aa"):
            params[name] = rng.uniform(0.9, 1.1, shape)
        elif name == "bias":
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, shape)
    return params


@dataclass(frozen=True)
class PreparedGraph:
    idx: np.ndarray  # (n,) vocabulary indices
    p0: np.ndarray  # (n, n) propagation matrix before adjacency attention

    @property
    def n(self) -> int:
        return len(self.idx)


def prepare(g: MarkovGraph, config: AwgcnConfig) -> PreparedGraph:
    idx = np.asarray(g.present_nodes, dtype=np.int64)
    if idx.size == 0:
        raise ValueError(f"graph {g.hash!r} has no nodes")
    if idx.max() >= config.d:
        raise VocabMismatch(f"graph {g.hash!r} uses vocabulary index {idx.max()} but d={config.d}")
    return PreparedGraph(idx, normalize_adjacency(g, config.propagation, config.directed))


@dataclass
class Batch:
    idx: np.ndarray  # (B, N) int, padding points at index 0
    mask: np.ndarray  # (B, N) 1.0 for real nodes
    p0: np.ndarray  # (B, N, N)
    n: np.ndarray  # (B,) node counts

    @classmethod
    def of(cls, graphs: Sequence[PreparedGraph]) -> "Batch":
        b, width = len(graphs), max(g.n for g in graphs)
        idx = np.zeros((b, width), dtype=np.int64)
        mask = np.zeros((b, width))
        p0 = np.zeros((b, width, width))
        for i, g in enumerate(graphs):
            idx[i, : g.n] = g.idx
            mask[i, : g.n] = 1.0
            p0[i, : g.n, : g.n] = g.p0
        return cls(idx, mask, p0, mask.sum(axis=1))


@dataclass
class ForwardTrace:
    batch: Batch
    fa_rows: np.ndarray  # fa at each node, (B, N)
    P: np.ndarray
    xw: np.ndarray  # AF · W0, (B, N, k1)
    z1: np.ndarray
    h1: np.ndarray
    y2: np.ndarray  # H1 · W1
    z2: np.ndarray
    h2: np.ndarray
    y3: np.ndarray  # H2 · W2
    z3: np.ndarray
    h3: np.ndarray
    latent: np.ndarray  # (B, k3)
    drop: np.ndarray  # (B, k3) dropout multipliers, all ones in eval mode
    logits: np.ndarray  # (B, C)
    probs: np.ndarray

    def attended_features(self, d: int, i: int = 0) -> np.ndarray:
        """AF = X · diag(fa) for graph ``i`` of the batch, as an (n, d) matrix."""
        n = int(self.batch.n[i])
        af = np.zeros((n, d))
        af[np.arange(n), self.batch.idx[i, :n]] = self.fa_rows[i, :n]
        return af


def forward_batch(
    batch: Batch,
    params: dict[str, np.ndarray],
    config: AwgcnConfig,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> ForwardTrace:
    idx, mask = batch.idx, batch.mask
    fa_rows = params["fa"][idx] * mask
    xw = fa_rows[:, :, None] * params["w0"][idx]
    P = params["aa"][idx[:, :, None], idx[:, None, :]] * batch.p0
    z1 = P @ xw
    h1 = relu_fwd(z1)
    y2 = h1 @ params["w1"]
    z2 = P @ y2
    h2 = relu_fwd(z2)
    y3 = h2 @ params["w2"]
    z3 = P @ y3
    h3 = relu_fwd(z3)
    latent = h3.sum(axis=1) / batch.n[:, None]
    if train_mode and config.dropout > 0:
        if rng is None:
            raise ValueError("train-mode forward needs a generator for dropout")
        drop = dropout_mask(latent.shape, config.dropout, rng)
    else:
        drop = np.ones_like(latent)
    logits = (latent * drop) @ params["dense"] + params["bias"]
    return ForwardTrace(
        batch, fa_rows, P, xw, z1, h1, y2, z2, h2, y3, z3, h3, latent, drop, logits, _probs(logits, config)
    )


def _probs(logits: np.ndarray, config: AwgcnConfig) -> np.ndarray:
    if config.binary:
        return sigmoid(logits)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_of(trace: ForwardTrace, labels: np.ndarray, config: AwgcnConfig) -> float:
    if config.binary:
        return sigmoid_bce_fwd(trace.logits, labels)[0]
    return softmax_xent_fwd(trace.logits, labels)[0]


def backward(
    trace: ForwardTrace,
    params: dict[str, np.ndarray],
    labels: np.ndarray,
    config: AwgcnConfig,
) -> dict[str, np.ndarray]:
    """Gradients of the batch-mean loss with respect to every parameter tensor."""
    b = trace.batch
    labels = np.asarray(labels).reshape(-1)
    if config.binary:
        _, p = sigmoid_bce_fwd(trace.logits, labels)
        dlogits = sigmoid_bce_bwd(p, labels)
    else:
        _, p = softmax_xent_fwd(trace.logits, labels)
        dlogits = softmax_xent_bwd(p, labels)

    pooled = trace.latent * trace.drop
    grads = {"dense": pooled.T @ dlogits, "bias": dlogits.sum(axis=0)}
    dlatent = (dlogits @ params["dense"].T) * trace.drop

    P = trace.P
    Pt = P.transpose(0, 2, 1)
    dh3 = (dlatent / b.n[:, None])[:, None, :] * b.mask[:, :, None]
    dz3 = dh3 * (trace.z3 > 0)
    dP = dz3 @ trace.y3.transpose(0, 2, 1)
    dy3 = Pt @ dz3
    grads["w2"] = _flat(trace.h2).T @ _flat(dy3)
    dz2 = (dy3 @ params["w2"].T) * (trace.z2 > 0)
    dP += dz2 @ trace.y2.transpose(0, 2, 1)
    dy2 = Pt @ dz2
    grads["w1"] = _flat(trace.h1).T @ _flat(dy2)
    dz1 = (dy2 @ params["w1"].T) * (trace.z1 > 0)
    dP += dz1 @ trace.xw.transpose(0, 2, 1)
    dxw = Pt @ dz1

    d = params["fa"].shape[0]
    idx, mask = b.idx, b.mask
    w0_rows = params["w0"][idx]
    grads["fa"] = np.bincount(idx.ravel(), weights=((dxw * w0_rows).sum(axis=2) * mask).ravel(), minlength=d)
    dw0 = np.zeros_like(params["w0"])
    np.add.at(dw0, idx.ravel(), _flat(dxw * trace.fa_rows[:, :, None]))
    grads["w0"] = dw0
    pair = idx[:, :, None] * d + idx[:, None, :]
    grads["aa"] = np.bincount(pair.ravel(), weights=(dP * b.p0).ravel(), minlength=d * d).reshape(d, d)
    return {k: grads[k] for k in PARAM_NAMES}


def _flat(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


# --- single-graph surface -------------------------------------------------------

def forward(
    g: MarkovGraph,
    params: dict[str, np.ndarray],
    config: AwgcnConfig,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> ForwardTrace:
    return forward_batch(Batch.of([prepare(g, config)]), params, config, train_mode, rng)


def embed(g: MarkovGraph, params: dict[str, np.ndarray], config: AwgcnConfig) -> np.ndarray:
    """Graph latent vector (length k3), dropout off."""
    return forward(g, params, config).latent[0]


def embed_many(
    graphs: Sequence[MarkovGraph],
    params: dict[str, np.ndarray],
    config: AwgcnConfig,
    chunk: int = 64,
) -> tuple[np.ndarray, np.ndarray]:
    """Latent vectors and class probabilities for many graphs, in input order."""
    prepared = [prepare(g, config) for g in graphs]
    latents, probs = [], []
    for start in range(0, len(prepared), chunk):
        t = forward_batch(Batch.of(prepared[start : start + chunk]), params, config)
        latents.append(t.latent)
        probs.append(t.probs)
    k3, c = config.dims[2], config.num_classes
    if not latents:
        return np.zeros((0, k3)), np.zeros((0, c))
    return np.concatenate(latents), np.concatenate(probs)


# --- attention ------------------------------------------------------------

def attention_report(
    params: dict[str, np.ndarray],
    vocab: Vocabulary,
    g: MarkovGraph | None = None,
) -> dict:
    """Per-call weights |fa| / max|fa| over the vocabulary; per-edge AA entries for ``g``'s edges."""
    fa = np.abs(params["fa"])
    top = fa.max()
    weights = fa / top if top > 0 else np.zeros_like(fa)
    report = {
        "calls": [{"call": name, "weight": float(w)} for name, w in zip(vocab.tokens, weights)],
        "edges": [],
    }
    if g is not None:
        aa = params["aa"]
        report["hash"] = g.hash
        report["edges"] = [
            {"src": vocab.tokens[e.src], "dst": vocab.tokens[e.dst], "weight": float(aa[e.src, e.dst])}
            for e in g.edges
        ]
    return report


# --- checkpoint -----------------------------------------------------------

def save_checkpoint(path, config: AwgcnConfig, vocab: Vocabulary, labels: Sequence[str], params, extra=None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "vocabulary": list(vocab.tokens),
        "labels": list(labels),
        "tensors": {k: {"shape": list(params[k].shape), "data": params[k].reshape(-1).tolist()} for k in PARAM_NAMES},
    }
    if extra:
        doc["extra"] = extra
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"))
        fh.write("\n")


@dataclass
class Checkpoint:
    config: AwgcnConfig
    vocabulary: Vocabulary
    labels: tuple[str, ...]
    params: dict[str, np.ndarray]
    extra: dict


def load_checkpoint(path) -> Checkpoint:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an AWGCN checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    config = AwgcnConfig.from_dict(doc["config"])
    params = {
        k: np.asarray(t["data"], dtype=np.float64).reshape(t["shape"]) for k, t in doc["tensors"].items()
    }
    vocab = Vocabulary(doc["vocabulary"])
    if len(vocab) != config.d:
        raise VocabMismatch(f"{path}: {len(vocab)} vocabulary entries but d={config.d}")
    return Checkpoint(config, vocab, tuple(doc["labels"]), params, doc.get("extra", {}))
