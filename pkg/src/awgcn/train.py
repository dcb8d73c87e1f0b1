"""Splitting, the training loop and evaluation."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .graphgen import MarkovGraph, build_graph
from .ingest import CallSequence, Dataset, Vocabulary
from .metrics import confusion_matrix, ovr_auc, precision_recall_f1
from .model import (
    AwgcnConfig,
    Batch,
    PreparedGraph,
    backward,
    embed_many,
    forward_batch,
    init_params,
    loss_of,
    prepare,
)
from .numerics import AdamState, adam_step, sgd_step
from .rng import derive_rng

log = logging.getLogger(__name__)

# Gradient work is cut into fixed-size chunks and summed in chunk order, so the
# result does not depend on how many worker threads evaluate the chunks.
CHUNK = 64
# L2 decay applies to the weight matrices and feature attention, not to adjacency attention
DECAYED = ("fa", "w0", "w1", "w2", "dense")


class LabelTooSmall(ValueError):
    pass


class DivergedLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    ratio: float = 0.8
    stratified: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.ratio < 1:
            raise ValueError("split ratio must lie in (0, 1)")


def split_indices(ds: Dataset, spec: SplitSpec) -> tuple[list[int], list[int]]:
    """Partition sequence indices into train/test; test-only sequences always land in test."""
    pool = [i for i, s in enumerate(ds.sequences) if not s.test_only]
    forced = [i for i, s in enumerate(ds.sequences) if s.test_only]
    train, test = [], []
    if spec.stratified:
        for label in ds.label_set:
            members = [i for i in pool if ds.sequences[i].label == label]
            if not members:
                continue
            if len(members) < 2:
                raise LabelTooSmall(f"label {label!r} has {len(members)} sample(s); need 2 to stratify")
            order = derive_rng(spec.seed, "split", label).permutation(len(members))
            n_train = min(max(int(round(spec.ratio * len(members))), 1), len(members) - 1)
            train += [members[k] for k in order[:n_train]]
            test += [members[k] for k in order[n_train:]]
    else:
        order = derive_rng(spec.seed, "split").permutation(len(pool))
        n_train = int(round(spec.ratio * len(pool)))
        train = [pool[k] for k in order[:n_train]]
        test = [pool[k] for k in order[n_train:]]
    return sorted(train), sorted(test) + forced


def split(
    ds: Dataset, spec: SplitSpec, extra_test: Sequence[CallSequence] = ()
) -> tuple[list[CallSequence], list[CallSequence]]:
    tr, te = split_indices(ds, spec)
    return [ds.sequences[i] for i in tr], [ds.sequences[i] for i in te] + list(extra_test)


@dataclass(frozen=True)
class TrainOptions:
    epochs: int = 200
    patience: int = 20
    min_delta: float = 1e-2  # relative, between consecutive loss windows
    batch_size: int = 0  # 0: full batch, one optimiser step per epoch
    optimizer: str = "adam"
    weight_decay: float = 1e-2
    workers: int = 1


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    losses: list[float]
    stopped_early: bool = False


def label_vector(seqs: Sequence[CallSequence], labels: Sequence[str], config: AwgcnConfig) -> np.ndarray:
    y = np.array([list(labels).index(s.label) for s in seqs], dtype=np.int64)
    if config.binary and len(labels) > 2:
        raise ValueError("sigmoid head needs at most two labels")
    return y


def graphs_for(seqs: Sequence[CallSequence], vocab: Vocabulary, config: AwgcnConfig) -> list[MarkovGraph]:
    return [build_graph(s, vocab, config.kgram) for s in seqs]


def _chunk_grad(prepared, y, config, params, rng):
    trace = forward_batch(Batch.of(prepared), params, config, train_mode=True, rng=rng)
    return loss_of(trace, y, config), backward(trace, params, y, config)


def plateaued(losses: Sequence[float], patience: int, min_delta: float) -> bool:
    if patience <= 0 or len(losses) < 2 * patience:
        return False
    recent = float(np.mean(losses[-patience:]))
    prior = float(np.mean(losses[-2 * patience : -patience]))
    return recent > prior * (1.0 - min_delta)


def fit(
    graphs: Sequence[MarkovGraph],
    y: np.ndarray,
    config: AwgcnConfig,
    opts: TrainOptions = TrainOptions(),
    on_epoch: Callable[[int, dict[str, np.ndarray]], None] | None = None,
) -> TrainResult:
    """Train from a fresh seeded initialisation.

    Each epoch shuffles the graphs, splits them into mini-batches (the whole
    set by default), accumulates per-chunk gradients and takes one optimiser
    step per mini-batch.  ``on_epoch(epoch, params)`` sees the parameters at
    the start of every epoch.  The recorded loss is the regularised objective
    (data loss plus the L2 penalty when ``weight_decay`` is set).  Stops after ``opts.epochs`` epochs or on a
    plateau: the mean loss over the last ``patience`` epochs is less than a
    ``min_delta`` fraction below the mean of the ``patience`` epochs before.
    Window means are used because dropout makes single-epoch losses noisy.
    """
    if not graphs:
        raise ValueError("empty training set")
    y = np.asarray(y, dtype=np.int64)
    prepared: list[PreparedGraph] = [prepare(g, config) for g in graphs]
    params = init_params(config)
    state = AdamState.zeros_like(params)
    n = len(prepared)
    bs = opts.batch_size if opts.batch_size > 0 else n
    losses: list[float] = []
    stopped = False
    pool = ThreadPoolExecutor(max_workers=max(1, opts.workers)) if opts.workers > 1 else None
    try:
        for epoch in range(opts.epochs):
            if on_epoch is not None:
                on_epoch(epoch, params)
            order = derive_rng(config.seed, "shuffle", epoch).permutation(n)
            epoch_loss = 0.0
            for step, start in enumerate(range(0, n, bs)):
                members = order[start : start + bs]
                chunks = [members[c : c + CHUNK] for c in range(0, len(members), CHUNK)]
                jobs = [
                    (
                        [prepared[i] for i in ch],
                        y[ch],
                        config,
                        params,
                        derive_rng(config.seed, "dropout", epoch, step, k),
                    )
                    for k, ch in enumerate(chunks)
                ]
                results = list(pool.map(lambda a: _chunk_grad(*a), jobs)) if pool else [_chunk_grad(*a) for a in jobs]
                grads = {k: np.zeros_like(v) for k, v in params.items()}
                loss = 0.0
                for ch, (l, g) in zip(chunks, results):
                    w = len(ch) / len(members)
                    loss += w * l
                    for k in grads:
                        grads[k] += w * g[k]
                if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                    raise DivergedLoss(f"non-finite loss/gradient at epoch {epoch}, step {step} (loss={loss})")
                if opts.weight_decay:
                    loss += 0.5 * opts.weight_decay * sum(float(np.sum(params[k] ** 2)) for k in DECAYED)
                    for k in DECAYED:
                        grads[k] = grads[k] + opts.weight_decay * params[k]
                if opts.optimizer == "adam":
                    params, state = adam_step(params, grads, state, config.lr)
                elif opts.optimizer == "sgd":
                    params = sgd_step(params, grads, config.lr)
                else:
                    raise ValueError(f"unknown optimizer {opts.optimizer!r}")
                epoch_loss += loss * len(members) / n
            losses.append(epoch_loss)
            log.debug("epoch %d loss %.6f", epoch, epoch_loss)
            if plateaued(losses, opts.patience, opts.min_delta):
                stopped = True
                break
    finally:
        if pool:
            pool.shutdown()
    return TrainResult(params, losses, stopped)


@dataclass
class EvalReport:
    accuracy: float
    macro_f1: float
    macro_auc: float | None
    weighted_auc: float | None
    labels: list[str]
    precision: list[float]
    recall: list[float]
    f1: list[float]
    confusion: list[list[int]]
    n: int

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "macro_auc": self.macro_auc,
            "weighted_auc": self.weighted_auc,
            "per_class": [
                {"label": lab, "precision": p, "recall": r, "f1": f}
                for lab, p, r, f in zip(self.labels, self.precision, self.recall, self.f1)
            ],
            "confusion": self.confusion,
        }

    def confusion_csv(self) -> str:
        rows = ["true\\pred," + ",".join(self.labels)]
        rows += [lab + "," + ",".join(str(v) for v in row) for lab, row in zip(self.labels, self.confusion)]
        return "\n".join(rows) + "\n"


def report_from_scores(y_true: np.ndarray, scores: np.ndarray, labels: Sequence[str]) -> EvalReport:
    """Build an EvalReport from class probabilities ((n, C), or (n, 1) positive-class for binary)."""
    y_true = np.asarray(y_true, dtype=int)
    scores = np.asarray(scores, dtype=float)
    if scores.ndim == 2 and scores.shape[1] > 1:
        y_pred = scores.argmax(axis=1)
    else:
        y_pred = (scores.reshape(-1) >= 0.5).astype(int)
    c = len(labels)
    cm = confusion_matrix(y_true, y_pred, c)
    precision, recall, f1 = precision_recall_f1(cm)
    seen = (cm.sum(axis=0) + cm.sum(axis=1)) > 0
    macro, weighted, _ = ovr_auc(y_true, scores)
    if macro is None:
        log.warning("test set holds a single class; AUC undefined")
    accuracy = float(np.trace(cm) / cm.sum()) if cm.sum() else 0.0
    return EvalReport(
        accuracy=accuracy,
        macro_f1=float(f1[seen].mean()) if seen.any() else 0.0,
        macro_auc=macro,
        weighted_auc=weighted,
        labels=list(labels),
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        confusion=cm.tolist(),
        n=int(len(y_true)),
    )


def evaluate(
    graphs: Sequence[MarkovGraph],
    y: np.ndarray,
    params: dict[str, np.ndarray],
    config: AwgcnConfig,
    labels: Sequence[str],
) -> EvalReport:
    _, probs = embed_many(graphs, params, config)
    return report_from_scores(y, probs, labels)


# --- end-to-end helper -------------------------------------------------------

@dataclass
class Experiment:
    config: AwgcnConfig
    train_idx: list[int]
    test_idx: list[int]
    result: TrainResult
    report: EvalReport


def make_config(ds: Dataset, **overrides) -> AwgcnConfig:
    c = len(ds.label_set)
    return AwgcnConfig(d=len(ds.vocabulary), num_classes=1 if c == 2 else c, **overrides)


def run_experiment(
    ds: Dataset,
    config: AwgcnConfig | None = None,
    split_spec: SplitSpec | None = None,
    opts: TrainOptions = TrainOptions(),
    on_epoch=None,
) -> Experiment:
    """Split, train on the train part, evaluate on the test part."""
    config = config or make_config(ds)
    split_spec = split_spec or SplitSpec(seed=config.seed)
    tr, te = split_indices(ds, split_spec)
    seqs = ds.sequences
    train_graphs = graphs_for([seqs[i] for i in tr], ds.vocabulary, config)
    y_train = label_vector([seqs[i] for i in tr], ds.label_set, config)
    result = fit(train_graphs, y_train, config, opts, on_epoch)
    test_graphs = graphs_for([seqs[i] for i in te], ds.vocabulary, config)
    y_test = label_vector([seqs[i] for i in te], ds.label_set, config)
    report = evaluate(test_graphs, y_test, result.params, config, ds.label_set)
    return Experiment(config, tr, te, result, report)
