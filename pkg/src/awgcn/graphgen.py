"""Markov-chain graphs built from call sequences, plus DOT/JSON export."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .ingest import CallSequence, Vocabulary

PROPAGATION_MODES = ("transition", "symmetric-gcn")


class UnknownToken(KeyError):
    pass


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    count: int
    prob: float


@dataclass(frozen=True)
class MarkovGraph:
    present_nodes: tuple[int, ...]  # vocabulary indices, ascending
    edges: tuple[Edge, ...]  # sorted by (src, dst)
    kgram: int
    label: str
    hash: str

    @property
    def n(self) -> int:
        return len(self.present_nodes)

    def transition_matrix(self) -> np.ndarray:
        """Edge probabilities over present nodes (row = source)."""
        pos = {v: i for i, v in enumerate(self.present_nodes)}
        m = np.zeros((self.n, self.n))
        for e in self.edges:
            m[pos[e.src], pos[e.dst]] = e.prob
        return m


def build_graph(s: CallSequence, vocab: Vocabulary, k: int = 1) -> MarkovGraph:
    """Count transitions between calls up to ``k`` positions apart and normalise per source."""
    if k < 1:
        raise ValueError("k-gram window must be >= 1")
    idx = []
    for name in s.names:
        i = vocab.get(name)
        if i is None:
            raise UnknownToken(name)
        idx.append(i)
    counts: Counter[tuple[int, int]] = Counter()
    for gap in range(1, k + 1):
        counts.update(zip(idx, idx[gap:]))
    out_total: Counter[int] = Counter()
    for (u, _), c in counts.items():
        out_total[u] += c
    edges = tuple(
        Edge(u, v, c, c / out_total[u]) for (u, v), c in sorted(counts.items())
    )
    return MarkovGraph(tuple(sorted(set(idx))), edges, k, s.label, s.hash)


def normalize_adjacency(g: MarkovGraph, mode: str = "transition", directed: bool = False) -> np.ndarray:
    """Propagation matrix over the present nodes.

    ``transition``: ½(M + Mᵀ) + I with M the edge probabilities (M + I if directed).
    ``symmetric-gcn``: D̃^-½ (A + I) D̃^-½ with binary A.
    """
    n = g.n
    m = g.transition_matrix()
    if mode == "transition":
        base = m if directed else 0.5 * (m + m.T)
        return base + np.eye(n)
    if mode == "symmetric-gcn":
        a = (m > 0).astype(float)
        if not directed:
            a = np.maximum(a, a.T)
        a_tilde = a + np.eye(n)
        d = 1.0 / np.sqrt(a_tilde.sum(axis=1))
        return d[:, None] * a_tilde * d[None, :]
    raise ValueError(f"unknown propagation mode {mode!r}")


def graph_to_dict(g: MarkovGraph, vocab: Vocabulary) -> dict:
    names = vocab.tokens
    return {
        "hash": g.hash,
        "label": g.label,
        "kgram": g.kgram,
        "nodes": [names[v] for v in g.present_nodes],
        "edges": [
            {"src": names[e.src], "dst": names[e.dst], "count": e.count, "prob": e.prob} for e in g.edges
        ],
    }


_DOT_ID = re.compile(r"^(?:[A-Za-z_][A-Za-z0-9_]*|-?(?:\.[0-9]+|[0-9]+(?:\.[0-9]*)?))$")
_DOT_KEYWORDS = {"node", "edge", "graph", "digraph", "subgraph", "strict"}


def _dot_id(name: str) -> str:
    if _DOT_ID.match(name) and name.lower() not in _DOT_KEYWORDS:
        return name
    return '"' + name.replace("\\", "\\\\").replace('"', '\\"') + '"'


def to_dot(g: MarkovGraph, vocab: Vocabulary, attn: dict[str, float] | None = None) -> str:
    """Render as a Graphviz digraph; edge labels carry probabilities.

    ``attn`` maps call name -> weight; present-node weights are rescaled by
    their maximum and drawn as white-to-red fill.
    """
    names = vocab.tokens
    lines = [f"digraph {_dot_id(g.hash or 'g')} {{"]
    scale = None
    if attn is not None:
        vals = [abs(attn.get(names[v], 0.0)) for v in g.present_nodes]
        top = max(vals, default=0.0)
        scale = {v: (w / top if top > 0 else 0.0) for v, w in zip(g.present_nodes, vals)}
    for v in g.present_nodes:
        if scale is None:
            lines.append(f"  {_dot_id(names[v])};")
        else:
            level = round(255 * (1.0 - scale[v]))
            color = f"#ff{level:02x}{level:02x}"
            lines.append(
                f'  {_dot_id(names[v])} [style=filled, fillcolor="{color}", '
                f'tooltip="{scale[v]:.4f}"];'
            )
    for e in g.edges:
        lines.append(f'  {_dot_id(names[e.src])} -> {_dot_id(names[e.dst])} [label="{e.prob:.4f}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
