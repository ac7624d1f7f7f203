"""Flow-coupling graphs read off the sparse precision matrices.

Nodes are CPOD modes ``(variable, mode index)``; an edge joins two modes of
different variables whenever their precision entry is nonzero. Edge
strength is the absolute partial correlation
``|-Theta_ij / sqrt(Theta_ii Theta_jj)|``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cokrige import GpModelSlice
from .errors import ValidationError
from .estimate import FitConfig, fit_pooled


@dataclass
class Edge:
    a: tuple
    b: tuple
    frequency: float
    score: float
    slices: int

    def as_row(self) -> dict:
        return {"node_a": f"{self.a[0]}:{self.a[1]}", "node_b": f"{self.b[0]}:{self.b[1]}",
                "frequency": f"{self.frequency:.6f}", "mean_abs_pcorr": f"{self.score:.6f}",
                "slices": self.slices}


@dataclass
class CouplingGraph:
    nodes: list
    edges: list = field(default_factory=list)
    per_slice_counts: list = field(default_factory=list)

    def edge_set(self) -> set:
        return {frozenset((e.a, e.b)) for e in self.edges}


def partial_correlations(precision) -> np.ndarray:
    P = np.asarray(precision, dtype=float)
    d = np.sqrt(np.diag(P))
    pc = -P / np.outer(d, d)
    np.fill_diagonal(pc, 1.0)
    return pc


def slice_edges(precision, mask=None, k: int | None = None) -> list:
    """Nonzero allowed off-diagonal entries ``(i, j, |pcorr|)``, strongest
    first; at most ``k`` are kept when ``k`` is given."""
    P = np.asarray(precision, dtype=float)
    K = P.shape[0]
    allowed = np.ones((K, K), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    pc = np.abs(partial_correlations(P))
    iu, ju = np.triu_indices(K, 1)
    sel = (P[iu, ju] != 0) & allowed[iu, ju]
    edges = sorted(zip(iu[sel].tolist(), ju[sel].tolist(), pc[iu[sel], ju[sel]].tolist()),
                   key=lambda e: (-e[2], e[0], e[1]))
    return edges if k is None else edges[:k]


def extract_couplings(models, labels, k: int | None = None, mask=None) -> CouplingGraph:
    """Aggregate per-slice precision patterns into one ranked graph.

    Each edge is scored by the fraction of time slices that select it and
    by its mean absolute partial correlation over those slices. Edges are
    ranked by frequency, then by score.
    """
    models = list(models)
    if not models:
        raise ValidationError("no fitted models supplied")
    for t, m in enumerate(models):
        if not isinstance(m, GpModelSlice) or m.precision is None:
            raise ValidationError(f"time step {t} has no fitted precision matrix")
        if m.K != len(labels):
            raise ValidationError(f"time step {t}: K={m.K} but {len(labels)} node labels")
    owner = [lab[0] for lab in labels]
    K = len(labels)
    within = np.array([[owner[i] == owner[j] and i != j for j in range(K)] for i in range(K)])
    allowed = ~within if mask is None else (np.asarray(mask, dtype=bool) & ~within)
    counts, sums, per_slice = {}, {}, []
    for m in models:
        edges = slice_edges(m.precision, allowed, k)
        per_slice.append(len(edges))
        for i, j, w in edges:
            counts[(i, j)] = counts.get((i, j), 0) + 1
            sums[(i, j)] = sums.get((i, j), 0.0) + w
    n = len(models)
    out = [Edge(tuple(labels[i]), tuple(labels[j]), c / n, sums[(i, j)] / c, c)
           for (i, j), c in counts.items()]
    out.sort(key=lambda e: (-e.frequency, -e.score, str(e.a), str(e.b)))
    return CouplingGraph([tuple(lab) for lab in labels], out, per_slice)


def pooled_couplings(coeffs, designs, labels, window=None, config: FitConfig | None = None,
                     mask=None, k: int | None = None) -> CouplingGraph:
    """Graph of a single covariance fitted jointly over the time steps in
    ``window``, the alternative to aggregating per-slice graphs. Every edge
    has frequency one."""
    model, _ = fit_pooled(coeffs, designs, config or FitConfig(), mask, window)
    return extract_couplings([model], labels, k, mask)


def write_edges_csv(graph: CouplingGraph, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, ["node_a", "node_b", "frequency", "mean_abs_pcorr", "slices"],
                           lineterminator="\n")
        w.writeheader()
        for e in graph.edges:
            w.writerow(e.as_row())


def write_dot(graph: CouplingGraph, path) -> None:
    lines = ["graph couplings {"]
    for v, k in graph.nodes:
        lines.append(f'  "{v}:{k}" [label="{v}{k + 1}"];')
    for e in graph.edges:
        lines.append(f'  "{e.a[0]}:{e.a[1]}" -- "{e.b[0]}:{e.b[1]}" '
                     f'[weight={e.score:.6f}, label="{e.frequency:.2f}"];')
    lines.append("}")
    Path(path).write_text("\n".join(lines) + "\n")
