"""Relation tensor C (N x N x G), relation-file IO, head grouping and clusters."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components


@dataclass
class RelationTensor:
    names: list
    bits: np.ndarray  # (N, N, G) in {0, 1}

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.float64)
        if bits.ndim != 3 or bits.shape[0] != bits.shape[1]:
            raise ValueError(f"relation bits must be N x N x G, got {bits.shape}")
        if bits.shape[2] != len(self.names):
            raise ValueError("one name per relation slice required")
        if not np.isin(bits, (0.0, 1.0)).all():
            raise ValueError("relation bits must be binary")
        bits = bits.copy()
        idx = np.arange(bits.shape[0])
        bits[idx, idx, :] = 1.0  # self-relation keeps every masked softmax row valid
        self.bits = bits

    @property
    def n(self):
        return self.bits.shape[0]

    @property
    def g(self):
        return self.bits.shape[2]

    def union(self):
        return self.bits.max(axis=2)


def load_relations(path, symbols):
    """Read ``relation_name,symbol_a,symbol_b`` lines; each edge is added in both directions."""
    index = {s: i for i, s in enumerate(symbols)}
    names, edges = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected relation_name,symbol_a,symbol_b")
        name, a, b = parts
        for s in (a, b):
            if s not in index:
                raise ValueError(f"{path}:{lineno}: unknown symbol '{s}'")
        if name not in names:
            names.append(name)
        edges.append((names.index(name), index[a], index[b]))
    n = len(symbols)
    bits = np.zeros((n, n, max(len(names), 1)))
    for r, i, j in edges:
        bits[i, j, r] = bits[j, i, r] = 1.0
    if not names:
        names = ["self"]
    return RelationTensor(names, bits)


def save_relations(path, rel, symbols):
    lines = []
    for r, name in enumerate(rel.names):
        for i in range(rel.n):
            for j in range(i + 1, rel.n):
                if rel.bits[i, j, r]:
                    lines.append(f"{name},{symbols[i]},{symbols[j]}")
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class HeadMaskSet:
    masks: list  # N x N binary arrays, one per masked head group
    group_assignment: dict  # relation index -> head index
    unmasked_heads: int = 4
    head_names: list = field(default_factory=list)

    def __len__(self):
        return len(self.masks)


def _off_diagonal(bits):
    m = bits.astype(bool).copy()
    np.fill_diagonal(m, False)
    return m


def _jaccard(a, b):
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return np.logical_and(a, b).sum() / union


def group_relations(c, max_heads=12, unmasked_heads=4):
    """Assign relations to at most ``max_heads`` masked heads.

    With more relations than heads, groups are merged agglomeratively by the
    Jaccard similarity of their (off-diagonal) edge sets, most similar pair
    first, ties to the lowest relation indices. Each head mask is the OR of
    its group's slices.
    """
    if c.g < 1:
        raise ValueError("need at least one relation")
    if max_heads < 1:
        raise ValueError("max_heads must be >= 1")
    groups = [[r] for r in range(c.g)]
    edges = [_off_diagonal(c.bits[:, :, r]) for r in range(c.g)]
    while len(groups) > max_heads:
        best, best_pair = -1.0, None
        for a in range(len(groups)):
            for b in range(a + 1, len(groups)):
                s = _jaccard(edges[a], edges[b])
                if s > best:
                    best, best_pair = s, (a, b)
        a, b = best_pair
        groups[a] = sorted(groups[a] + groups[b])
        edges[a] = np.logical_or(edges[a], edges[b])
        del groups[b], edges[b]
    masks, assignment, names = [], {}, []
    for h, grp in enumerate(groups):
        masks.append(c.bits[:, :, grp].max(axis=2))
        names.append("+".join(c.names[r] for r in grp))
        for r in grp:
            assignment[r] = h
    return HeadMaskSet(masks, assignment, unmasked_heads, names)


def aggregate_relations(c, unmasked_heads=4):
    """Single head group holding the OR of every relation (the aggregated ablation)."""
    return HeadMaskSet([c.union()], {r: 0 for r in range(c.g)}, unmasked_heads, ["aggregated"])


def grouping_report(c, heads):
    return {c.names[r]: h for r, h in sorted(heads.group_assignment.items())}


def write_grouping_report(path, c, heads):
    Path(path).write_text(json.dumps(grouping_report(c, heads), indent=2) + "\n")


def clusters_from_relations(c, relation_subset=None):
    """Connected components of the undirected union graph of the selected slices.

    Labels are numbered in order of each component's first stock.
    """
    subset = list(range(c.g)) if relation_subset is None else list(relation_subset)
    if not subset:
        raise ValueError("relation subset must be non-empty")
    if isinstance(subset[0], str):
        subset = [c.names.index(s) for s in subset]
    adj = c.bits[:, :, subset].max(axis=2)
    adj = np.maximum(adj, adj.T)
    _, raw = connected_components(csr_matrix(adj), directed=False)
    relabel = {}
    return np.array([relabel.setdefault(r, len(relabel)) for r in raw], dtype=int)
