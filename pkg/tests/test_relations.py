import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stockdiff.relations import (
    RelationTensor,
    aggregate_relations,
    clusters_from_relations,
    group_relations,
    load_relations,
    save_relations,
    write_grouping_report,
)


def random_relations(n, g, p, seed):
    rng = np.random.default_rng(seed)
    bits = np.zeros((n, n, g))
    for r in range(g):
        up = np.triu(rng.uniform(size=(n, n)) < p, 1)
        bits[:, :, r] = up | up.T
    return RelationTensor([f"r{r}" for r in range(g)], bits)


def union_find_labels(adj):
    n = len(adj)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(n):
            if adj[i, j]:
                parent[find(i)] = find(j)
    roots = [find(i) for i in range(n)]
    seen = {}
    return [seen.setdefault(r, len(seen)) for r in roots]


def test_diagonal_forced_and_binary_checked():
    rel = RelationTensor(["a"], np.zeros((3, 3, 1)))
    assert np.all(np.diagonal(rel.bits[:, :, 0]) == 1)
    with pytest.raises(ValueError):
        RelationTensor(["a"], np.full((2, 2, 1), 0.5))


def test_few_relations_keep_their_slices():
    rel = random_relations(6, 3, 0.3, 0)
    heads = group_relations(rel, max_heads=12)
    assert len(heads) == 3
    for r in range(3):
        np.testing.assert_array_equal(heads.masks[r], rel.bits[:, :, r])


def test_identical_slices_merge_first():
    rel = random_relations(7, 13, 0.3, 1)
    bits = rel.bits.copy()
    bits[:, :, 9] = bits[:, :, 4]
    heads = group_relations(RelationTensor(rel.names, bits), max_heads=12)
    assert len(heads) == 12
    assert heads.group_assignment[4] == heads.group_assignment[9]


@settings(max_examples=20, deadline=None)
@given(st.integers(13, 30), st.integers(0, 10_000))
def test_grouping_covers_every_edge(g, seed):
    rel = random_relations(6, g, 0.15, seed)
    heads = group_relations(rel, max_heads=12)
    assert len(heads) == 12
    assert sorted(heads.group_assignment) == list(range(g))
    # each slice is contained in its head mask, and the OR of heads equals the OR of slices
    for r, h in heads.group_assignment.items():
        assert np.all(heads.masks[h] >= rel.bits[:, :, r])
    np.testing.assert_array_equal(np.max(heads.masks, axis=0), rel.union())


def test_aggregate_is_union():
    rel = random_relations(5, 4, 0.3, 2)
    heads = aggregate_relations(rel)
    assert len(heads) == 1
    np.testing.assert_array_equal(heads.masks[0], rel.union())


def test_cluster_examples():
    n = 8
    full = RelationTensor(["r"], np.ones((n, n, 1)))
    assert set(clusters_from_relations(full)) == {0}
    empty = RelationTensor(["r"], np.zeros((n, n, 1)))
    assert list(clusters_from_relations(empty)) == list(range(n))
    bits = np.zeros((n, n, 1))
    bits[:4, :4, 0] = bits[4:, 4:, 0] = 1
    assert list(clusters_from_relations(RelationTensor(["r"], bits))) == [0, 0, 0, 0, 1, 1, 1, 1]


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 9), st.floats(0.0, 0.5), st.integers(0, 10_000))
def test_clusters_match_union_find(n, p, seed):
    rel = random_relations(n, 2, p, seed)
    assert list(clusters_from_relations(rel)) == union_find_labels(rel.union() > 0)


def test_cluster_subset_by_name():
    rel = random_relations(6, 3, 0.4, 3)
    by_name = clusters_from_relations(rel, ["r1"])
    by_index = clusters_from_relations(rel, [1])
    np.testing.assert_array_equal(by_name, by_index)


def test_relations_file_roundtrip(tmp_path):
    syms = ["A", "B", "C", "D"]
    rel = random_relations(4, 2, 0.5, 4)
    path = tmp_path / "rel.csv"
    save_relations(path, rel, syms)
    back = load_relations(path, syms)
    for r, name in enumerate(back.names):
        np.testing.assert_array_equal(back.bits[:, :, r], rel.bits[:, :, rel.names.index(name)])


def test_relations_file_errors_name_the_line(tmp_path):
    path = tmp_path / "rel.csv"
    path.write_text("sector,A,B\nsector,A,Z\n")
    with pytest.raises(ValueError, match=r"rel\.csv:2: unknown symbol 'Z'"):
        load_relations(path, ["A", "B"])


def test_grouping_report(tmp_path):
    rel = random_relations(5, 14, 0.2, 5)
    heads = group_relations(rel)
    path = tmp_path / "g.json"
    write_grouping_report(path, rel, heads)
    report = json.loads(path.read_text())
    assert set(report) == set(rel.names)
    assert set(report.values()) == set(range(12))
