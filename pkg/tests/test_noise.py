import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import dtw_paths
from stockdiff.data import synth_market, to_log_returns
from stockdiff.noise import (
    base_betas,
    build_schedule,
    dtw,
    export_schedule_csv,
    export_score_csv,
    history_score,
    integrated_score,
    intra_cluster_influence,
    local_variance,
    normalize_variance,
)
from stockdiff.tensor import Rng

vals = st.floats(-10, 10, allow_nan=False)
series = arrays(np.float64, st.integers(1, 6), elements=vals)


def test_local_variance_examples():
    assert np.all(local_variance(np.full(7, 2.5), 2) == 0)
    assert local_variance([0.0, 2.0, 0.0], 1)[1] == pytest.approx(8 / 3)


@given(st.integers(3, 20), st.integers(0, 19), st.integers(1, 3))
def test_local_variance_peaks_at_spike(n, pos, w):
    pos = pos % n
    x = np.zeros(n)
    x[pos] = 5.0
    v = local_variance(x, w)
    assert np.argmax(v) == pos


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(0, 100)))
def test_normalize_variance(v):
    out = normalize_variance(v)
    if v.max() > 0:
        assert out.max() == 1.0
        assert np.all((out >= 0) & (out <= 1))
    else:
        assert np.all(out == 0)


def test_normalize_variance_examples():
    np.testing.assert_array_equal(normalize_variance([1.0, 2.0, 4.0]), [0.25, 0.5, 1.0])
    np.testing.assert_array_equal(normalize_variance([0.0, 0.0, 0.0]), [0.0, 0.0, 0.0])


@settings(max_examples=200)
@given(series, series)
def test_dtw_equals_path_enumeration(a, b):
    assert abs(dtw(a, b) - dtw_paths(a, b)) <= 1e-9 * max(1.0, dtw_paths(a, b))


@given(series, series)
def test_dtw_identity_and_symmetry(a, b):
    assert dtw(a, a) == 0.0
    assert dtw(a, b) == dtw(b, a)


def test_influence_examples():
    x = np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [5.0, 0.0, 1.0]])
    labels = np.array([0, 0, 0, 1])
    assert intra_cluster_influence(x, labels, 0) == 1.0
    assert intra_cluster_influence(x, labels, 3) == 1.0  # singleton


def test_influence_three_stock_cluster():
    x = np.array([[0.0, 1.0, 0.5, 2.0], [1.0, 1.0, 0.0, 0.0], [2.0, -1.0, 0.5, 1.0]])
    labels = np.zeros(3, dtype=int)
    for i in range(3):
        others = np.delete(x, i, axis=0).mean(axis=0)
        assert intra_cluster_influence(x, labels, i) == pytest.approx(1.0 / (1.0 + dtw_paths(x[i], others)))


def test_score_alpha_one_is_own_variance():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 15))
    labels = np.array([0, 0, 1, 1])
    sc = integrated_score(x, labels, alpha=1.0)
    own = np.stack([normalize_variance(local_variance(r, 2)) for r in x])
    np.testing.assert_allclose(sc.per_stock_per_time, own / own.max())


def test_score_alpha_zero_with_unit_influence_is_cluster_variance():
    rng = np.random.default_rng(1)
    x = np.repeat(rng.normal(size=(1, 12)), 3, axis=0)  # identical members, DTW 0
    labels = np.zeros(3, dtype=int)
    sc = integrated_score(x, labels, alpha=0.0)
    expect = normalize_variance(local_variance(x.mean(axis=0), 2))
    np.testing.assert_allclose(sc.per_stock_per_time, np.repeat(expect[None], 3, axis=0))


def test_score_ranks_shock_days_highly():
    panel, labels, _ = synth_market(8, 2, 120, Rng(0, "shock"))
    ret = to_log_returns(panel).values[:, 0, :]
    shock_days = [30, 75]
    ret[:, shock_days] += 0.2
    it = integrated_score(ret, labels).per_time()
    top = np.argsort(it)[::-1][: len(it) // 10]
    assert set(shock_days) <= set(top.tolist())


def test_history_score_ignores_future():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(4, 10))
    labels = np.array([0, 0, 1, 1])
    a = history_score(w, labels, 2).per_stock_per_time
    w2 = w.copy()
    w2[:, -2:] = 100.0
    b = history_score(w2, labels, 2).per_stock_per_time
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a[:, -1], a[:, -3])


def test_gamma_zero_is_vanilla():
    rng = np.random.default_rng(3)
    sch = build_schedule(rng.uniform(size=9), 100, 0.2, gamma=0.0)
    base = np.linspace(1e-4, 0.2, 100)
    np.testing.assert_allclose(sch.beta, np.repeat(base[:, None], 9, axis=1), rtol=0, atol=1e-12)
    np.testing.assert_allclose(sch.alpha_bar[:, 0], np.cumprod(1 - base), rtol=0, atol=1e-12)


def test_midpoint_score_is_neutral():
    sch = build_schedule(np.full(5, 0.5), 50, 0.3, gamma=0.7)
    np.testing.assert_allclose(sch.beta, np.repeat(base_betas(50, 0.3)[:, None], 5, axis=1), atol=1e-15)


def test_default_schedule_destroys_signal():
    rng = np.random.default_rng(4)
    sch = build_schedule(rng.uniform(size=17), 100, 0.2, gamma=0.5)
    assert np.all(sch.alpha_bar[-1] < 0.01)


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(0, 1)), st.floats(0, 1), st.integers(1, 60),
       st.floats(0.01, 0.9))
def test_schedule_bounds(score, gamma, K, bmax):
    sch = build_schedule(score, K, bmax, gamma)
    assert sch.beta.shape == (K, score.size)
    assert np.all((sch.beta >= 1e-5) & (sch.beta <= 0.999))
    assert np.all(np.diff(sch.alpha_bar, axis=0) <= 0)
    # higher significance never gets less noise
    order = np.argsort(score, kind="stable")
    assert np.all(np.diff(sch.beta[:, order], axis=1) >= -1e-15)


def test_schedule_validation():
    with pytest.raises(ValueError):
        build_schedule(None, 10, 0.2, gamma=1.5, length=3)
    with pytest.raises(ValueError):
        build_schedule(None, 0, 0.2, length=3)


def test_exports(tmp_path):
    sch = build_schedule(np.array([0.1, 0.9]), 4, 0.2)
    export_schedule_csv(tmp_path / "s.csv", sch)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "t,k1,k2,k3,k4" and len(lines) == 3
    sc = integrated_score(np.random.default_rng(0).normal(size=(2, 6)), np.array([0, 1]))
    export_score_csv(tmp_path / "i.csv", sc, ["A", "B"])
    assert (tmp_path / "i.csv").read_text().splitlines()[0] == "t,A,B"
