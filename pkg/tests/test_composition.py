import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import compatible_instance
from posetsafe.composition import (EmptyHeads, HeadCombiner, OverrideEvent, ProjectionHead,
                                   audit_poset_respecting, batch_override_events, check_mixture_safety_preconditions,
                                   gumbel_noise, run_heads, sequential_project, softmax)
from posetsafe.geometry import Halfspace
from posetsafe.poset import PosetError, SafetyPoset


def test_orthogonal_pair_commutes():
    hs = [Halfspace([1, 0], 1, 0), Halfspace([0, 1], 1, 1)]
    for order in [(0, 1), (1, 0)]:
        u, ev = sequential_project(hs, order, [0, 0])
        np.testing.assert_allclose(u, [1, 1])
        assert ev == []


def test_conflicting_pair_records_override():
    hs = [Halfspace([1, 0], 1, 0), Halfspace([-1, 0], 0, 1)]
    u, ev = sequential_project(hs, (0, 1), [0, 0])
    np.testing.assert_allclose(u, [0, 0])
    assert len(ev) == 1
    e = ev[0]
    assert (e.step, e.enforced, e.flipped) == (2, 1, 0)
    np.testing.assert_allclose(e.pre, [1, 0])
    assert e.margin_before == pytest.approx(0.0) and e.margin_after == pytest.approx(-1.0)


def test_empty_constraints_identity():
    u, ev = sequential_project([], (), [0.3, -2.0])
    np.testing.assert_array_equal(u, [0.3, -2.0])
    assert ev == []


@given(st.integers(0, 10_000), st.integers(1, 5))
def test_last_constraint_always_holds(seed, n):
    rng = np.random.default_rng(seed)
    hs = [Halfspace(rng.normal(size=2) + 1e-3, rng.normal(), i) for i in range(n)]
    order = rng.permutation(n)
    u, _ = sequential_project(hs, order, rng.normal(size=2) * 3)
    assert hs[order[-1]].contains(u)


@given(st.integers(0, 10_000), st.integers(2, 5))
def test_compatible_instances_never_override(seed, n):
    rng = np.random.default_rng(seed)
    hs = compatible_instance(rng, n)
    poset = SafetyPoset.antichain(n)
    u, ev = sequential_project(hs, rng.permutation(n), rng.normal(size=2) * 3)
    assert audit_poset_respecting(ev, poset) == []
    assert all(h.contains(u) for h in hs)


def test_audit_rules():
    chain = SafetyPoset.chain(2)
    ok = OverrideEvent(step=2, enforced=1, flipped=0, margin_before=0.0, margin_after=-1.0)
    bad = OverrideEvent(step=2, enforced=0, flipped=1, margin_before=0.0, margin_after=-1.0)
    assert audit_poset_respecting([], chain) == []
    assert audit_poset_respecting([ok], chain) == []
    assert audit_poset_respecting([bad], chain) == [bad]
    assert audit_poset_respecting([ok], SafetyPoset.antichain(2)) == [ok]
    assert set(ok.to_json()) == {"t", "step", "enforced", "flipped", "margin_before", "margin_after"}


def test_combiner_modes():
    assert np.allclose(softmax([0.0, 0.0]), [0.5, 0.5])
    hard = HeadCombiner("hard", np.array([0.1, 2.0]))
    np.testing.assert_array_equal(hard.combination_weights(3), [[0, 1]] * 3)
    tie = HeadCombiner("hard", np.array([1.0, 1.0]))
    assert tie.selected == 0
    g = HeadCombiner("gumbel", np.array([0.0, 0.0, 0.0]), temperature=0.5)
    w = g.combination_weights(4, training=True, rng=np.random.default_rng(0))
    np.testing.assert_allclose(w.sum(axis=1), 1.0)
    assert np.all(g.combination_weights(2, training=False) == [[1, 0, 0]] * 2)
    with pytest.raises(ValueError):
        g.combination_weights(1, training=True)
    with pytest.raises(ValueError):
        HeadCombiner("avg")
    with pytest.raises(ValueError):
        HeadCombiner("mixture", np.zeros(2), temperature=0.0)
    assert np.all(np.isfinite(gumbel_noise(np.random.default_rng(0), (1000,))))


def test_run_heads():
    poset = SafetyPoset.antichain(2)
    hs = [Halfspace([1, 0], 1, 0), Halfspace([0, 1], 1, 1)]
    heads = [ProjectionHead.build(poset, (0, 1), 0), ProjectionHead.build(poset, (1, 0), 1)]
    noms = [np.array([0.0, 0.0]), np.array([3.0, 3.0])]
    one_hot = HeadCombiner("mixture", np.array([50.0, -50.0]))
    u, per_head, info = run_heads(heads, one_hot, hs, noms)
    np.testing.assert_allclose(u, per_head[0])
    u, _, info = run_heads(heads, HeadCombiner("hard", np.array([0.1, 2.0])), hs, noms)
    np.testing.assert_allclose(u, [3.0, 3.0])
    assert info["selected"] == 1
    with pytest.raises(EmptyHeads):
        run_heads([], one_hot, hs, [])
    with pytest.raises(PosetError):
        ProjectionHead.build(SafetyPoset.chain(2), (1, 0))


@given(st.integers(0, 10_000))
def test_mixture_stays_in_common_halfspace(seed):
    rng = np.random.default_rng(seed)
    n, H = 3, 4
    hs = compatible_instance(rng, n)
    outs = np.array([sequential_project(hs, rng.permutation(n), rng.normal(size=2) * 3)[0] for _ in range(H)])
    w = rng.dirichlet(np.ones(H))
    report = check_mixture_safety_preconditions(outs, hs, SafetyPoset.antichain(n))
    assert report["all_pass"]
    assert all(h.contains(w @ outs) for h in hs)


def test_mixture_report_flags():
    poset = SafetyPoset.chain(2)
    hs = [Halfspace([1, 0], 0, 0), Halfspace([0, 1], 0, 1)]
    assert check_mixture_safety_preconditions([[1, 1], [2, 2]], hs, poset)["all_pass"]
    rep = check_mixture_safety_preconditions([[1, 1], [2, -1]], hs, poset)
    assert rep["flagged"] == [1] and not rep["all_pass"]


def test_batch_events_match_scalar(rng):
    from posetsafe import kernels

    B, N, H = 20, 3, 2
    A = rng.normal(size=(B, N, 2))
    c = rng.normal(size=(B, N))
    orders = np.array([[0, 1, 2], [2, 1, 0]])
    U = rng.normal(size=(B, H, 2)) * 2
    _, _, _, steps = kernels.project_heads(A, c, orders, U, True)
    rows, mb, ma = batch_override_events(A, c, orders, steps)
    expected = set()
    for b in range(B):
        hs = [Halfspace(A[b, i], c[b, i], i) for i in range(N)]
        for h in range(H):
            for e in sequential_project(hs, orders[h], U[b, h])[1]:
                expected.add((b, h, e.step, e.enforced, e.flipped))
    assert {tuple(int(v) for v in r) for r in rows} == expected
    assert np.all(mb >= -1e-9) and np.all(ma < 0)
