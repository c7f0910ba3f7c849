import math

import numpy as np
import pytest

from viterbinet.compiler import NEG_INF, TransitionTable, compile_graph
from viterbinet.oracle import (enumerate_paths, oracle_alpha, oracle_beta, oracle_best,
                               oracle_output_scores)
from viterbinet.trellis import (PosteriorSequence, arc_scores, backward, forward, map_emissions,
                                output_scores, reachable, run_trellis)
from viterbinet.wfst import parse_wfst

from conftest import random_instance


def _close(a, b, tol=1e-9):
    a, b = np.asarray(a), np.asarray(b)
    assert np.array_equal(reachable(a), reachable(b))
    m = reachable(a)
    np.testing.assert_allclose(a[m], b[m], rtol=0, atol=tol)


def test_uniform_posterior_mapping(nine_state):
    g = compile_graph(nine_state, TransitionTable.identity(9), num_pdfs=9)
    g2 = compile_graph(parse_wfst("0 1 1 0\n1 0 2 0\n1\n"), TransitionTable.identity(2))
    xs = map_emissions(g2, PosteriorSequence(np.log(np.full((4, 2), 0.5))))
    assert np.all(xs == math.log(0.5))
    xs9 = map_emissions(g, PosteriorSequence(np.log(np.full((2, 9), 1 / 9))))
    assert np.all(xs9[:, :8] == math.log(1 / 9)) and np.all(xs9[:, 8] == 0.0)


def test_acoustic_scale_multiplies_log_posteriors():
    g = compile_graph(parse_wfst("0 1 1 0\n1 0 2 0\n1\n"), TransitionTable.identity(2))
    lp = np.log(np.array([[0.2, 0.8], [0.6, 0.4]]))
    xs = map_emissions(g, PosteriorSequence(lp, 0.07))
    np.testing.assert_array_equal(xs, 0.07 * lp)


def test_one_hot_posteriors():
    g = compile_graph(parse_wfst("0 1 1 0\n1 0 2 0\n1\n"), TransitionTable.identity(2))
    p = PosteriorSequence.from_probs(np.array([[1.0, 0.0], [0.0, 1.0]]), 0.07)
    xs = map_emissions(g, p)
    assert xs[0, 0] == 0.0 and xs[1, 1] == 0.0
    assert xs[0, 1] == NEG_INF and xs[1, 0] == NEG_INF


def test_dimension_mismatch():
    g = compile_graph(parse_wfst("0 1 1 0\n1\n"), TransitionTable.identity(2))
    with pytest.raises(ValueError):
        map_emissions(g, PosteriorSequence(np.zeros((3, 5))))


def test_nine_state_forward_unit_emissions(nine_state):
    g = compile_graph(nine_state, TransitionTable.identity(9), num_pdfs=9)
    xs = np.zeros((3, 9))
    alpha, bp = forward(g, xs)
    assert alpha[3, 3] == pytest.approx(math.log(2.0 * 0.3 * 1.0))
    assert alpha[3, 4] == pytest.approx(math.log(0.6 * 1.0 * 1.0))
    assert alpha[2, 3] == pytest.approx(math.log(0.6))
    assert alpha[2, 2] == pytest.approx(math.log(0.6))
    _close(alpha, oracle_alpha(g, xs))


def test_forward_t0_is_initial_vector(nine_state):
    g = compile_graph(nine_state, TransitionTable.identity(9), num_pdfs=9)
    alpha, bp = forward(g, np.zeros((0, 9)))
    assert alpha.shape == (1, 9)
    assert alpha[0, 0] == 0.0 and np.all(alpha[0, 1:] == NEG_INF)


def test_tie_goes_to_lowest_arc():
    w = parse_wfst("0 2 1 0 0.5\n0 1 1 0 0.0\n1 2 2 0 0.0\n0 2 1 0 0.5\n2\n")
    g = compile_graph(w, TransitionTable.identity(2))
    alpha, bp = forward(g, np.zeros((1, 3)))
    assert bp[1, 2] == 0
    again, bp2 = forward(g, np.zeros((1, 3)))
    assert np.array_equal(bp, bp2)


def test_backward_single_final(nine_state):
    g = compile_graph(nine_state, TransitionTable.identity(9), num_pdfs=9)
    rng = np.random.default_rng(0)
    xs = np.log(rng.uniform(0.1, 1.0, size=(4, 9)))
    beta, _ = backward(g, xs)
    assert beta[4, 8] == 0.0 and np.all(beta[4, :8] == NEG_INF)
    assert beta[3, 6] == pytest.approx(xs[3, 6] + math.log(2.0))
    _close(beta, oracle_beta(g, xs))


def test_random_instances_match_oracle():
    rng = np.random.default_rng(10)
    for _ in range(200):
        _, g, xs, lp = random_instance(rng)
        tr = run_trellis(g, PosteriorSequence(lp))
        _close(tr.alpha, oracle_alpha(g, xs))
        _close(tr.beta, oracle_beta(g, xs))
        paths = enumerate_paths(g, xs)
        y, pooled = oracle_output_scores(g, xs, paths)
        out = output_scores(g, tr)
        _close(out.y, y)
        _close(out.pooled, pooled)


def test_single_command_graph_pools_best_path():
    rng = np.random.default_rng(11)
    w = parse_wfst("0 1 1 0 0.3\n0 2 1 0 0.1\n1 3 2 1 0.2\n2 3 1 1 0.4\n3 3 2 0 0.5\n3\n")
    g = compile_graph(w, TransitionTable.identity(2))
    lp = np.log(rng.dirichlet(np.ones(2), size=4))
    tr = run_trellis(g, PosteriorSequence(lp))
    out = output_scores(g, tr)
    assert out.pooled[0] == pytest.approx(tr.best_score(g), abs=1e-12)


def test_disjoint_branches_pool_to_branch_viterbi():
    head = "0 1 1 0\n0 3 1 0\n"
    branch_a = "1 2 2 0\n2 5 2 1 0.1\n"
    branch_b = "3 4 3 0\n4 5 3 2 0.2\n"
    tail = "5 5 1 0\n5\n"
    rng = np.random.default_rng(12)
    lp = np.log(rng.dirichlet(np.ones(3), size=5))
    g = compile_graph(parse_wfst(head + branch_a + branch_b + tail), TransitionTable.identity(3))
    out = output_scores(g, run_trellis(g, PosteriorSequence(lp)))
    for u, branch in ((0, branch_a), (1, branch_b)):
        alone = compile_graph(parse_wfst(head + branch + tail), TransitionTable.identity(3))
        tr = run_trellis(alone, PosteriorSequence(lp))
        assert out.pooled[u] == pytest.approx(tr.best_score(alone), abs=1e-12)


def test_path_consistency():
    rng = np.random.default_rng(13)
    for _ in range(100):
        _, g, xs, lp = random_instance(rng)
        tr = run_trellis(g, PosteriorSequence(lp))
        best = tr.best_score(g)
        per_frame = arc_scores(g, tr).max(axis=1, initial=NEG_INF)
        if reachable(best):
            np.testing.assert_allclose(per_frame, best, rtol=0, atol=1e-9)
        else:
            assert not np.any(reachable(per_frame))


def test_monotone_pooling():
    rng = np.random.default_rng(14)
    for _ in range(50):
        _, g, xs, lp = random_instance(rng)
        out = output_scores(g, run_trellis(g, PosteriorSequence(lp)))
        assert np.all(out.pooled >= out.y.max(axis=0, initial=NEG_INF))
        for u in range(g.num_commands):
            if out.win_arc[u] >= 0:
                assert out.y[out.win_t[u] - 1, u] == out.pooled[u]
                assert g.olabel[out.win_arc[u]] == u + 1
            else:
                assert out.pooled[u] == NEG_INF


def test_unreachable_command_is_neg_inf():
    w = parse_wfst("0 1 1 1\n1 1 1 0\n1\n0 2 1 2\n2 2 1 0\n")
    g = compile_graph(w, TransitionTable.identity(1))
    out = output_scores(g, run_trellis(g, PosteriorSequence(np.zeros((3, 1)))))
    assert reachable(out.pooled[0])
    assert out.pooled[1] == NEG_INF and out.win_arc[1] == -1
    assert not np.any(np.isnan(out.y))


def test_oracle_best_matches_alpha_final():
    rng = np.random.default_rng(15)
    for _ in range(50):
        _, g, xs, lp = random_instance(rng)
        tr = run_trellis(g, PosteriorSequence(lp))
        ref = oracle_best(enumerate_paths(g, xs))
        if reachable(ref):
            assert tr.best_score(g) == pytest.approx(ref, abs=1e-9)
        else:
            assert tr.best_score(g) == NEG_INF
