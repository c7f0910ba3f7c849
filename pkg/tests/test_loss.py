import math

import numpy as np
import pytest

from viterbinet.compiler import TransitionTable, compile_graph
from viterbinet.loss import (Mode, NoPathError, classification_loss, kl_regularizer,
                             logpost_to_logit_grad, route_gradients)
from viterbinet.oracle import finite_diff
from viterbinet.trellis import PosteriorSequence, score_utterance
from viterbinet.wfst import parse_wfst

from conftest import rel_err, sample_unique_instance

NEG = -math.inf


def _loss(g, lp, label, scale=1.0):
    _, scores = score_utterance(g, PosteriorSequence(lp, scale))
    return classification_loss(scores.pooled, label)[0]


def _analytic(g, lp, label, mode=Mode.E2E, scale=1.0):
    tr, scores = score_utterance(g, PosteriorSequence(lp, scale))
    _, dl = classification_loss(scores.pooled, label)
    return route_gradients(g, tr, scores, dl, mode, scale)


def test_certain_classification_has_zero_gradient():
    loss, dl = classification_loss(np.array([0.0, NEG, NEG]), 0)
    assert loss == 0.0
    assert dl.tolist() == [0.0, 0.0, 0.0]


def test_softmax_form_equals_l1_normalized_form():
    a, b = 0.3, 0.05
    loss, dl = classification_loss(np.log([a, b]), 0)
    assert loss == pytest.approx(-math.log(a / (a + b)), rel=1e-12)
    y = np.array([a, b])
    assert loss == pytest.approx(-math.log((y / np.abs(y).sum())[0]), rel=1e-12)


def test_no_path_errors():
    with pytest.raises(NoPathError):
        classification_loss(np.array([0.0, NEG]), 1)
    with pytest.raises(NoPathError):
        classification_loss(np.array([NEG, NEG]), 0)


def test_classification_gradient_finite_differences():
    rng = np.random.default_rng(20)
    for _ in range(50):
        pooled = rng.normal(0, 3, size=int(rng.integers(2, 7)))
        label = int(rng.integers(len(pooled)))
        _, dl = classification_loss(pooled, label)
        fd, _ = finite_diff(lambda z: classification_loss(z, label)[0], pooled, 1e-6)
        assert rel_err(dl, fd) <= 1e-6
        assert abs(dl.sum()) < 1e-15


def test_single_path_constant_gradients():
    w = parse_wfst("0 1 1 0 0.1\n1 2 2 0 0.2\n2 3 1 1 0.3\n3\n")
    g = compile_graph(w, TransitionTable.identity(2))
    lp = np.log(np.array([[0.3, 0.7], [0.6, 0.4], [0.5, 0.5]]))
    tr, scores = score_utterance(g, PosteriorSequence(lp))
    b = route_gradients(g, tr, scores, np.array([0.7]))
    assert b.d_logv == {0: 0.7, 1: 0.7, 2: 0.7}
    expected = np.zeros((3, 2))
    expected[0, 0] = expected[1, 1] = expected[2, 0] = 0.7
    np.testing.assert_array_equal(b.d_logpost, expected)


def test_zero_dl_gives_empty_gradients():
    w = parse_wfst("0 1 1 1 0.1\n0 1 1 2 0.2\n1\n")
    g = compile_graph(w, TransitionTable.identity(1))
    tr, scores = score_utterance(g, PosteriorSequence(np.zeros((1, 1))))
    b = route_gradients(g, tr, scores, np.zeros(2))
    assert b.d_logv == {} and not b.d_logpost.any()


def test_mode_masks():
    rng = np.random.default_rng(21)
    _, g, lp, label = sample_unique_instance(rng)
    am = _analytic(g, lp, label, Mode.AM_ONLY)
    wf = _analytic(g, lp, label, Mode.WFST_ONLY)
    e2e = _analytic(g, lp, label, Mode.E2E)
    assert am.d_logv == {} and np.array_equal(am.d_logpost, e2e.d_logpost)
    assert wf.d_logv == e2e.d_logv and not wf.d_logpost.any()


@pytest.mark.parametrize("scale", [1.0, 0.07])
def test_routed_gradients_match_finite_differences(scale):
    rng = np.random.default_rng(22 if scale == 1.0 else 23)
    for _ in range(100):
        _, g, lp, label = sample_unique_instance(rng, scale=scale)
        b = _analytic(g, lp, label, scale=scale)

        def f_logv(v):
            h = g.copy()
            h.logv[:] = v
            return _loss(h, lp, label, scale)

        fd_v, flags = finite_diff(f_logv, g.logv, 1e-5)
        assert not flags.any()
        assert rel_err(b.dense_logv(g.num_arcs), fd_v) <= 1e-4
        fd_x, _ = finite_diff(lambda x: _loss(g, x, label, scale), lp, 1e-5)
        assert rel_err(b.d_logpost, fd_x) <= 1e-4


def test_gradient_locality():
    rng = np.random.default_rng(24)
    for _ in range(50):
        _, g, lp, label = sample_unique_instance(rng)
        b = _analytic(g, lp, label)
        T = lp.shape[0]
        assert len(b.d_logv) <= g.num_commands * (2 * T + 1)
        assert set(b.d_logv) <= set(range(g.num_arcs))
        assert all(np.isfinite(v) for v in b.d_logv.values())


def test_small_step_descends():
    rng = np.random.default_rng(25)
    lam = 0.01
    for _ in range(20):
        _, g, lp, label = sample_unique_instance(rng)
        x_org = lp + rng.normal(0, 0.1, size=lp.shape)
        x_org -= np.log(np.exp(x_org).sum(axis=1, keepdims=True))

        def total(v, x):
            h = g.copy()
            h.logv[:] = v
            return _loss(h, x, label) + kl_regularizer(x_org, x, lam)[0]

        b = _analytic(g, lp, label)
        _, d_kl = kl_regularizer(x_org, lp, lam)
        # treat the log posteriors as log-softmax of logits lp and step the logits
        d_logits = logpost_to_logit_grad(b.d_logpost, lp) + d_kl
        step = 1e-4
        v_new = g.logv - step * b.dense_logv(g.num_arcs)
        z_new = lp - step * d_logits
        x_new = z_new - np.log(np.exp(z_new).sum(axis=1, keepdims=True))
        assert total(v_new, x_new) < total(g.logv, lp)


def test_kl_identity_and_zero_lambda():
    rng = np.random.default_rng(26)
    x = np.log(rng.dirichlet(np.ones(4), size=5))
    y = np.log(rng.dirichlet(np.ones(4), size=5))
    pen, grad = kl_regularizer(x, x, 0.01)
    assert pen == pytest.approx(0.0, abs=1e-15) and np.allclose(grad, 0.0)
    pen, grad = kl_regularizer(x, y, 0.0)
    assert pen == 0.0 and not grad.any()


def test_kl_nonnegative_and_logit_gradient():
    rng = np.random.default_rng(27)
    for _ in range(30):
        T, P = int(rng.integers(1, 6)), int(rng.integers(2, 6))
        x_org = np.log(rng.dirichlet(np.ones(P), size=T))
        logits = rng.normal(size=(T, P))

        def pen(z):
            x = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            return kl_regularizer(x_org, x, 0.01)[0]

        x = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        p, grad = kl_regularizer(x_org, x, 0.01)
        assert p >= 0.0
        fd, _ = finite_diff(pen, logits, 1e-5)
        assert rel_err(grad, fd, floor=1e-6) <= 1e-5


def test_kl_shape_mismatch():
    with pytest.raises(ValueError):
        kl_regularizer(np.zeros((2, 3)), np.zeros((3, 3)))
