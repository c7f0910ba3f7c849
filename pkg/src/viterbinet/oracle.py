"""Brute-force references for the trellis, loss gradients and WFST transforms.

Everything here is exponential and guarded by size limits.  Path scores use
the same convention as the trellis: the emission of a transition is read at
its source state.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .compiler import NEG_INF, CompiledGraph
from .loss import Mode, classification_loss, kl_regularizer
from .train import TrainConfig, log_posteriors, utterance_step
from .trellis import PosteriorSequence, score_utterance
from .wfst import EPSILON, Wfst

MAX_STATES = 10
MAX_FRAMES = 7
MAX_ARCS = 40


class OracleSizeError(ValueError):
    pass


@dataclass(frozen=True)
class PathRecord:
    states: tuple[int, ...]
    arcs: tuple[int, ...]
    olabels: tuple[int, ...]
    score: float


def _guard(g: CompiledGraph, T: int) -> None:
    if g.num_states > MAX_STATES or T > MAX_FRAMES or g.num_arcs > MAX_ARCS:
        raise OracleSizeError(
            f"oracle limited to S<={MAX_STATES}, T<={MAX_FRAMES}, arcs<={MAX_ARCS}; "
            f"got S={g.num_states}, T={T}, arcs={g.num_arcs}")


def _expand(g: CompiledGraph, xs: np.ndarray, states: np.ndarray, arcs: np.ndarray, scores: np.ndarray,
            frame: int):
    """Extend every walk by each arc leaving its last state, emitting at ``frame``."""
    order = np.argsort(g.src, kind="stable")
    counts = np.bincount(g.src, minlength=g.num_states)
    first = np.concatenate([[0], np.cumsum(counts)[:-1]])
    last = states[:, -1]
    fan = counts[last]
    parent = np.repeat(np.arange(len(last)), fan)
    offset = np.arange(parent.size) - np.repeat(np.cumsum(fan) - fan, fan)
    k = order[first[last[parent]] + offset]
    new_scores = scores[parent] + xs[frame, last[parent]] + g.logv[k]
    return (np.column_stack([states[parent], g.dst[k]]), np.column_stack([arcs[parent], k]), new_scores)


def _walk_levels(g: CompiledGraph, xs: np.ndarray, first: np.ndarray, begin: int, length: int):
    """Yields every walk from the ``first`` states, level by level for 0..length arcs.

    Each level is (states N x (L+1), arcs N x L, scores N) with frames
    begin+1 .. begin+L consumed and no final weight added.
    """
    states = np.asarray(first, dtype=np.int64).reshape(-1, 1)
    arcs = np.zeros((len(states), 0), dtype=np.int64)
    scores = np.zeros(len(states))
    yield states, arcs, scores
    for step in range(length):
        states, arcs, scores = _expand(g, xs, states, arcs, scores, begin + step)
        yield states, arcs, scores


def path_arrays(g: CompiledGraph, xs: np.ndarray, T: int | None = None):
    """Complete T-arc paths as arrays: (states N x (T+1), arcs N x T, scores N)."""
    T = xs.shape[0] if T is None else T
    _guard(g, T)
    for states, arcs, scores in _walk_levels(g, xs, [g.start], 0, T):
        pass
    final = g.finals[states[:, -1]]
    total = scores + final
    keep = (final > NEG_INF / 2) & (total > NEG_INF / 2)
    return states[keep], arcs[keep], total[keep]


def enumerate_paths(g: CompiledGraph, xs: np.ndarray, T: int | None = None) -> list[PathRecord]:
    """Every complete path of exactly T arcs from the start to a final state."""
    states, arcs, scores = path_arrays(g, xs, T)
    olabels = g.olabel[arcs].tolist()
    return [PathRecord(tuple(s), tuple(a), tuple(o), float(v))
            for s, a, o, v in zip(states.tolist(), arcs.tolist(), olabels, scores)]


def count_paths_matrix_power(g: CompiledGraph, T: int) -> int:
    """Number of complete T-arc paths via powers of the arc-count adjacency matrix."""
    A = np.zeros((g.num_states, g.num_states), dtype=object)
    for s, d in zip(g.src, g.dst):
        A[int(s), int(d)] += 1
    v = np.zeros(g.num_states, dtype=object)
    v[g.start] = 1
    for _ in range(T):
        v = v.dot(A)
    return int(sum(v[s] for s in range(g.num_states) if g.finals[s] > NEG_INF / 2))


def oracle_alpha(g: CompiledGraph, xs: np.ndarray) -> np.ndarray:
    T = xs.shape[0]
    _guard(g, T)
    alpha = np.full((T + 1, g.num_states), NEG_INF)
    for t, (states, _, scores) in enumerate(_walk_levels(g, xs, [g.start], 0, T)):
        live = scores > NEG_INF / 2
        np.maximum.at(alpha[t], states[live, -1], scores[live])
    return alpha


def oracle_beta(g: CompiledGraph, xs: np.ndarray) -> np.ndarray:
    T = xs.shape[0]
    _guard(g, T)
    beta = np.full((T + 1, g.num_states), NEG_INF)
    for t in range(T + 1):
        for states, _, scores in _walk_levels(g, xs, np.arange(g.num_states), t, T - t):
            pass
        total = scores + g.finals[states[:, -1]]
        live = total > NEG_INF / 2
        np.maximum.at(beta[t], states[live, 0], total[live])
    return beta


def oracle_output_scores(g: CompiledGraph, xs: np.ndarray,
                         paths: list[PathRecord] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(y, pooled): best complete path whose arc at frame t carries command u."""
    T = xs.shape[0]
    y = np.full((T, g.num_commands), NEG_INF)
    if paths is None:
        _, arcs, scores = path_arrays(g, xs, T)
        olabels = g.olabel[arcs]
        for t in range(T):
            hit = olabels[:, t] != EPSILON
            np.maximum.at(y[t], olabels[hit, t] - 1, scores[hit])
    else:
        for p in paths:
            for t, o in enumerate(p.olabels):
                if o != EPSILON:
                    y[t, o - 1] = max(y[t, o - 1], p.score)
    pooled = y.max(axis=0) if T else np.full(g.num_commands, NEG_INF)
    return y, pooled


def oracle_best(paths: list[PathRecord]) -> float:
    return max((p.score for p in paths), default=NEG_INF)


def unique_argmax(g: CompiledGraph, paths: list[PathRecord], margin: float = 1e-6) -> bool:
    """True if, for every command, its best path beats all other distinct paths by ``margin``."""
    per_u: dict[int, dict[tuple, float]] = defaultdict(dict)
    for p in paths:
        for o in set(p.olabels) - {EPSILON}:
            per_u[o][p.arcs] = p.score
    for scores in per_u.values():
        top = sorted(scores.values(), reverse=True)
        if len(top) > 1 and top[0] - top[1] < margin:
            return False
    return True


# ---------------------------------------------------------------------------
# probability-domain recursions, written directly from the products


def prob_forward(g: CompiledGraph, xs: np.ndarray) -> np.ndarray:
    """Linear-domain alpha (max of products), returned as logs."""
    T, S = xs.shape
    x = np.exp(xs)
    v = np.exp(g.logv)
    alpha = np.zeros((T + 1, S))
    alpha[0, g.start] = 1.0
    for t in range(1, T + 1):
        for k in range(g.num_arcs):
            i, j = g.dst[k], g.src[k]
            alpha[t, i] = max(alpha[t, i], v[k] * alpha[t - 1, j] * x[t - 1, j])
    with np.errstate(divide="ignore"):
        return np.log(alpha)


def prob_backward(g: CompiledGraph, xs: np.ndarray) -> np.ndarray:
    T, S = xs.shape
    x = np.exp(xs)
    v = np.exp(g.logv)
    beta = np.zeros((T + 1, S))
    beta[T] = np.where(g.finals > NEG_INF / 2, np.exp(g.finals), 0.0)
    for t in range(T - 1, -1, -1):
        m = np.zeros(S)
        for k in range(g.num_arcs):
            j, i = g.src[k], g.dst[k]
            m[j] = max(m[j], v[k] * beta[t + 1, i])
        beta[t] = m * x[t]
    with np.errstate(divide="ignore"):
        return np.log(beta)


def prob_output(g: CompiledGraph, xs: np.ndarray) -> np.ndarray:
    """Linear-domain per-frame command scores, returned as logs (T x C)."""
    T, _ = xs.shape
    x = np.exp(xs)
    v = np.exp(g.logv)
    alpha = np.exp(prob_forward(g, xs))
    beta = np.exp(prob_backward(g, xs))
    y = np.zeros((T, g.num_commands))
    for t in range(1, T + 1):
        for k in range(g.num_arcs):
            o = g.olabel[k]
            if o == EPSILON:
                continue
            i, j = g.src[k], g.dst[k]
            y[t - 1, o - 1] = max(y[t - 1, o - 1], alpha[t - 1, i] * v[k] * x[t - 1, i] * beta[t, j])
    with np.errstate(divide="ignore"):
        return np.log(y)


# ---------------------------------------------------------------------------
# finite differences


def finite_diff(fn: Callable[[np.ndarray], float], point: np.ndarray, h: float = 1e-5,
                coords=None) -> tuple[np.ndarray, np.ndarray]:
    """Central differences per coordinate; returns (gradient, non-finite flags)."""
    point = np.array(point, dtype=np.float64)
    grad = np.zeros_like(point)
    flagged = np.zeros(point.shape, dtype=bool)
    flat = point.reshape(-1)
    gflat, fflat = grad.reshape(-1), flagged.reshape(-1)
    for k in range(flat.size) if coords is None else coords:
        old = flat[k]
        flat[k] = old + h
        up = fn(point)
        flat[k] = old - h
        down = fn(point)
        flat[k] = old
        if not (math.isfinite(up) and math.isfinite(down)):
            fflat[k] = True
            continue
        gflat[k] = (up - down) / (2 * h)
    return grad, flagged


def one_sided_diff(fn: Callable[[np.ndarray], float], point: np.ndarray, h: float = 1e-5,
                   coords=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Central, backward and forward differences for each coordinate in ``coords``."""
    point = np.array(point, dtype=np.float64)
    flat = point.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords, dtype=np.int64)
    f0 = fn(point)
    left, right = np.zeros(flat.size), np.zeros(flat.size)
    for k in idx:
        old = flat[k]
        flat[k] = old + h
        right[k] = (fn(point) - f0) / h
        flat[k] = old - h
        left[k] = (f0 - fn(point)) / h
        flat[k] = old
    return 0.5 * (left + right), left, right


def kink_aware_error(analytic: np.ndarray, fn: Callable[[np.ndarray], float], point: np.ndarray,
                     h: float = 1e-5, coords=None, kink_tol: float = 1e-3) -> tuple[float, int]:
    """Relative error of ``analytic`` against finite differences of ``fn``.

    Where the one-sided derivatives disagree by more than ``kink_tol`` (a tie
    between max paths), a subgradient only has to lie between them, so the
    reference there is the analytic value clipped into that interval.
    Returns (error, number of kink coordinates).
    """
    idx = np.arange(np.size(point)) if coords is None else np.asarray(coords, dtype=np.int64)
    central, left, right = one_sided_diff(fn, point, h, idx)
    a = np.asarray(analytic, float).reshape(-1)[idx]
    central, left, right = central[idx], left[idx], right[idx]
    lo, hi = np.minimum(left, right), np.maximum(left, right)
    kink = (hi - lo) > kink_tol * np.maximum(np.abs(central), 1.0)
    ref = np.where(kink, np.clip(a, lo, hi), central)
    return relative_error(a, ref), int(kink.sum())


def relative_error(a, b, floor: float = 1e-3) -> float:
    """max |a - b| / max(|a|, |b|, floor); the floor keeps near-zero entries absolute."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor), initial=0.0))


# ---------------------------------------------------------------------------
# WFST-level enumeration (epsilon arcs allowed)


def wfst_label_scores(w: Wfst, max_emitting: int, emission: Callable[[int, int], float] | None = None
                      ) -> dict[tuple[tuple[int, ...], tuple[int, ...]], float]:
    """Best complete-path score per (ilabel sequence, olabel sequence), epsilons stripped.

    Paths use at most ``max_emitting`` non-epsilon arcs and at most
    ``num_states`` consecutive epsilon arcs.  ``emission(frame, ilabel)`` adds
    an acoustic term to each non-epsilon arc.
    """
    if w.num_states > 2 * MAX_STATES or len(w.arcs) > 3 * MAX_ARCS:
        raise OracleSizeError("transducer too large for exhaustive enumeration")
    out = defaultdict(list)
    for a in w.arcs:
        out[a.src].append(a)
    best: dict = {}
    visited: dict = {}

    def rec(s, ils, ols, score, eps_run):
        # a revisit with the same label history and no better score adds nothing
        key = (s, tuple(ils), tuple(ols))
        prev = visited.get(key)
        if prev is not None and prev[0] >= score and prev[1] <= eps_run:
            return
        visited[key] = (score, eps_run)
        if s in w.finals:
            key = (tuple(ils), tuple(ols))
            total = score + w.finals[s]
            if key not in best or total > best[key]:
                best[key] = total
        for a in out[s]:
            if a.ilabel == EPSILON:
                if eps_run >= w.num_states:
                    continue
                rec(a.dst, ils, ols + ([a.olabel] if a.olabel else []), score + a.weight, eps_run + 1)
            elif len(ils) < max_emitting:
                e = emission(len(ils), a.ilabel) if emission else 0.0
                rec(a.dst, ils + [a.ilabel], ols + ([a.olabel] if a.olabel else []),
                    score + a.weight + e, 0)

    rec(w.start, [], [], 0.0, 0)
    return best


def wfst_best_by_olabels(w: Wfst, max_emitting: int) -> dict[tuple[int, ...], float]:
    out: dict = {}
    for (_, ols), score in wfst_label_scores(w, max_emitting).items():
        if ols not in out or score > out[ols]:
            out[ols] = score
    return out


def wfst_best_decode(w: Wfst, pdf_of: dict[int, int], logpost: np.ndarray, scale: float
                     ) -> tuple[float, tuple[int, ...]]:
    """Exhaustive best path consuming exactly T frames (score, olabels)."""
    T = logpost.shape[0]

    def emission(frame, ilabel):
        lp = logpost[frame, pdf_of[ilabel]]
        return scale * lp if lp > -math.inf else NEG_INF

    best, labels = NEG_INF, ()
    for (ils, ols), score in sorted(wfst_label_scores(w, T, emission).items()):
        if len(ils) == T and score > best:
            best, labels = score, ols
    return best, labels


# ---------------------------------------------------------------------------
# end-to-end gradient check for one utterance


@dataclass
class GradCheckReport:
    d_logv: float
    d_logpost: float
    am: float | None
    coords: int
    kinks: int = 0  # coordinates checked against a one-sided interval

    @property
    def max_rel_err(self) -> float:
        return max(e for e in (self.d_logv, self.d_logpost, self.am) if e is not None)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err <= tol


def gradient_check(graph: CompiledGraph, matrix: np.ndarray, label: int, am=None, lam: float = 0.01,
                   scale: float = 0.07, h: float = 1e-5, max_coords: int = 20000,
                   corrupt: float = 0.0) -> GradCheckReport:
    """Compare routed gradients for one utterance against central differences.

    ``matrix`` holds AM input features when ``am`` is given, otherwise linear
    posteriors.  The transition and posterior checks use the classification
    loss alone; the AM check adds the KL term against the unadapted output.
    Coordinates sitting on a tie between max paths are checked against the
    interval of one-sided differences instead (see :func:`kink_aware_error`).
    ``corrupt`` is added to the analytic transition gradient (negative control).
    """
    x_org, _ = log_posteriors(am, matrix)
    n = graph.num_arcs + x_org.size + (am.flat().size if am is not None else 0)
    if n > max_coords:
        raise OracleSizeError(f"{n} coordinates exceed the limit of {max_coords}; use a shorter "
                              "utterance or a smaller graph/AM")
    res = utterance_step(graph, am, matrix, label, x_org,
                         TrainConfig(mode=Mode.E2E, lam=lam, acoustic_scale=scale))
    if res.skipped:
        raise ValueError(f"label {label} has no complete path through the graph")

    def ce(g, logpost):
        _, scores = score_utterance(g, PosteriorSequence(logpost, scale))
        return classification_loss(scores.pooled, label)[0]

    work = graph.copy()

    def f_logv(v):
        work.logv[:] = v
        return ce(work, x_org)

    analytic = res.bundle.dense_logv(graph.num_arcs) + corrupt
    err_v, kinks = kink_aware_error(analytic, f_logv, graph.logv, h)

    finite = np.flatnonzero(np.isfinite(x_org).ravel())
    err_p, k = kink_aware_error(res.bundle.d_logpost, lambda lp: ce(graph, lp), x_org, h, coords=finite)
    kinks += k

    err_am = None
    if am is not None:
        probe = am.copy()

        def f_am(vec):
            probe.set_flat(vec)
            x, _ = log_posteriors(probe, matrix)
            return ce(graph, x) + kl_regularizer(x_org, x, lam)[0]

        grads = np.concatenate([g.ravel() for g in res.am_grads])
        err_am, k = kink_aware_error(grads, f_am, am.flat(), h)
        kinks += k
    return GradCheckReport(err_v, err_p, err_am, n, kinks)
