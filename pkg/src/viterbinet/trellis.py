"""Max-semiring forward/backward over a compiled graph.

Frames are 1-based in the math and 0-based in arrays: ``xs[t - 1]`` holds the
emissions of frame ``t``, while ``alpha`` and ``beta`` have ``T + 1`` rows
(``alpha[0]`` is the initial vector, ``beta[T]`` the final weights).  The
emission of a transition is read at its source state, so a path
``s0 -a1-> s1 ... -aT-> sT`` scores

    sum_t xs[t-1, s_{t-1}] + sum_t logv[a_t] + finals[sT].

Unreachable entries hold :data:`NEG_INF`; every sum is saturated back to it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compiler import NEG_INF, NO_PDF, CompiledGraph

_FLOOR = NEG_INF / 2


def saturate(x: np.ndarray) -> np.ndarray:
    return np.where(x < _FLOOR, NEG_INF, x)


def reachable(x) -> np.ndarray:
    return np.asarray(x) > _FLOOR


@dataclass
class PosteriorSequence:
    """T x P log posteriors plus the acoustic scale applied to them."""
    logpost: np.ndarray
    scale: float = 1.0

    @property
    def num_frames(self) -> int:
        return self.logpost.shape[0]

    @classmethod
    def from_probs(cls, probs: np.ndarray, scale: float = 1.0, atol: float = 1e-5):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 2:
            raise ValueError("posteriors must be a T x P matrix")
        if np.any(probs < 0) or not np.allclose(probs.sum(axis=1), 1.0, atol=atol):
            raise ValueError("each posterior frame must be a distribution")
        with np.errstate(divide="ignore"):
            return cls(np.log(probs), scale)


@dataclass
class Trellis:
    xs: np.ndarray       # (T, S)
    alpha: np.ndarray    # (T+1, S)
    beta: np.ndarray     # (T+1, S)
    bp_fwd: np.ndarray   # (T+1, S) winning incoming arc, -1 if none
    bp_bwd: np.ndarray   # (T+1, S) winning outgoing arc, -1 if none

    @property
    def num_frames(self) -> int:
        return self.xs.shape[0]

    def best_score(self, g: CompiledGraph) -> float:
        """Best complete-path score: max_i alpha[T][i] + final(i)."""
        return float(saturate(self.alpha[-1] + g.finals).max())


@dataclass
class OutputScores:
    y: np.ndarray         # (T, C)
    pooled: np.ndarray    # (C,)
    win_t: np.ndarray     # (C,) 1-based frame of the winner, 0 if unreachable
    win_arc: np.ndarray   # (C,) winning arc, -1 if unreachable


def map_emissions(g: CompiledGraph, p: PosteriorSequence) -> np.ndarray:
    """Gather ``scale * log x[t, pdf(i)]`` per state; non-emitting states get 0."""
    logpost = np.asarray(p.logpost, dtype=np.float64)
    if logpost.ndim != 2 or logpost.shape[1] != g.num_pdfs:
        raise ValueError(f"posterior dimension {logpost.shape} does not match P={g.num_pdfs}")
    scaled = np.where(logpost == -np.inf, NEG_INF, p.scale * logpost)
    scaled = np.maximum(scaled, NEG_INF)
    emitting = g.emit_pdf != NO_PDF
    xs = np.zeros((logpost.shape[0], g.num_states))
    xs[:, emitting] = scaled[:, g.emit_pdf[emitting]]
    return xs


class _Segments:
    """Arcs grouped by a key (dst for forward, src for backward), in arc order."""

    def __init__(self, key: np.ndarray, size: int):
        order = np.lexsort((np.arange(len(key)), key))
        self.order = order
        sorted_key = key[order]
        self.starts = np.flatnonzero(np.r_[True, sorted_key[1:] != sorted_key[:-1]]) if len(key) else np.zeros(0, int)
        self.keys = sorted_key[self.starts]
        self.counts = np.diff(np.r_[self.starts, len(key)])
        self.size = size

    def max_argmax(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per key: max of ``values`` and the lowest arc index attaining it."""
        best = np.full(self.size, NEG_INF)
        arg = np.full(self.size, -1, dtype=np.int64)
        if len(self.order) == 0:
            return best, arg
        v = values[self.order]
        seg_max = np.maximum.reduceat(v, self.starts)
        hit = v == np.repeat(seg_max, self.counts)
        pos = np.where(hit, np.arange(len(v)), len(v))
        first = np.minimum.reduceat(pos, self.starts)
        ok = seg_max > _FLOOR
        best[self.keys[ok]] = seg_max[ok]
        arg[self.keys[ok]] = self.order[first[ok]]
        return best, arg


def _segments(g: CompiledGraph, which: str) -> _Segments:
    # cached per graph topology; logv may change but src/dst never do
    cache = g.__dict__.setdefault("_segment_cache", {})
    if which not in cache:
        cache[which] = _Segments(g.dst if which == "dst" else g.src, g.num_states)
    return cache[which]


def forward(g: CompiledGraph, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    T, S = xs.shape
    alpha = np.full((T + 1, S), NEG_INF)
    bp = np.full((T + 1, S), -1, dtype=np.int64)
    alpha[0, g.start] = 0.0
    seg = _segments(g, "dst")
    for t in range(1, T + 1):
        cand = alpha[t - 1, g.src] + xs[t - 1, g.src] + g.logv
        alpha[t], bp[t] = seg.max_argmax(cand)
    return alpha, bp


def backward(g: CompiledGraph, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    T, S = xs.shape
    beta = np.full((T + 1, S), NEG_INF)
    bp = np.full((T + 1, S), -1, dtype=np.int64)
    beta[T] = g.finals
    seg = _segments(g, "src")
    for t in range(T - 1, -1, -1):
        cand = g.logv + beta[t + 1, g.dst]
        best, bp[t] = seg.max_argmax(cand)
        beta[t] = saturate(best + xs[t])
        bp[t][beta[t] == NEG_INF] = -1
    return beta, bp


def run_trellis(g: CompiledGraph, p: PosteriorSequence) -> Trellis:
    xs = map_emissions(g, p)
    alpha, bp_fwd = forward(g, xs)
    beta, bp_bwd = backward(g, xs)
    return Trellis(xs, alpha, beta, bp_fwd, bp_bwd)


def arc_scores(g: CompiledGraph, tr: Trellis) -> np.ndarray:
    """T x A matrix: best complete path crossing arc a at frame t."""
    a = tr.alpha[:-1, g.src] + tr.xs[:, g.src] + g.logv + tr.beta[1:, g.dst]
    return saturate(a)


def output_scores(g: CompiledGraph, tr: Trellis) -> OutputScores:
    """Per-frame command scores and their max-pooling over time."""
    T = tr.num_frames
    C = g.num_commands
    y = np.full((T, C), NEG_INF)
    pooled = np.full(C, NEG_INF)
    win_t = np.zeros(C, dtype=np.int64)
    win_arc = np.full(C, -1, dtype=np.int64)
    if T == 0:
        return OutputScores(y, pooled, win_t, win_arc)
    scores = arc_scores(g, tr)
    for u, arcs in g.olabel_index.items():
        block = scores[:, arcs]
        y[:, u] = block.max(axis=1)
        # row-major argmax: lowest frame first, then lowest arc order
        flat = int(np.argmax(block))
        t, j = divmod(flat, len(arcs))
        if block[t, j] > _FLOOR:
            pooled[u] = block[t, j]
            win_t[u] = t + 1
            win_arc[u] = arcs[j]
    return OutputScores(y, pooled, win_t, win_arc)


def score_utterance(g: CompiledGraph, p: PosteriorSequence) -> tuple[Trellis, OutputScores]:
    tr = run_trellis(g, p)
    return tr, output_scores(g, tr)
