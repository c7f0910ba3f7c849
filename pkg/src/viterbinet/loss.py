"""Command classification loss, KL regularizer and gradient routing.

In log domain the max-semiring network is piecewise linear, so the gradient
of a pooled command score is 1 on every arc weight and every emission along
its winning path.  Routing therefore walks the backpointers from the winning
(frame, arc) pair in both directions and drops ``dl[u]`` on everything it
crosses.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .compiler import NO_PDF, CompiledGraph
from .trellis import OutputScores, Trellis, reachable


class Mode(enum.Enum):
    AM_ONLY = "am"
    WFST_ONLY = "wfst"
    E2E = "e2e"

    @property
    def trains_am(self) -> bool:
        return self is not Mode.WFST_ONLY

    @property
    def trains_wfst(self) -> bool:
        return self is not Mode.AM_ONLY

    @classmethod
    def parse(cls, name: str) -> "Mode":
        aliases = {"am": cls.AM_ONLY, "am_only": cls.AM_ONLY, "wfst": cls.WFST_ONLY,
                   "wfst_only": cls.WFST_ONLY, "e2e": cls.E2E}
        try:
            return aliases[name.lower()]
        except KeyError:
            raise ValueError(f"unknown training mode {name!r}") from None


class NoPathError(ValueError):
    """The reference command has no complete path through the graph."""


@dataclass
class LossSpec:
    label: int
    lam: float = 0.01
    mode: Mode = Mode.E2E


@dataclass
class GradientBundle:
    d_logv: dict[int, float] = field(default_factory=dict)
    d_logpost: np.ndarray | None = None   # (T, P) w.r.t. log posteriors
    d_kl: np.ndarray | None = None        # (T, P) w.r.t. AM logits
    loss_value: float = 0.0

    def dense_logv(self, num_arcs: int) -> np.ndarray:
        out = np.zeros(num_arcs)
        for k, v in self.d_logv.items():
            out[k] = v
        return out


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(z, axis=axis, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def classification_loss(pooled: np.ndarray | OutputScores, label: int) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy of the pooled log scores against ``label``.

    Equivalent to cross-entropy of the l1-normalized linear scores.  Returns the
    loss and its gradient w.r.t. the pooled log scores.
    """
    if isinstance(pooled, OutputScores):
        pooled = pooled.pooled
    pooled = np.asarray(pooled, dtype=np.float64)
    if not 0 <= label < len(pooled):
        raise ValueError(f"label {label} outside [0, {len(pooled)})")
    ok = reachable(pooled)
    if not ok[label]:
        raise NoPathError(f"no complete path emits command {label}")
    z = np.where(ok, pooled, -np.inf)
    logp = log_softmax(z)
    prob = np.where(ok, np.exp(logp), 0.0)
    dl = prob.copy()
    dl[label] -= 1.0
    return float(-logp[label]), dl


def route_gradients(g: CompiledGraph, tr: Trellis, scores: OutputScores, dl: np.ndarray,
                    mode: Mode = Mode.E2E, scale: float = 1.0) -> GradientBundle:
    """Spread ``dl`` along each command's winning path.

    ``scale`` is the acoustic scale used by :func:`map_emissions`; emission
    gradients are w.r.t. the unscaled log posteriors.  Final weights are
    constants and receive nothing.
    """
    T = tr.num_frames
    d_logv: dict[int, float] = {}
    d_post = np.zeros((T, g.num_pdfs))
    emit = g.emit_pdf

    def hit(arc: int, frame: int, amount: float):
        # frame is 1-based: the arc is crossed at that frame, emitting at its source
        d_logv[arc] = d_logv.get(arc, 0.0) + amount
        pdf = emit[g.src[arc]]
        if pdf != NO_PDF:
            d_post[frame - 1, pdf] += amount * scale

    for u in np.flatnonzero(dl):
        u = int(u)
        if scores.win_arc[u] < 0:
            continue
        amount = float(dl[u])
        t_star, a_star = int(scores.win_t[u]), int(scores.win_arc[u])
        hit(a_star, t_star, amount)
        s, t = int(g.src[a_star]), t_star - 1
        while t > 0:
            a = int(tr.bp_fwd[t, s])
            if a < 0:
                raise AssertionError(f"broken forward backpointer at t={t}, state {s}")
            hit(a, t, amount)
            s, t = int(g.src[a]), t - 1
        if s != g.start:
            raise AssertionError("forward backpointers do not lead to the start state")
        s, t = int(g.dst[a_star]), t_star
        while t < T:
            a = int(tr.bp_bwd[t, s])
            if a < 0:
                raise AssertionError(f"broken backward backpointer at t={t}, state {s}")
            hit(a, t + 1, amount)
            s, t = int(g.dst[a]), t + 1
        if not reachable(g.finals[s]):
            raise AssertionError("backward backpointers end in a non-final state")

    if not mode.trains_wfst:
        d_logv = {}
    if not mode.trains_am:
        d_post = np.zeros_like(d_post)
    d_logv = {k: v for k, v in sorted(d_logv.items())}
    return GradientBundle(d_logv=d_logv, d_logpost=d_post)


def kl_regularizer(x_org: np.ndarray, x: np.ndarray, lam: float = 0.01) -> tuple[float, np.ndarray]:
    """``lam * sum_t KL(x_org[t] || x[t])`` on log posteriors, and its logit gradient."""
    x_org = np.asarray(x_org, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_org.shape != x.shape:
        raise ValueError(f"shape mismatch {x_org.shape} vs {x.shape}")
    if lam == 0.0:
        return 0.0, np.zeros_like(x)
    p_org = np.exp(x_org)
    with np.errstate(invalid="ignore"):
        terms = np.where(p_org > 0, p_org * (x_org - x), 0.0)
    penalty = lam * float(terms.sum())
    return penalty, lam * (np.exp(x) - p_org)


def logpost_to_logit_grad(d_logpost: np.ndarray, logpost: np.ndarray) -> np.ndarray:
    """Backprop through log-softmax: dz = d - softmax * sum(d)."""
    return d_logpost - np.exp(logpost) * d_logpost.sum(axis=1, keepdims=True)


def mean_frame_kl(x_org: np.ndarray, x: np.ndarray) -> float:
    penalty, _ = kl_regularizer(x_org, x, 1.0)
    return penalty / max(len(x), 1)
