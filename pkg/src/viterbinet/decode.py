"""Token-passing Viterbi beam search over a full WFST, and SER scoring.

Unlike the trellis, the decoder works on the exported :class:`Wfst` and
follows surviving epsilon arcs within a frame.  A non-epsilon arc consumes one
frame and scores ``acoustic_scale * log x[t, pdf(ilabel)] + weight``.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .compiler import TransitionTable
from .wfst import EPSILON, Wfst


@dataclass(frozen=True)
class DecodeConfig:
    beam: float = 7.0
    acoustic_scale: float = 0.07

    def __post_init__(self):
        if not self.beam > 0:
            raise ValueError("beam must be > 0")


@dataclass
class Hypothesis:
    olabels: list[int] = field(default_factory=list)
    score: float = -math.inf
    alignment: list[int] = field(default_factory=list)
    no_path: bool = False

    @property
    def commands(self) -> list[int]:
        return [o - 1 for o in self.olabels]


# a token's history is a linked chain of (parent, olabel, emitting state or -1)
_Trace = tuple


class Decoder:
    """Reusable decoder for one graph; decoding is read-only on the graph."""

    def __init__(self, w: Wfst, tt: TransitionTable):
        self.w = w
        self.tt = tt
        self.emitting: list[list[tuple[int, int, float, int]]] = [[] for _ in range(w.num_states)]
        self.eps: list[list[tuple[int, int, float]]] = [[] for _ in range(w.num_states)]
        for k, a in enumerate(w.arcs):
            if a.ilabel == EPSILON:
                self.eps[a.src].append((a.dst, a.olabel, a.weight))
            else:
                if a.ilabel not in tt:
                    raise ValueError(f"ilabel {a.ilabel} (arc {k}) missing from the transition table")
                self.emitting[a.src].append((a.dst, a.olabel, a.weight, tt[a.ilabel]))

    def _closure(self, tokens: dict[int, tuple[float, _Trace]]) -> None:
        S = self.w.num_states
        updates = dict.fromkeys(tokens, 0)
        queue = deque(sorted(tokens))
        while queue:
            s = queue.popleft()
            score, trace = tokens[s]
            for dst, olabel, weight in self.eps[s]:
                new = score + weight
                if dst not in tokens or new > tokens[dst][0]:
                    # bounded relaxation guards against positive epsilon cycles
                    if updates.get(dst, 0) >= S:
                        continue
                    tokens[dst] = (new, (trace, olabel, -1))
                    updates[dst] = updates.get(dst, 0) + 1
                    queue.append(dst)

    @staticmethod
    def _prune(tokens: dict[int, tuple[float, _Trace]], beam: float) -> dict[int, tuple[float, _Trace]]:
        if not tokens or math.isinf(beam):
            return tokens
        best = max(v[0] for v in tokens.values())
        return {s: v for s, v in tokens.items() if v[0] >= best - beam}

    def decode(self, logpost: np.ndarray, cfg: DecodeConfig = DecodeConfig()) -> Hypothesis:
        logpost = np.asarray(logpost, dtype=np.float64)
        if logpost.ndim != 2 or logpost.shape[1] < self.tt.num_pdfs:
            raise ValueError(f"posterior shape {logpost.shape} does not cover {self.tt.num_pdfs} pdfs")
        scale = cfg.acoustic_scale
        tokens: dict[int, tuple[float, _Trace]] = {self.w.start: (0.0, None)}
        self._closure(tokens)
        tokens = self._prune(tokens, cfg.beam)
        for t in range(logpost.shape[0]):
            frame = logpost[t]
            nxt: dict[int, tuple[float, _Trace]] = {}
            for s in sorted(tokens):
                score, trace = tokens[s]
                for dst, olabel, weight, pdf in self.emitting[s]:
                    lp = frame[pdf]
                    if lp == -math.inf:
                        continue
                    new = score + scale * lp + weight
                    if dst not in nxt or new > nxt[dst][0]:
                        nxt[dst] = (new, (trace, olabel, s))
            nxt = self._prune(nxt, cfg.beam)
            self._closure(nxt)
            tokens = self._prune(nxt, cfg.beam)
            if not tokens:
                return Hypothesis(no_path=True)

        best, best_trace = -math.inf, None
        for s in sorted(tokens):
            if s in self.w.finals:
                total = tokens[s][0] + self.w.finals[s]
                if total > best:
                    best, best_trace = total, tokens[s][1]
        if best == -math.inf:
            return Hypothesis(no_path=True)
        olabels, alignment = [], []
        trace = best_trace
        while trace is not None:
            trace, olabel, state = trace
            if olabel != EPSILON:
                olabels.append(olabel)
            if state >= 0:
                alignment.append(state)
        return Hypothesis(olabels[::-1], float(best), alignment[::-1])


def viterbi_decode(w: Wfst, tt: TransitionTable, logpost: np.ndarray,
                   cfg: DecodeConfig = DecodeConfig()) -> Hypothesis:
    return Decoder(w, tt).decode(logpost, cfg)


def is_correct(h: Hypothesis, ref: int) -> bool:
    return not h.no_path and h.commands == [ref]


def score_ser(hyps: list[Hypothesis], refs: list[int]) -> float:
    """Fraction of utterances whose decoded command sequence is not exactly ``[ref]``."""
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        return 0.0
    errors = sum(not is_correct(h, r) for h, r in zip(hyps, refs))
    return errors / len(hyps)


def format_hyp_line(uid: str, h: Hypothesis) -> str:
    words = " ".join(map(str, h.commands))
    score = "nopath" if h.no_path else repr(float(h.score))
    return f"{uid}\t{words}\t{score}\n"


def parse_hyp_file(text: str) -> dict[str, Hypothesis]:
    hyps = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        uid, words, score = line.split("\t")
        if score == "nopath":
            hyps[uid] = Hypothesis(no_path=True)
        else:
            hyps[uid] = Hypothesis([int(c) + 1 for c in words.split()], float(score))
    return hyps
