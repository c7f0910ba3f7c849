"""Weighted finite-state transducers in AT&T text format.

Internally every weight is a log-domain score (higher is better).  The text
format carries either tropical weights (``-log p``) or probabilities; the
``domain`` argument of :func:`parse_wfst` / :func:`serialize_wfst` selects
which one.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, TextIO

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

EPSILON = 0


class WfstError(ValueError):
    """Raised for malformed or inconsistent transducers."""


class WeightDomain(enum.Enum):
    TROPICAL = "tropical"
    PROBABILITY = "probability"

    def to_log(self, w: float) -> float:
        if self is WeightDomain.TROPICAL:
            return -w
        if not w > 0.0:
            raise WfstError(f"probability weight must be > 0, got {w!r}")
        return math.log(w)

    def from_log(self, score: float) -> float:
        if self is WeightDomain.TROPICAL:
            return 0.0 - score  # never emit -0.0
        return math.exp(score)

    @property
    def default_weight(self) -> float:
        return 0.0 if self is WeightDomain.TROPICAL else 1.0


@dataclass(frozen=True)
class Arc:
    src: int
    dst: int
    ilabel: int
    olabel: int
    weight: float  # log score

    @property
    def is_epsilon(self) -> bool:
        return self.ilabel == EPSILON


@dataclass
class Wfst:
    num_states: int
    start: int = 0
    arcs: list[Arc] = field(default_factory=list)
    finals: dict[int, float] = field(default_factory=dict)
    isyms: dict[str, int] | None = None
    osyms: dict[str, int] | None = None

    def validate(self) -> "Wfst":
        S = self.num_states
        if S < 1:
            raise WfstError("a transducer needs at least one state")
        if not 0 <= self.start < S:
            raise WfstError(f"start state {self.start} out of range [0, {S})")
        for k, a in enumerate(self.arcs):
            if not (0 <= a.src < S and 0 <= a.dst < S):
                raise WfstError(f"arc {k} ({a.src}->{a.dst}) references a missing state")
            if a.ilabel < 0 or a.olabel < 0:
                raise WfstError(f"arc {k} has a negative label")
            if not math.isfinite(a.weight):
                raise WfstError(f"arc {k} has non-finite weight {a.weight!r}")
        for s, w in self.finals.items():
            if not 0 <= s < S:
                raise WfstError(f"final state {s} out of range [0, {S})")
            if not math.isfinite(w):
                raise WfstError(f"final state {s} has non-finite weight {w!r}")
        return self

    def arcs_from(self, state: int) -> list[Arc]:
        return [a for a in self.arcs if a.src == state]

    @property
    def num_arcs(self) -> int:
        return len(self.arcs)

    def copy(self) -> "Wfst":
        return replace(self, arcs=list(self.arcs), finals=dict(self.finals))


def _parse_number(tok: str, lineno: int, what: str, kind=int):
    try:
        value = kind(tok)
    except ValueError:
        raise WfstError(f"line {lineno}: non-numeric {what} {tok!r}") from None
    if kind is float and not math.isfinite(value):
        raise WfstError(f"line {lineno}: non-finite {what} {tok!r}")
    return value


def parse_wfst(text: str | TextIO | Iterable[str],
               domain: WeightDomain = WeightDomain.TROPICAL) -> Wfst:
    """Parse an arc-per-line transducer.

    Arc lines are ``src dst ilabel olabel [weight]``, final lines are
    ``state [weight]``.  The source of the first arc line is the start state.
    Blank lines are skipped.
    """
    lines = text.splitlines() if isinstance(text, str) else text
    arcs: list[Arc] = []
    finals: dict[int, float] = {}
    start = None
    max_state = -1
    for lineno, line in enumerate(lines, 1):
        fields = line.split()
        if not fields:
            continue
        n = len(fields)
        if n in (4, 5):
            src, dst, il, ol = (_parse_number(t, lineno, name) for t, name in
                                zip(fields[:4], ("src", "dst", "ilabel", "olabel")))
            w = _parse_number(fields[4], lineno, "weight", float) if n == 5 else domain.default_weight
            if min(src, dst, il, ol) < 0:
                raise WfstError(f"line {lineno}: negative state or label id")
            try:
                score = domain.to_log(w)
            except WfstError as e:
                raise WfstError(f"line {lineno}: {e}") from None
            arcs.append(Arc(src, dst, il, ol, score))
            if start is None:
                start = src
            max_state = max(max_state, src, dst)
        elif n in (1, 2):
            s = _parse_number(fields[0], lineno, "state")
            w = _parse_number(fields[1], lineno, "weight", float) if n == 2 else domain.default_weight
            if s < 0:
                raise WfstError(f"line {lineno}: negative state id")
            try:
                finals[s] = domain.to_log(w)
            except WfstError as e:
                raise WfstError(f"line {lineno}: {e}") from None
            max_state = max(max_state, s)
        else:
            raise WfstError(f"line {lineno}: expected 1, 2, 4 or 5 fields, got {n}")
    if max_state < 0:
        raise WfstError("empty transducer")
    if start is None:
        start = min(finals)
    return Wfst(num_states=max_state + 1, start=start, arcs=arcs, finals=finals).validate()


def _fmt(x: float) -> str:
    x = float(x) + 0.0
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def serialize_wfst(w: Wfst, domain: WeightDomain = WeightDomain.TROPICAL) -> str:
    """Inverse of :func:`parse_wfst`; arcs keep their order, finals follow sorted by state."""
    if w.arcs and w.arcs[0].src != w.start:
        raise WfstError("the start state must be the source of the first arc")
    if not w.arcs and w.finals and min(w.finals) != w.start:
        raise WfstError("arc-less transducer must have its start state final")
    out = []
    for a in w.arcs:
        out.append(f"{a.src}\t{a.dst}\t{a.ilabel}\t{a.olabel}\t{_fmt(domain.from_log(a.weight))}\n")
    for s in sorted(w.finals):
        out.append(f"{s}\t{_fmt(domain.from_log(w.finals[s]))}\n")
    return "".join(out)


def read_wfst(path, domain: WeightDomain = WeightDomain.TROPICAL) -> Wfst:
    with open(path) as f:
        return parse_wfst(f.read(), domain)


def write_wfst(w: Wfst, path, domain: WeightDomain = WeightDomain.TROPICAL) -> None:
    with open(path, "w") as f:
        f.write(serialize_wfst(w, domain))


def parse_symbols(text: str) -> dict[str, int]:
    table: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 2:
            raise WfstError(f"symbol table line {lineno}: expected 'symbol id'")
        table[fields[0]] = _parse_number(fields[1], lineno, "symbol id")
    if table.get("<eps>", 0) != 0 or 0 in {v for k, v in table.items() if k != "<eps>"}:
        raise WfstError("symbol id 0 is reserved for <eps>")
    return table


def serialize_symbols(table: dict[str, int]) -> str:
    return "".join(f"{s}\t{i}\n" for s, i in sorted(table.items(), key=lambda kv: kv[1]))


# ---------------------------------------------------------------------------
# epsilon removal


@dataclass
class EpsilonReport:
    removed: int
    surviving: list[Arc]

    def __str__(self) -> str:
        return f"{self.removed} removed / {len(self.surviving)} surviving"


def _is_removable(a: Arc) -> bool:
    return a.ilabel == EPSILON and a.olabel == EPSILON


def _epsilon_cycle_mask(w: Wfst) -> np.ndarray:
    """True for each (0:0) epsilon arc lying on a cycle of (0:0) epsilon arcs."""
    eps = [k for k, a in enumerate(w.arcs) if _is_removable(a)]
    mask = np.zeros(len(w.arcs), dtype=bool)
    if not eps:
        return mask
    src = np.array([w.arcs[k].src for k in eps])
    dst = np.array([w.arcs[k].dst for k in eps])
    graph = csr_matrix((np.ones(len(eps)), (src, dst)), shape=(w.num_states,) * 2)
    _, comp = connected_components(graph, directed=True, connection="strong")
    for k, s, d in zip(eps, src, dst):
        mask[k] = s == d or comp[s] == comp[d]
    return mask


def _order_states(w: Wfst) -> list[int]:
    return [w.start] + [s for s in range(w.num_states) if s != w.start]


def remove_epsilons(w: Wfst) -> tuple[Wfst, EpsilonReport]:
    """Max-semiring epsilon removal.

    Only arcs with both labels epsilon are removable; those lying on an
    epsilon cycle are kept, as are arcs with ilabel 0 but a real olabel.
    Every kept arc leaving a state in the epsilon closure of ``q`` is copied
    to ``q`` with the closure score added, and final weights are propagated
    the same way.  Copies with identical (dst, ilabel, olabel) are merged,
    keeping the best score.
    """
    on_cycle = _epsilon_cycle_mask(w)
    removable = [_is_removable(a) and not on_cycle[k] for k, a in enumerate(w.arcs)]
    n_removed = sum(removable)
    if n_removed == 0:
        surviving = [a for a in w.arcs if a.is_epsilon]
        return w.copy(), EpsilonReport(0, surviving)

    eps_out: dict[int, list[Arc]] = {}
    kept_out: dict[int, list[Arc]] = {}
    for a, r in zip(w.arcs, removable):
        (eps_out if r else kept_out).setdefault(a.src, []).append(a)

    closure_cache: dict[int, dict[int, float]] = {}

    def closure(q: int) -> dict[int, float]:
        # removable arcs form a DAG, so plain recursion terminates
        if q in closure_cache:
            return closure_cache[q]
        best = {q: 0.0}
        for a in eps_out.get(q, ()):
            for r, d in closure(a.dst).items():
                score = a.weight + d
                if r not in best or score > best[r]:
                    best[r] = score
        closure_cache[q] = best
        return best

    arcs: list[Arc] = []
    finals: dict[int, float] = {}
    for q in _order_states(w):
        cl = closure(q)
        merged: dict[tuple[int, int, int], int] = {}
        for r in sorted(cl, key=lambda s: (s != q, s)):
            d = cl[r]
            if r in w.finals:
                f = d + w.finals[r]
                if q not in finals or f > finals[q]:
                    finals[q] = f
            for a in kept_out.get(r, ()):
                key = (a.dst, a.ilabel, a.olabel)
                new = Arc(q, a.dst, a.ilabel, a.olabel, a.weight + d)
                if key in merged:
                    k = merged[key]
                    if new.weight > arcs[k].weight:
                        arcs[k] = new
                else:
                    merged[key] = len(arcs)
                    arcs.append(new)
    out = Wfst(w.num_states, w.start, arcs, finals, w.isyms, w.osyms)
    surviving = [a for a in arcs if a.is_epsilon]
    return out, EpsilonReport(n_removed, surviving)


# ---------------------------------------------------------------------------
# per-state ilabel normalization


def state_ilabels(w: Wfst) -> dict[int, list[int]]:
    """Distinct non-epsilon outgoing ilabels per state, in first-seen order."""
    seen: dict[int, list[int]] = {}
    for a in w.arcs:
        if a.ilabel != EPSILON:
            labels = seen.setdefault(a.src, [])
            if a.ilabel not in labels:
                labels.append(a.ilabel)
    return seen


def normalize_ilabels(w: Wfst) -> Wfst:
    """Split states so that all outgoing non-epsilon arcs of a state share one ilabel.

    A state with k distinct outgoing ilabels becomes k states: copy j keeps
    the arcs carrying the j-th ilabel (the first copy reuses the original id
    and also keeps the epsilon arcs), every incoming arc is duplicated to each
    copy and final weights are copied.  The start state cannot be split since
    a transducer has a single start; that case raises :class:`WfstError`.
    """
    labels = state_ilabels(w)
    split = {s: ls for s, ls in labels.items() if len(ls) > 1}
    if not split:
        return w.copy()
    if w.start in split:
        raise WfstError(
            f"start state {w.start} has outgoing ilabels {split[w.start]}; "
            "a single start state cannot be split")

    # copies[s] maps ilabel -> new state id; the first ilabel keeps the old id
    copies: dict[int, dict[int, int]] = {}
    next_id = w.num_states
    for s in sorted(split):
        ids = {split[s][0]: s}
        for il in split[s][1:]:
            ids[il] = next_id
            next_id += 1
        copies[s] = ids

    def sources(a: Arc) -> int:
        if a.src not in copies:
            return a.src
        if a.ilabel == EPSILON:
            return a.src
        return copies[a.src][a.ilabel]

    arcs: list[Arc] = []
    for a in w.arcs:
        src = sources(a)
        if a.dst in copies:
            for d in copies[a.dst].values():
                arcs.append(Arc(src, d, a.ilabel, a.olabel, a.weight))
        else:
            arcs.append(Arc(src, a.dst, a.ilabel, a.olabel, a.weight))
    # group by source in state order so the start state leads
    order = {s: k for k, s in enumerate([w.start] + [s for s in range(next_id) if s != w.start])}
    arcs.sort(key=lambda a: order[a.src])  # stable: keeps file order within a state

    finals = dict(w.finals)
    for s, ids in copies.items():
        if s in w.finals:
            for c in ids.values():
                finals[c] = w.finals[s]
    return Wfst(next_id, w.start, arcs, dict(sorted(finals.items())), w.isyms, w.osyms)


def is_normalized(w: Wfst) -> bool:
    return all(len(ls) <= 1 for ls in state_ilabels(w).values())
