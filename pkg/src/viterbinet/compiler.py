"""Compile a normalized WFST into the trainable sparse representation.

The emission map is stored as one pdf index per state (a gather), the
transition matrix as parallel arc arrays (``src``, ``dst``, ``logv``).  Both
have sparse-matrix views for inspection.  Command ``u`` (0-based) is the
output symbol ``u + 1``; olabel 0 is epsilon.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix

from .wfst import EPSILON, Arc, Wfst, WfstError

NEG_INF = -1e30
"""Log-domain stand-in for minus infinity (saturating, never produces NaN)."""

NO_PDF = -1

FORMAT_VERSION = 1


class CompileError(ValueError):
    pass


@dataclass
class TransitionTable:
    """Map from ilabel id to pdf id."""
    pdf_of: dict[int, int]
    num_pdfs: int

    @classmethod
    def identity(cls, num_pdfs: int) -> "TransitionTable":
        """ilabel ``k`` maps to pdf ``k - 1``."""
        return cls({k + 1: k for k in range(num_pdfs)}, num_pdfs)

    def __getitem__(self, ilabel: int) -> int:
        return self.pdf_of[ilabel]

    def __contains__(self, ilabel: int) -> bool:
        return ilabel in self.pdf_of


def parse_ttable(text: str, num_pdfs: int) -> TransitionTable:
    pdf_of = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 2:
            raise CompileError(f"transition table line {lineno}: expected 'ilabel pdf'")
        try:
            il, pdf = int(fields[0]), int(fields[1])
        except ValueError:
            raise CompileError(f"transition table line {lineno}: non-integer field") from None
        if il <= 0 or not 0 <= pdf < num_pdfs:
            raise CompileError(f"transition table line {lineno}: ilabel {il} -> pdf {pdf} out of range")
        pdf_of[il] = pdf
    return TransitionTable(pdf_of, num_pdfs)


def serialize_ttable(tt: TransitionTable) -> str:
    return "".join(f"{il}\t{pdf}\n" for il, pdf in sorted(tt.pdf_of.items()))


@dataclass
class CompiledGraph:
    num_states: int
    num_pdfs: int
    num_commands: int
    start: int
    emit_pdf: np.ndarray          # (S,) int, NO_PDF for non-emitting states
    src: np.ndarray               # (A,) int
    dst: np.ndarray               # (A,) int
    logv: np.ndarray              # (A,) float, the trainable weights
    olabel: np.ndarray            # (A,) int
    arc_id: np.ndarray            # (A,) index of the arc in the source Wfst
    finals: np.ndarray            # (S,) final log weight, NEG_INF if not final
    eps_arcs: list[tuple[int, Arc]] = field(default_factory=list)
    olabel_index: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def num_arcs(self) -> int:
        return len(self.logv)

    def emission_matrix(self) -> csr_matrix:
        """The binary S x P matrix mapping posteriors to states."""
        rows = np.flatnonzero(self.emit_pdf != NO_PDF)
        return csr_matrix((np.ones(len(rows)), (rows, self.emit_pdf[rows])),
                          shape=(self.num_states, self.num_pdfs))

    def transition_matrix(self) -> coo_matrix:
        """Log weights at [dst, src]; parallel arcs stay as separate entries."""
        return coo_matrix((self.logv.copy(), (self.dst, self.src)),
                          shape=(self.num_states, self.num_states))

    def copy(self) -> "CompiledGraph":
        return CompiledGraph(
            self.num_states, self.num_pdfs, self.num_commands, self.start,
            self.emit_pdf.copy(), self.src.copy(), self.dst.copy(), self.logv.copy(),
            self.olabel.copy(), self.arc_id.copy(), self.finals.copy(),
            list(self.eps_arcs), {u: v.copy() for u, v in self.olabel_index.items()})


def _build_olabel_index(olabel: np.ndarray) -> dict[int, np.ndarray]:
    index = {}
    for u in np.unique(olabel):
        if u != EPSILON:
            index[int(u) - 1] = np.flatnonzero(olabel == u)
    return index


def compile_graph(w: Wfst, tt: TransitionTable | None = None, num_pdfs: int | None = None,
                  num_commands: int | None = None) -> CompiledGraph:
    """Build the sparse emission/transition representation of ``w``.

    ``tt`` defaults to the identity table over ``num_pdfs`` pdfs.  When
    ``num_commands`` is not given it is the largest olabel in ``w`` (or the
    output symbol table size).
    """
    if tt is None:
        if num_pdfs is None:
            raise CompileError("need a transition table or a pdf count")
        tt = TransitionTable.identity(num_pdfs)
    P = tt.num_pdfs if num_pdfs is None else num_pdfs
    if P < tt.num_pdfs:
        raise CompileError(f"pdf count {P} smaller than the transition table's {tt.num_pdfs}")

    S = w.num_states
    emit = np.full(S, NO_PDF, dtype=np.int64)
    state_il = {}
    real, eps = [], []
    for k, a in enumerate(w.arcs):
        if a.ilabel == EPSILON:
            eps.append((k, a))
            continue
        if a.ilabel not in tt:
            raise CompileError(f"ilabel {a.ilabel} (arc {k}) missing from the transition table")
        prev = state_il.setdefault(a.src, a.ilabel)
        if prev != a.ilabel:
            raise CompileError(f"state {a.src} is not normalized: outgoing ilabels {prev} and {a.ilabel}")
        emit[a.src] = tt[a.ilabel]
        real.append(k)

    arcs = [w.arcs[k] for k in real]
    olabel = np.array([a.olabel for a in arcs], dtype=np.int64)
    C = int(olabel.max(initial=0))
    if w.osyms:
        C = max(C, max(w.osyms.values()))
    if num_commands is not None:
        if num_commands < C:
            raise CompileError(f"graph emits olabel {C} but only {num_commands} commands requested")
        C = num_commands

    finals = np.full(S, NEG_INF)
    for s, f in w.finals.items():
        finals[s] = f

    return CompiledGraph(
        num_states=S, num_pdfs=P, num_commands=C, start=w.start, emit_pdf=emit,
        src=np.array([a.src for a in arcs], dtype=np.int64),
        dst=np.array([a.dst for a in arcs], dtype=np.int64),
        logv=np.array([a.weight for a in arcs], dtype=np.float64),
        olabel=olabel,
        arc_id=np.array(real, dtype=np.int64),
        finals=finals,
        eps_arcs=eps,
        olabel_index=_build_olabel_index(olabel),
    )


def export_graph(g: CompiledGraph, template: Wfst) -> Wfst:
    """Write the (trained) transition weights of ``g`` back into ``template``.

    Epsilon arcs, final weights and topology come from ``template``.
    """
    n_real = sum(1 for a in template.arcs if a.ilabel != EPSILON)
    if n_real != g.num_arcs or len(template.arcs) != g.num_arcs + len(g.eps_arcs):
        raise CompileError(
            f"arc count mismatch: graph has {g.num_arcs}+{len(g.eps_arcs)} arcs, "
            f"template has {n_real}+{len(template.arcs) - n_real}")
    arcs = list(template.arcs)
    for k, score in zip(g.arc_id, g.logv):
        a = arcs[k]
        if a.ilabel == EPSILON:
            raise CompileError(f"graph arc maps to epsilon template arc {k}")
        arcs[k] = Arc(a.src, a.dst, a.ilabel, a.olabel, float(score))
    out = template.copy()
    out.arcs = arcs
    return out


# ---------------------------------------------------------------------------
# .vng container: a versioned text file, floats written with repr() so that a
# save/load round trip is exact


def _f(x: float) -> str:
    return repr(float(x))


def dump_graph(g: CompiledGraph) -> str:
    out = io.StringIO()
    out.write(f"VNG {FORMAT_VERSION}\n")
    out.write(f"S {g.num_states} P {g.num_pdfs} C {g.num_commands} start {g.start} "
              f"arcs {g.num_arcs} eps {len(g.eps_arcs)}\n")
    out.write("[W]\n")
    for s, p in enumerate(g.emit_pdf):
        if p != NO_PDF:
            out.write(f"{s} {p}\n")
    out.write("[V]\n")
    for k in range(g.num_arcs):
        out.write(f"{g.src[k]} {g.dst[k]} {g.olabel[k]} {g.arc_id[k]} {_f(g.logv[k])}\n")
    out.write("[OLABELS]\n")
    for u in sorted(g.olabel_index):
        out.write(f"{u} " + " ".join(map(str, g.olabel_index[u])) + "\n")
    out.write("[EPS]\n")
    for k, a in g.eps_arcs:
        out.write(f"{k} {a.src} {a.dst} {a.ilabel} {a.olabel} {_f(a.weight)}\n")
    out.write("[FINALS]\n")
    for s in np.flatnonzero(g.finals > NEG_INF):
        out.write(f"{s} {_f(g.finals[s])}\n")
    out.write("[END]\n")
    return out.getvalue()


def load_graph(text: str) -> CompiledGraph:
    lines = text.splitlines()
    try:
        magic, version = lines[0].split()
        if magic != "VNG":
            raise CompileError("not a compiled graph file")
        if int(version) != FORMAT_VERSION:
            raise CompileError(f"unsupported graph format version {version}")
        h = lines[1].split()
        hdr = dict(zip(h[0::2], map(int, h[1::2])))
        S, P, C = hdr["S"], hdr["P"], hdr["C"]
        sections: dict[str, list[list[str]]] = {}
        cur = None
        for line in lines[2:]:
            if line.startswith("["):
                cur = line.strip("[]")
                sections[cur] = []
            elif line.strip():
                sections[cur].append(line.split())
        emit = np.full(S, NO_PDF, dtype=np.int64)
        for s, p in sections["W"]:
            emit[int(s)] = int(p)
        V = sections["V"]
        src = np.array([int(r[0]) for r in V], dtype=np.int64)
        dst = np.array([int(r[1]) for r in V], dtype=np.int64)
        olabel = np.array([int(r[2]) for r in V], dtype=np.int64)
        arc_id = np.array([int(r[3]) for r in V], dtype=np.int64)
        logv = np.array([float(r[4]) for r in V], dtype=np.float64)
        index = {int(r[0]): np.array([int(x) for x in r[1:]], dtype=np.int64)
                 for r in sections["OLABELS"]}
        eps = [(int(r[0]), Arc(int(r[1]), int(r[2]), int(r[3]), int(r[4]), float(r[5])))
               for r in sections["EPS"]]
        finals = np.full(S, NEG_INF)
        for s, f in sections["FINALS"]:
            finals[int(s)] = float(f)
    except (IndexError, KeyError, ValueError) as e:
        if isinstance(e, CompileError):
            raise
        raise CompileError(f"malformed compiled graph: {e}") from None
    if len(V) != hdr["arcs"] or len(eps) != hdr["eps"]:
        raise CompileError("compiled graph section sizes disagree with the header")
    return CompiledGraph(S, P, C, hdr["start"], emit, src, dst, logv, olabel, arc_id,
                         finals, eps, index)


def save_graph(g: CompiledGraph, path) -> None:
    with open(path, "w") as f:
        f.write(dump_graph(g))


def read_graph(path) -> CompiledGraph:
    with open(path) as f:
        return load_graph(f.read())


__all__ = [
    "NEG_INF", "NO_PDF", "CompileError", "TransitionTable", "CompiledGraph",
    "compile_graph", "export_graph", "parse_ttable", "serialize_ttable",
    "dump_graph", "load_graph", "save_graph", "read_graph", "WfstError",
]
