import math

import numpy as np
import pytest

from viterbinet.compiler import TransitionTable, compile_graph
from viterbinet.decode import (DecodeConfig, Decoder, Hypothesis, format_hyp_line, parse_hyp_file,
                               score_ser, viterbi_decode)
from viterbinet.oracle import wfst_best_decode
from viterbinet.trellis import PosteriorSequence, reachable, run_trellis
from viterbinet.wfst import Arc, Wfst, parse_wfst

from conftest import random_wfst

INF_BEAM = DecodeConfig(beam=math.inf, acoustic_scale=1.0)


def test_infinite_beam_matches_trellis():
    rng = np.random.default_rng(50)
    tt = TransitionTable.identity(3)
    for _ in range(100):
        w = random_wfst(rng)
        g = compile_graph(w, tt)
        lp = np.log(rng.dirichlet(np.ones(3), size=int(rng.integers(1, 7))))
        h = viterbi_decode(w, tt, lp, INF_BEAM)
        best = run_trellis(g, PosteriorSequence(lp)).best_score(g)
        if reachable(best):
            assert h.score == pytest.approx(best, abs=1e-9)
            assert len(h.alignment) == lp.shape[0]
        else:
            assert h.no_path


def test_infinite_beam_matches_exhaustive_with_epsilons():
    rng = np.random.default_rng(51)
    tt = TransitionTable.identity(3)
    for _ in range(60):
        w = random_wfst(rng, max_states=6, max_arcs=12, normalized=False)
        arcs = list(w.arcs)
        for _ in range(2):
            a, b = sorted(rng.choice(w.num_states, size=2, replace=False))
            arcs.append(Arc(int(a), int(b), 0, int(rng.integers(0, 3)), float(rng.normal())))
        w = Wfst(w.num_states, w.start, arcs, w.finals)
        lp = np.log(rng.dirichlet(np.ones(3), size=int(rng.integers(1, 5))))
        ref_score, _ = wfst_best_decode(w, tt.pdf_of, lp, 0.5)
        h = viterbi_decode(w, tt, lp, DecodeConfig(math.inf, 0.5))
        if ref_score > -1e29:
            assert h.score == pytest.approx(ref_score, abs=1e-9)
        else:
            assert h.no_path


def test_single_command_grammar():
    w = parse_wfst("0 0 1 0 0.0\n0 1 2 1 0.0\n1 1 2 0 0.0\n1\n")
    tt = TransitionTable.identity(2)
    lp = np.log(np.array([[0.9, 0.1], [0.9, 0.1], [0.2, 0.8], [0.2, 0.8]]))
    h = viterbi_decode(w, tt, lp)
    assert h.commands == [0]
    # alignment lists the source state of each frame's arc
    assert h.alignment == [0, 0, 0, 1]


def test_finite_beam_never_beats_infinite_beam():
    rng = np.random.default_rng(52)
    tt = TransitionTable.identity(3)
    for _ in range(100):
        w = random_wfst(rng)
        lp = np.log(rng.dirichlet(np.ones(3), size=5))
        full = viterbi_decode(w, tt, lp, INF_BEAM)
        narrow = viterbi_decode(w, tt, lp, DecodeConfig(0.5, 1.0))
        if not narrow.no_path:
            assert narrow.score <= full.score + 1e-12


def test_decoder_is_read_only():
    w = parse_wfst("0 1 1 1 0.3\n1 1 2 0 0.1\n1\n")
    before = list(w.arcs)
    Decoder(w, TransitionTable.identity(2)).decode(np.log(np.full((3, 2), 0.5)))
    assert w.arcs == before


def test_zero_posterior_blocks_arc():
    w = parse_wfst("0 1 1 1\n1\n")
    h = viterbi_decode(w, TransitionTable.identity(1), np.array([[-math.inf]]))
    assert h.no_path


def test_missing_ilabel():
    with pytest.raises(ValueError, match="ilabel 3"):
        Decoder(parse_wfst("0 1 3 0\n1\n"), TransitionTable.identity(2))


def test_ser_examples():
    good, bad = Hypothesis([3], 0.0), Hypothesis([3, 1], 0.0)
    assert score_ser([good, good], [2, 2]) == 0.0
    assert score_ser([good, bad], [2, 2]) == 0.5
    assert score_ser([Hypothesis(no_path=True)], [0]) == 1.0
    assert score_ser([], []) == 0.0
    with pytest.raises(ValueError):
        score_ser([good], [])


def test_hyp_file_round_trip():
    text = format_hyp_line("u1", Hypothesis([2, 1], -3.5)) + format_hyp_line("u2", Hypothesis(no_path=True))
    assert text == "u1\t1 0\t-3.5\nu2\t\tnopath\n"
    back = parse_hyp_file(text)
    assert back["u1"].commands == [1, 0] and back["u1"].score == -3.5
    assert back["u2"].no_path
