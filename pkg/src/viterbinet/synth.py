"""Synthetic command-recognition task.

Pdf 0 is silence and pdfs 1..P-1 are phones; ilabel ``k`` is pdf ``k - 1``.
Each command is a short phone string.  The grammar is a star: a silence start
state branches into one left-to-right phone chain per command, every chain
ends with the command's olabel on the arc into a shared final silence state.

Frame posteriors are the true phone's one-hot mixed with noise at weight
``noise``.  The default noise is uniform over pdfs.  With
``noise_model="confusable"`` it is a Dirichlet draw per frame, biased toward a
fixed confusable phone per true phone.  The grammar's command priors are
drawn at random rather than matching the uniform label distribution, so the
graph weights have something to adapt as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .am import AmConfig, AmModel, save_am
from .compiler import TransitionTable, serialize_ttable
from .data import Utterance, write_manifest, write_matrix
from .wfst import Arc, Wfst, WeightDomain, serialize_symbols, write_wfst

SILENCE = 0
PROB_FLOOR = 1e-8


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    num_commands: int = 5
    num_pdfs: int = 8
    frames_per_phone: int = 3
    noise: float = 0.6
    num_train: int = 200
    num_eval: int = 100
    confusion: float = 2.0       # confusable model: Dirichlet mass on each phone's confuser
    concentration: float = 0.5   # confusable model: symmetric Dirichlet mass
    prior_spread: float = 5.0    # Dirichlet concentration of grammar command priors
    self_loop: float = 0.5
    noise_model: str = "uniform"  # or "confusable"

    def __post_init__(self):
        if self.noise_model not in ("uniform", "confusable"):
            raise ValueError(f"unknown noise model {self.noise_model!r}")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError("noise must lie in [0, 1]")


@dataclass
class SynthTask:
    config: SynthConfig
    commands: list[tuple[int, ...]]
    confuser: np.ndarray
    grammar: Wfst
    ttable: TransitionTable
    train: list[tuple[str, np.ndarray, int]]
    eval: list[tuple[str, np.ndarray, int]]

    def features(self, split: str) -> list[tuple[str, np.ndarray, int]]:
        """Log-posterior features (input for :meth:`seed_am`)."""
        return [(u, np.log(p), c) for u, p, c in getattr(self, split)]

    def seed_am(self, hidden_layers: int = 0, splice: int = 1) -> AmModel:
        P = self.config.num_pdfs
        cfg = AmConfig(input_dim=P, splice_left=splice, splice_right=splice,
                       hidden_layers=hidden_layers, hidden_units=max(P, 1), num_pdfs=P)
        return AmModel.passthrough(cfg)


def make_commands(rng: np.random.Generator, C: int, P: int) -> list[tuple[int, ...]]:
    phones = P - 1
    if C > phones ** 3:
        raise ValueError(f"cannot make {C} distinct commands from {phones} phones")
    commands: list[tuple[int, ...]] = []
    seen = set()
    while len(commands) < C:
        if commands and rng.random() < 0.5:
            # share a prefix with an existing command
            base = commands[rng.integers(len(commands))]
            k = int(rng.integers(1, len(base) + 1))
            tail = int(rng.integers(1, 3))
            cmd = base[:k] + tuple(int(p) for p in rng.integers(1, P, size=tail))
        else:
            n = int(rng.integers(2, 4))
            cmd = tuple(int(p) for p in rng.integers(1, P, size=n))
        if len(cmd) > 4 or cmd in seen:
            continue
        if any(cmd[i] == cmd[i + 1] for i in range(len(cmd) - 1)):
            continue
        seen.add(cmd)
        commands.append(cmd)
    return commands


def make_grammar(commands: list[tuple[int, ...]], priors: np.ndarray, self_loop: float) -> Wfst:
    """Star grammar; ilabel = pdf + 1, olabel = command + 1, log-domain weights."""
    loop, fwd = math.log(self_loop), math.log(1.0 - self_loop)
    sil = SILENCE + 1
    arcs = [Arc(0, 0, sil, 0, loop)]
    end = 1 + sum(len(c) for c in commands)
    nxt = 1
    for u, cmd in enumerate(commands):
        first = nxt
        arcs.append(Arc(0, first, sil, 0, fwd + math.log(priors[u])))
        for k, phone in enumerate(cmd):
            s = nxt
            nxt += 1
            arcs.append(Arc(s, s, phone + 1, 0, loop))
            if k + 1 < len(cmd):
                arcs.append(Arc(s, s + 1, phone + 1, 0, fwd))
            else:
                arcs.append(Arc(s, end, phone + 1, u + 1, fwd))
    arcs.append(Arc(end, end, sil, 0, loop))
    osyms = {"<eps>": 0} | {"cmd" + "-".join(map(str, c)): u + 1 for u, c in enumerate(commands)}
    return Wfst(end + 1, 0, arcs, {end: 0.0}, osyms=osyms)


def make_utterance(rng: np.random.Generator, cmd: tuple[int, ...], cfg: SynthConfig,
                   confuser: np.ndarray) -> np.ndarray:
    P = cfg.num_pdfs
    fpp = cfg.frames_per_phone
    seq = [SILENCE] * int(rng.integers(1, 3))
    for phone in cmd:
        seq += [phone] * int(rng.integers(max(fpp - 1, 1), fpp + 2))
    seq += [SILENCE] * int(rng.integers(1, 3))
    T = len(seq)
    probs = np.zeros((T, P))
    for t, true in enumerate(seq):
        if cfg.noise_model == "uniform":
            q = np.full(P, 1.0 / P)
        else:
            alpha = np.full(P, cfg.concentration)
            alpha[confuser[true]] += cfg.confusion
            q = rng.dirichlet(alpha)
        probs[t] = (1.0 - cfg.noise) * np.eye(P)[true] + cfg.noise * q
    probs = np.maximum(probs, PROB_FLOOR)
    return probs / probs.sum(axis=1, keepdims=True)


def synthesize(cfg: SynthConfig = SynthConfig()) -> SynthTask:
    C, P = cfg.num_commands, cfg.num_pdfs
    if C < 2 or P < 2:
        raise ValueError("need at least 2 commands and 2 pdfs")
    rng = np.random.default_rng(cfg.seed)
    commands = make_commands(rng, C, P)
    # each pdf's confuser is a different pdf (a random derangement-free shift)
    confuser = (np.arange(P) + rng.integers(1, P, size=P)) % P
    priors = rng.dirichlet(np.full(C, cfg.prior_spread))
    grammar = make_grammar(commands, priors, cfg.self_loop)

    def split(name, n):
        labels = rng.integers(C, size=n)
        return [(f"{name}{k:04d}", make_utterance(rng, commands[u], cfg, confuser), int(u))
                for k, u in enumerate(labels)]

    train = split("tr", cfg.num_train)
    ev = split("ev", cfg.num_eval)
    return SynthTask(cfg, commands, confuser, grammar, TransitionTable.identity(P), train, ev)


def write_task(task: SynthTask, out_dir) -> dict[str, Path]:
    """Write grammar, transition table, symbols, posteriors, features, manifests and seed AM."""
    out = Path(out_dir)
    for sub in ("post", "feat"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    paths = {
        "fst": out / "grammar.fst", "ttable": out / "tt.txt", "words": out / "words.txt",
        "am": out / "seed.am",
    }
    write_wfst(task.grammar, paths["fst"], WeightDomain.TROPICAL)
    paths["ttable"].write_text(serialize_ttable(task.ttable))
    paths["words"].write_text(serialize_symbols(task.grammar.osyms))
    save_am(task.seed_am(), paths["am"])
    for split in ("train", "eval"):
        post, feat = [], []
        for uid, probs, label in getattr(task, split):
            pp, fp = out / "post" / f"{uid}.mat", out / "feat" / f"{uid}.mat"
            write_matrix(probs, pp)
            write_matrix(np.log(probs), fp)
            post.append(Utterance(uid, str(pp), label))
            feat.append(Utterance(uid, str(fp), label))
        paths[f"{split}_post"] = out / f"{split}.tsv"
        paths[f"{split}_feat"] = out / f"{split}_feat.tsv"
        write_manifest(post, paths[f"{split}_post"], relative_to=out)
        write_manifest(feat, paths[f"{split}_feat"], relative_to=out)
    return paths
