"""Minibatch Adam training of the transition weights and/or the acoustic model."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .am import AmModel, am_backward, am_forward, dump_am, splice
from .compiler import CompiledGraph, dump_graph
from .loss import (GradientBundle, Mode, NoPathError, classification_loss, kl_regularizer,
                   logpost_to_logit_grad, route_gradients)
from .optim import Adam, SparseAdam
from .trellis import PosteriorSequence, score_utterance

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_adam: float = 1e-8
    batch_size: int = 16
    epochs: int = 20
    lam: float = 0.01
    mode: Mode = Mode.E2E
    seed: int = 0
    acoustic_scale: float = 0.07
    threads: int = 1

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.threads < 1:
            raise ValueError("batch_size and threads must be >= 1, epochs >= 0")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError("lambda must be finite and >= 0")


@dataclass
class EpochMetrics:
    epoch: int
    mean_loss: float
    accuracy: float
    skipped: int
    wall_ms: int

    def line(self) -> str:
        return f"{self.epoch} {self.mean_loss!r} {self.accuracy!r} {self.wall_ms}\n"


@dataclass
class UttResult:
    index: int
    loss: float = 0.0
    correct: bool = False
    skipped: bool = False
    bundle: GradientBundle | None = None
    am_grads: list[np.ndarray] | None = None


@dataclass
class TrainResult:
    graph: CompiledGraph
    am: AmModel | None
    metrics: list[EpochMetrics] = field(default_factory=list)


def log_posteriors(am: AmModel | None, matrix: np.ndarray):
    """Log posteriors for one utterance plus the AM cache (None for frozen posteriors)."""
    if am is None:
        with np.errstate(divide="ignore"):
            return np.log(matrix), None
    return am_forward(am, splice(matrix, am.config.splice_left, am.config.splice_right))


def utterance_step(graph: CompiledGraph, am: AmModel | None, matrix: np.ndarray, label: int,
                   x_org: np.ndarray | None, cfg: TrainConfig, index: int = 0) -> UttResult:
    """Loss and gradients for one utterance; pure w.r.t. the model."""
    logpost, cache = log_posteriors(am, matrix)
    tr, scores = score_utterance(graph, PosteriorSequence(logpost, cfg.acoustic_scale))
    try:
        loss, dl = classification_loss(scores.pooled, label)
    except NoPathError:
        return UttResult(index, skipped=True)
    bundle = route_gradients(graph, tr, scores, dl, cfg.mode, cfg.acoustic_scale)
    correct = int(np.argmax(scores.pooled)) == label
    am_grads = None
    if am is not None and cfg.mode.trains_am:
        penalty, d_kl = kl_regularizer(x_org, logpost, cfg.lam)
        loss += penalty
        bundle.d_kl = d_kl
        d_logits = logpost_to_logit_grad(bundle.d_logpost, logpost) + d_kl
        am_grads = am_backward(am, cache, d_logits)
    bundle.loss_value = loss
    return UttResult(index, loss, correct, False, bundle, am_grads)


def merge_results(results: list[UttResult]) -> tuple[dict[int, float], list[np.ndarray] | None, int]:
    """Mean gradients over non-skipped utterances, summed in utterance-index order."""
    kept = sorted((r for r in results if not r.skipped), key=lambda r: r.index)
    n = len(kept)
    d_logv: dict[int, float] = {}
    am_sum = None
    for r in kept:
        for k, v in r.bundle.d_logv.items():
            d_logv[k] = d_logv.get(k, 0.0) + v
        if r.am_grads is not None:
            if am_sum is None:
                am_sum = [g.copy() for g in r.am_grads]
            else:
                for acc, g in zip(am_sum, r.am_grads):
                    acc += g
    if n:
        d_logv = {k: v / n for k, v in sorted(d_logv.items())}
        if am_sum is not None:
            am_sum = [g / n for g in am_sum]
    return d_logv, am_sum, n


def train_loop(graph: CompiledGraph, dataset: list[tuple[str, np.ndarray, int]],
               cfg: TrainConfig = TrainConfig(), am: AmModel | None = None,
               out_dir=None) -> TrainResult:
    """Train copies of ``graph`` (and ``am``) on ``(uid, matrix, label)`` items.

    Without an AM the matrices are linear-domain posteriors and only the
    transition weights can be trained.  Checkpoints and ``metrics.log`` go to
    ``out_dir`` when given.
    """
    if not dataset:
        raise TrainingError("empty dataset")
    if am is None and cfg.mode.trains_am:
        raise TrainingError(f"mode {cfg.mode.value} trains the acoustic model but none was given")
    for uid, _, label in dataset:
        if not 0 <= label < graph.num_commands:
            raise TrainingError(f"utterance {uid}: label {label} outside [0, {graph.num_commands})")
    graph = graph.copy()
    am = am.copy() if am is not None else None
    x_org = [log_posteriors(am, m)[0] for _, m, _ in dataset] if am is not None and cfg.mode.trains_am else None

    wfst_opt = SparseAdam(graph.logv, cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon_adam)
    am_opt = (Adam(am.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon_adam)
              if am is not None and cfg.mode.trains_am else None)
    rng = np.random.default_rng(cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.log").write_text("")
    result = TrainResult(graph, am)
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None

    def run(i: int) -> UttResult:
        _, matrix, label = dataset[i]
        return utterance_step(graph, am, matrix, label, x_org[i] if x_org else None, cfg, i)

    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(dataset))
            losses, correct, skipped = [], 0, 0
            for b in range(0, len(order), cfg.batch_size):
                batch = [int(i) for i in order[b:b + cfg.batch_size]]
                results = list(pool.map(run, batch)) if pool else [run(i) for i in batch]
                d_logv, am_grads, n = merge_results(results)
                if n == 0:
                    raise TrainingError(f"epoch {epoch}: every utterance in a minibatch lacks a path "
                                        f"to its reference ({[dataset[i][0] for i in batch]})")
                for r in sorted(results, key=lambda r: r.index):
                    if r.skipped:
                        skipped += 1
                        log.warning("skipping %s: no path to command %d", dataset[r.index][0], dataset[r.index][2])
                        continue
                    if not np.isfinite(r.loss):
                        raise TrainingError(f"non-finite loss on {dataset[r.index][0]}")
                    losses.append(r.loss)
                    correct += r.correct
                if cfg.mode.trains_wfst:
                    wfst_opt.step(d_logv)
                if am_opt is not None:
                    am_opt.step(am_grads)
            m = EpochMetrics(epoch, float(np.mean(losses)), correct / len(dataset), skipped,
                             int(round((time.perf_counter() - t0) * 1000)))
            result.metrics.append(m)
            log.info("epoch %d loss %.6f acc %.4f skipped %d", epoch, m.mean_loss, m.accuracy, skipped)
            if out is not None:
                _checkpoint(out, f"epoch-{epoch}", graph, am)
                with open(out / "metrics.log", "a") as f:
                    f.write(m.line())
    finally:
        if pool:
            pool.shutdown()
    if out is not None:
        _checkpoint(out, "final", graph, am)
    return result


def _checkpoint(out: Path, stem: str, graph: CompiledGraph, am: AmModel | None) -> None:
    (out / f"{stem}.vng").write_text(dump_graph(graph))
    if am is not None:
        (out / f"{stem}.am").write_bytes(dump_am(am))


def evaluate_accuracy(graph: CompiledGraph, dataset, am: AmModel | None = None,
                      acoustic_scale: float = 0.07) -> float:
    """Fraction of utterances whose best pooled command is the label."""
    hits = 0
    for _, matrix, label in dataset:
        logpost, _ = log_posteriors(am, matrix)
        _, scores = score_utterance(graph, PosteriorSequence(logpost, acoustic_scale))
        hits += int(np.argmax(scores.pooled)) == label
    return hits / len(dataset)


def am_kl_divergence(original: AmModel, adapted: AmModel, matrices) -> float:
    """Mean per-frame KL(original || adapted) over the given feature matrices."""
    total, frames = 0.0, 0
    for m in matrices:
        xo, _ = log_posteriors(original, m)
        x, _ = log_posteriors(adapted, m)
        penalty, _ = kl_regularizer(xo, x, 1.0)
        total += penalty
        frames += len(m)
    return total / frames
