import numpy as np
import pytest

from viterbinet.am import dump_am
from viterbinet.compiler import compile_graph, dump_graph
from viterbinet.loss import Mode
from viterbinet.synth import SynthConfig, synthesize
from viterbinet.train import (TrainConfig, TrainingError, UttResult, evaluate_accuracy,
                              merge_results, train_loop)
from viterbinet.loss import GradientBundle


@pytest.fixture(scope="module")
def small_task():
    task = synthesize(SynthConfig(num_train=32, num_eval=16))
    return task, compile_graph(task.grammar, task.ttable)


def test_loss_decreases_and_fits_easy_task():
    task = synthesize(SynthConfig(noise=0.3, num_train=100, num_eval=0))
    g = compile_graph(task.grammar, task.ttable)
    r = train_loop(g, task.features("train"), TrainConfig(lr=1e-3), am=task.seed_am())
    assert r.metrics[0].mean_loss > r.metrics[-1].mean_loss
    assert r.metrics[-1].accuracy >= 0.99
    assert evaluate_accuracy(r.graph, task.features("train"), r.am) >= 0.99


@pytest.mark.parametrize("mode", list(Mode))
def test_zero_lr_is_bit_identical(small_task, mode):
    task, g = small_task
    am = task.seed_am()
    r = train_loop(g, task.features("train"), TrainConfig(lr=0.0, epochs=3, mode=mode), am=am)
    assert dump_graph(r.graph) == dump_graph(g)
    assert dump_am(r.am) == dump_am(am)


def test_mode_masking(small_task):
    task, g = small_task
    am = task.seed_am()
    data = task.features("train")
    r = train_loop(g, data, TrainConfig(lr=1e-2, epochs=2, mode=Mode.AM_ONLY), am=am)
    assert dump_graph(r.graph) == dump_graph(g) and dump_am(r.am) != dump_am(am)
    r = train_loop(g, data, TrainConfig(lr=1e-2, epochs=2, mode=Mode.WFST_ONLY), am=am)
    assert dump_am(r.am) == dump_am(am) and dump_graph(r.graph) != dump_graph(g)


def test_inputs_are_not_mutated(small_task):
    task, g = small_task
    am = task.seed_am()
    before_g, before_am = dump_graph(g), dump_am(am)
    train_loop(g, task.features("train"), TrainConfig(lr=1e-2, epochs=1), am=am)
    assert dump_graph(g) == before_g and dump_am(am) == before_am


def test_frozen_posteriors_train_the_graph(small_task):
    task, g = small_task
    r = train_loop(g, task.train, TrainConfig(lr=1e-2, epochs=3, mode=Mode.WFST_ONLY))
    assert r.am is None
    assert r.metrics[0].mean_loss > r.metrics[-1].mean_loss


def test_checkpoints_are_reproducible(small_task, tmp_path):
    task, g = small_task
    cfg = TrainConfig(lr=1e-2, epochs=2, seed=3)
    for run in ("a", "b"):
        train_loop(g, task.features("train"), cfg, am=task.seed_am(), out_dir=tmp_path / run)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["epoch-1.am", "epoch-1.vng", "epoch-2.am", "epoch-2.vng",
                     "final.am", "final.vng", "metrics.log"]
    for name in names:
        a, b = (tmp_path / "a" / name).read_bytes(), (tmp_path / "b" / name).read_bytes()
        if name == "metrics.log":
            strip = lambda text: [line.split()[:3] for line in text.decode().splitlines()]
            assert strip(a) == strip(b) and len(strip(a)) == 2
        else:
            assert a == b, name


def test_threads_match_single_thread(small_task):
    task, g = small_task
    data = task.features("train")
    one = train_loop(g, data, TrainConfig(lr=1e-2, epochs=2), am=task.seed_am())
    four = train_loop(g, data, TrainConfig(lr=1e-2, epochs=2, threads=4), am=task.seed_am())
    for a, b in zip(one.metrics, four.metrics):
        assert abs(a.mean_loss - b.mean_loss) <= 1e-12 and a.accuracy == b.accuracy
    assert dump_graph(one.graph) == dump_graph(four.graph)


def test_merge_is_order_independent():
    rng = np.random.default_rng(70)
    results = [UttResult(i, bundle=GradientBundle({int(k): float(rng.normal()) for k in rng.integers(0, 5, 3)},
                                                    None, None, 0.0))
               for i in range(8)]
    a = merge_results(results)[0]
    b = merge_results(results[::-1])[0]
    assert a == b


def test_error_cases(small_task):
    task, g = small_task
    with pytest.raises(TrainingError, match="empty"):
        train_loop(g, [], TrainConfig())
    with pytest.raises(TrainingError, match="acoustic model"):
        train_loop(g, task.train, TrainConfig(mode=Mode.E2E))
    with pytest.raises(TrainingError, match="label"):
        train_loop(g, [("x", task.train[0][1], 9)], TrainConfig(mode=Mode.WFST_ONLY))
    with pytest.raises(ValueError):
        TrainConfig(lam=-1.0)


def test_all_skipped_batch_aborts():
    from viterbinet.wfst import parse_wfst
    from viterbinet.compiler import TransitionTable
    # command 2 is unreachable in a one-frame utterance
    w = parse_wfst("0 1 1 1\n0 2 1 0\n2 1 1 2\n1\n")
    g = compile_graph(w, TransitionTable.identity(1))
    data = [("u", np.ones((1, 1)), 1)]
    with pytest.raises(TrainingError, match="lacks a path"):
        train_loop(g, data, TrainConfig(mode=Mode.WFST_ONLY, epochs=1))
