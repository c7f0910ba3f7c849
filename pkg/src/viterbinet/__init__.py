"""Differentiable WFST command recognition: compile a transducer into sparse
trainable matrices, run max-semiring forward/backward over it, and adapt the
graph weights jointly with a feed-forward acoustic model."""

from .am import AmConfig, AmModel, am_backward, am_forward, splice
from .compiler import (NEG_INF, CompiledGraph, TransitionTable, compile_graph, export_graph,
                       load_graph, dump_graph)
from .decode import DecodeConfig, Decoder, Hypothesis, score_ser, viterbi_decode
from .loss import (GradientBundle, Mode, NoPathError, classification_loss, kl_regularizer,
                   route_gradients)
from .train import TrainConfig, train_loop
from .trellis import (OutputScores, PosteriorSequence, Trellis, backward, forward,
                      map_emissions, output_scores, run_trellis, score_utterance)
from .wfst import (Arc, WeightDomain, Wfst, WfstError, normalize_ilabels, parse_wfst,
                   remove_epsilons, serialize_wfst)

__version__ = "0.1.0"
