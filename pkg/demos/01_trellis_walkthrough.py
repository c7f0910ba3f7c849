"""
Scoring one utterance with the max-plus trellis
===============================================

A tiny two-command grammar is compiled into sparse arrays, scored against a
posterior sequence, and checked against brute-force path enumeration.  The
last step spreads the loss gradient back along each command's winning path.
"""

import numpy as np

from viterbinet import PosteriorSequence, TransitionTable, compile_graph, parse_wfst, score_utterance
from viterbinet.loss import classification_loss, route_gradients
from viterbinet.oracle import enumerate_paths, oracle_output_scores
from viterbinet.trellis import map_emissions

# %%
# The grammar: silence (pdf 0), then either "a b" (command 0) or "a c"
# (command 1), then silence.  Weights are log scores in the tropical text
# format, so they are written as costs (negated).
text = """\
0 0 1 0 0.7
0 1 1 0 0.7
1 1 2 0 0.7
1 2 2 0 0.7
2 2 3 0 0.7
2 4 3 1 0.7
1 3 2 0 0.7
3 3 4 0 0.7
3 4 4 2 0.7
4 4 1 0 0.7
4 0
"""
w = parse_wfst(text)
g = compile_graph(w, TransitionTable.identity(4))
print(f"{g.num_states} states, {g.num_arcs} arcs, {g.num_pdfs} pdfs, {g.num_commands} commands")
print("emitting pdf per state:", g.emit_pdf.tolist())

# %%
# Posteriors that lean towards "a b": silence, a, a, b, b, silence.
probs = np.full((6, 4), 0.05)
for t, p in enumerate([0, 1, 1, 2, 2, 0]):
    probs[t, p] = 0.85
probs /= probs.sum(axis=1, keepdims=True)
post = PosteriorSequence.from_probs(probs)

tr, scores = score_utterance(g, post)
print("best path score:", round(float(tr.best_score(g)), 4))
print("pooled command scores:", np.round(scores.pooled, 4))
print("winning frame per command:", scores.win_t.tolist())

# %%
# Exhaustive enumeration gives the same pooled scores.
xs = map_emissions(g, post)
paths = enumerate_paths(g, xs)
_, pooled = oracle_output_scores(g, xs, paths)
print(f"{len(paths)} complete paths; max deviation from brute force:",
      float(np.max(np.abs(pooled - scores.pooled))))

# %%
# Softmax cross-entropy for the reference command 0.  Its gradient lands
# only on arcs of the two winning paths; arcs the paths share cancel out.
loss, dl = classification_loss(scores.pooled, 0)
bundle = route_gradients(g, tr, scores, dl)
print("loss:", round(loss, 4), " dl:", np.round(dl, 4))
for k, v in bundle.d_logv.items():
    print(f"  arc {k} ({g.src[k]} -> {g.dst[k]}): d_logv {v:+.4f}")
