"""``vnet``: command-line front end for the compile / train / decode workflow.

Every subcommand accepts ``--config FILE`` with flat ``key = value`` lines
(``#`` starts a comment).  Keys are flag names with dashes or underscores;
explicit flags override the file.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 failed check.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .am import read_am
from .compiler import CompileError, TransitionTable, compile_graph, export_graph, parse_ttable, read_graph, save_graph
from .data import DataError, load_dataset, read_manifest, read_matrix
from .decode import (DecodeConfig, Decoder, Hypothesis, format_hyp_line, is_correct, parse_hyp_file,
                     score_ser)
from .loss import Mode
from .oracle import OracleSizeError, gradient_check
from .synth import SynthConfig, synthesize, write_task
from .train import TrainConfig, TrainingError, log_posteriors, train_loop
from .trellis import PosteriorSequence, score_utterance
from .wfst import WeightDomain, WfstError, normalize_ilabels, read_wfst, remove_epsilons, write_wfst

log = logging.getLogger("vnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def read_config(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse ``argv`` with config-file values installed as defaults."""
    first = parser.parse_args(argv)
    if getattr(first, "config", None) is None:
        return first
    # keys may name either the flag (``lambda``) or its destination (``lam``)
    actions = {}
    for a in first._sub._actions:
        if a.dest in ("help", "config") or a.help == argparse.SUPPRESS:
            continue
        actions[a.dest] = a
        for opt in a.option_strings:
            actions[opt.lstrip("-").replace("-", "_")] = a
    defaults = {}
    for key, value in read_config(first.config).items():
        if key not in actions:
            raise UsageError(f"{first.config}: unknown key {key!r} for '{first.command}'")
        action = actions[key]
        key = action.dest
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[key] = value.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            try:
                defaults[key] = action.type(value)
            except (TypeError, ValueError) as e:
                raise UsageError(f"{first.config}: bad value for {key}: {e}") from None
        else:
            defaults[key] = value
        if action.choices is not None and defaults[key] not in action.choices:
            raise UsageError(f"{first.config}: {key} must be one of {sorted(action.choices)}")
    first._sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _log_config(args: argparse.Namespace) -> None:
    items = {k: v for k, v in sorted(vars(args).items()) if not k.startswith("_") and k != "func"}
    log.info("config: %s", " ".join(f"{k}={v}" for k, v in items.items()))


def _domain(name: str) -> WeightDomain:
    return WeightDomain[name.upper()]


# --- subcommands ----------------------------------------------------------


def cmd_compile(args) -> int:
    w = read_wfst(args.fst, _domain(args.domain))
    tt = parse_ttable(Path(args.ttable).read_text(), args.pdim)
    w, report = remove_epsilons(w)
    if report.surviving:
        log.warning("%d epsilon arcs survive (cyclic or olabel-carrying); training ignores them",
                    len(report.surviving))
    w = normalize_ilabels(w)
    g = compile_graph(w, tt, num_pdfs=args.pdim)
    save_graph(g, args.out)
    if args.template_out:
        write_wfst(w, args.template_out, _domain(args.domain))
    print(f"compiled S={g.num_states} P={g.num_pdfs} C={g.num_commands} arcs={g.num_arcs} "
          f"eps={len(g.eps_arcs)} removed_eps={report.removed}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = SynthConfig(seed=args.seed, num_commands=args.commands, num_pdfs=args.pdfs,
                      frames_per_phone=args.frames_per_phone, noise=args.noise,
                      num_train=args.train, num_eval=args.eval, noise_model=args.noise_model)
    paths = write_task(synthesize(cfg), args.out)
    for name, p in sorted(paths.items()):
        print(f"{name}\t{p}")
    return EXIT_OK


def _load_matrices(args, manifest, num_commands=None):
    data = load_dataset(read_manifest(manifest), num_commands)
    am = read_am(args.am) if args.am else None
    if am is None and not args.posteriors:
        raise UsageError("give --am MODEL for feature input or --posteriors for posterior input")
    if am is not None and args.posteriors:
        raise UsageError("--am and --posteriors are mutually exclusive")
    return data, am


def cmd_train(args) -> int:
    graph = read_graph(args.graph)
    data, am = _load_matrices(args, args.data, graph.num_commands)
    cfg = TrainConfig(lr=args.lr, beta1=args.beta1, beta2=args.beta2, epsilon_adam=args.adam_eps,
                      batch_size=args.batch, epochs=args.epochs, lam=args.lam, mode=Mode.parse(args.mode),
                      seed=args.seed, acoustic_scale=args.acwt, threads=args.threads)
    result = train_loop(graph, data, cfg, am=am, out_dir=args.out)
    for m in result.metrics:
        print(m.line(), end="")
    return EXIT_OK


def cmd_score(args) -> int:
    graph = read_graph(args.graph)
    if args.am:
        logpost, _ = log_posteriors(read_am(args.am), read_matrix(args.features))
    elif args.posteriors:
        logpost, _ = log_posteriors(None, read_matrix(args.posteriors))
    else:
        raise UsageError("give --posteriors MATRIX or --am MODEL --features MATRIX")
    _, scores = score_utterance(graph, PosteriorSequence(logpost, args.acwt))
    for u, s in enumerate(scores.pooled):
        print(f"{u}\t{float(s)!r}")
    return EXIT_OK


def cmd_decode(args) -> int:
    w = read_wfst(args.fst, _domain(args.domain))
    tt = parse_ttable(Path(args.ttable).read_text(), args.pdim) if args.pdim else _ttable_auto(args.ttable)
    data, am = _load_matrices(args, args.data)
    decoder = Decoder(w, tt)
    cfg = DecodeConfig(beam=args.beam, acoustic_scale=args.acwt)

    def run(item) -> Hypothesis:
        return decoder.decode(log_posteriors(am, item[1])[0], cfg)

    if args.threads > 1:
        with ThreadPoolExecutor(args.threads) as pool:
            hyps = list(pool.map(run, data))
    else:
        hyps = [run(item) for item in data]
    text = "".join(format_hyp_line(uid, h) for (uid, _, _), h in zip(data, hyps))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    ser = score_ser(hyps, [label for *_, label in data])
    log.info("SER against manifest labels: %.4f", ser)
    return EXIT_OK


def _ttable_auto(path) -> TransitionTable:
    text = Path(path).read_text()
    pdfs = [int(line.split()[1]) for line in text.splitlines() if line.strip()]
    return parse_ttable(text, max(pdfs) + 1 if pdfs else 1)


def cmd_eval(args) -> int:
    hyps = parse_hyp_file(Path(args.hyp).read_text())
    refs = read_manifest(args.ref)
    missing = [u.uid for u in refs if u.uid not in hyps]
    if missing:
        log.warning("%d reference utterances have no hypothesis; counted as errors", len(missing))
    seq = [hyps.get(u.uid, Hypothesis(no_path=True)) for u in refs]
    ser = score_ser(seq, [u.label for u in refs])
    errors = sum(not is_correct(h, u.label) for h, u in zip(seq, refs))
    print(f"SER {ser:.4f} ({errors}/{len(refs)})")
    return EXIT_OK


def cmd_export(args) -> int:
    g = read_graph(args.graph)
    template = read_wfst(args.template, _domain(args.domain))
    write_wfst(export_graph(g, template), args.out, _domain(args.domain))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    graph = read_graph(args.graph)
    data, am = _load_matrices(args, args.data, graph.num_commands)
    if not 0 <= args.utt < len(data):
        raise UsageError(f"--utt {args.utt} outside [0, {len(data)})")
    uid, matrix, label = data[args.utt]
    if args.frames:
        matrix = matrix[:args.frames]
    try:
        report = gradient_check(graph, matrix, label, am=am, lam=args.lam, scale=args.acwt, h=args.h,
                                corrupt=args._corrupt)
    except OracleSizeError as e:
        raise DataError(f"{e} (try --frames)") from None
    parts = [f"d_logv {report.d_logv:.3e}", f"d_logpost {report.d_logpost:.3e}"]
    if report.am is not None:
        parts.append(f"am {report.am:.3e}")
    if report.kinks:
        parts.append(f"({report.kinks} tied coordinates checked one-sided)")
    print(f"{uid}: " + " ".join(parts))
    status = "PASS" if report.passed(args.tol) else "FAIL"
    print(f"{status} max_rel_err {report.max_rel_err:.3e} (tol {args.tol:g})")
    return EXIT_OK if status == "PASS" else EXIT_CHECK


# --- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vnet", description="Differentiable WFST (ViterbiNet) toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def sub(name, func, help):
        p = subs.add_parser(name, help=help, description=help,
                            formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.add_argument("--config", help="flat 'key = value' file; flags override it")
        p.set_defaults(func=func, _sub=p)
        return p

    def am_or_post(p):
        p.add_argument("--am", help="acoustic model checkpoint; data are AM input features")
        p.add_argument("--posteriors", action="store_true", help="data are linear posteriors (no AM)")

    p = sub("compile", cmd_compile, "compile a WFST into a .vng graph")
    p.add_argument("--fst", required=True)
    p.add_argument("--ttable", required=True, help="'ilabel pdf' lines")
    p.add_argument("--pdim", type=int, required=True, help="number of pdfs P")
    p.add_argument("--out", required=True)
    p.add_argument("--domain", choices=["tropical", "probability"], default="tropical")
    p.add_argument("--template-out", help="write the preprocessed WFST (the export template)")

    p = sub("synth", cmd_synth, "generate the synthetic command-recognition task")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--commands", type=int, default=5)
    p.add_argument("--pdfs", type=int, default=8, help="phones including silence")
    p.add_argument("--frames-per-phone", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.6)
    p.add_argument("--noise-model", choices=("uniform", "confusable"), default="uniform")
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--eval", type=int, default=100)

    p = sub("train", cmd_train, "train transition weights and/or the acoustic model")
    p.add_argument("--graph", required=True)
    am_or_post(p)
    p.add_argument("--data", required=True, help="manifest: uid<TAB>path<TAB>label")
    p.add_argument("--mode", choices=[m.value for m in Mode], default="e2e")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--adam-eps", type=float, default=1e-8)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lambda", dest="lam", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--acwt", type=float, default=0.07, help="acoustic scale")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True, help="checkpoint directory")

    p = sub("score", cmd_score, "print pooled log scores per command for one utterance")
    p.add_argument("--graph", required=True)
    p.add_argument("--posteriors", help="linear posterior matrix")
    p.add_argument("--am")
    p.add_argument("--features", help="AM input matrix (with --am)")
    p.add_argument("--acwt", type=float, default=1.0)

    p = sub("decode", cmd_decode, "beam-search decode a manifest")
    p.add_argument("--fst", required=True)
    p.add_argument("--ttable", required=True)
    p.add_argument("--pdim", type=int, default=0, help="number of pdfs (0: infer from the table)")
    am_or_post(p)
    p.add_argument("--data", required=True)
    p.add_argument("--beam", type=float, default=7.0)
    p.add_argument("--acwt", type=float, default=0.07)
    p.add_argument("--domain", choices=["tropical", "probability"], default="tropical")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", help="hypothesis file (default stdout)")

    p = sub("eval", cmd_eval, "sentence error rate of a hypothesis file")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True, help="reference manifest")

    p = sub("export", cmd_export, "write trained weights back into a WFST")
    p.add_argument("--graph", required=True)
    p.add_argument("--template", required=True, help="the WFST the graph was compiled from")
    p.add_argument("--out", required=True)
    p.add_argument("--domain", choices=["tropical", "probability"], default="tropical")

    p = sub("gradcheck", cmd_gradcheck, "check routed gradients against finite differences")
    p.add_argument("--graph", required=True)
    am_or_post(p)
    p.add_argument("--data", required=True)
    p.add_argument("--utt", type=int, default=0, help="manifest row to check")
    p.add_argument("--frames", type=int, default=0, help="truncate to this many frames (0: all)")
    p.add_argument("--lambda", dest="lam", type=float, default=0.01)
    p.add_argument("--acwt", type=float, default=0.07)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    # negative-control hook for tests: offsets the analytic gradient
    p.add_argument("--corrupt", dest="_corrupt", type=float, default=0.0, help=argparse.SUPPRESS)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _log_config(args)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"vnet {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (WfstError, CompileError, DataError, TrainingError, ValueError, OSError) as e:
        print(f"vnet {args.command}: error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
