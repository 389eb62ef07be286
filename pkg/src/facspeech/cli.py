"""Command-line front end.

Subcommands mirror the pipeline stages: corpus build, train source,
train dnn, tensor build, decode, score, sweep, verify.  Exit codes:
0 success, 1 verification/decode failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import acoustic, decoder, dnn, harness, jointlik, verify
from .errors import FacspeechError


def _load_or_default_config(path) -> harness.ExperimentConfig:
    if path:
        return harness.load_config(path)
    return harness.ExperimentConfig()


def cmd_corpus_build(args) -> int:
    cfg = _load_or_default_config(args.config)
    corpus = harness.build_corpus(cfg, args.out)
    print(f"corpus: {len(corpus.train_ids)} train / {len(corpus.test_ids)} test "
          f"utterances, {len(corpus.test_mixtures)} test mixtures -> {args.out}")
    return 0


def cmd_train_source(args) -> int:
    corpus = harness.load_corpus(args.corpus)
    models = harness.train_source_models(corpus, n_components=args.components,
                                         seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    acoustic.save_model(os.path.join(args.out, "base.gmm"), models.base)
    for spk, model in sorted(models.adapted.items()):
        acoustic.save_model(os.path.join(args.out, f"{spk}.gmm"), model)
    print(f"models: base + {len(models.adapted)} speaker-adapted -> {args.out}")
    return 0


def cmd_train_dnn(args) -> int:
    corpus = harness.load_corpus(args.corpus)
    models = harness.train_source_models(corpus, seed=args.seed)
    variant = harness.DnnVariant(
        multi_gain=not args.gain_unaware,
        gain_feature=not args.gain_unaware,
        marginal=args.marginal)
    net = harness.train_dnn(corpus, models, variant, seed=args.seed)
    dnn.save_net(args.out, net)
    if args.log:
        dnn.write_training_log(args.log, net)
    print(f"network ({net.state}, joint {net.joint_shape}) -> {args.out}")
    return 0


def cmd_tensor_build(args) -> int:
    corpus = harness.load_corpus(args.corpus)
    session = harness.ExperimentSession(corpus.cfg, args.corpus, corpus=corpus)
    mix = next((m for m in corpus.test_mixtures if m.mix_id == args.mix), None)
    if mix is None:
        print(f"unknown mixture id {args.mix!r}", file=sys.stderr)
        return 2
    tensor = session.build_tensor(mix, args.estimator)
    jointlik.save_tensor(args.out, tensor)
    print(f"tensor {tensor.shape} [{tensor.scale}] ({args.estimator}) -> {args.out}")
    return 0


def cmd_decode(args) -> int:
    corpus = harness.load_corpus(args.corpus)
    session = harness.ExperimentSession(corpus.cfg, args.corpus, corpus=corpus)
    if args.tensor:
        tensor = jointlik.load_tensor(args.tensor)
        mix = next((m for m in corpus.test_mixtures if m.mix_id == args.mix), None)
        if mix is None:
            print(f"unknown mixture id {args.mix!r}", file=sys.stderr)
            return 2
        gain = session.mixture_gain(mix)
        model_a, model_b = session._pair_models(mix, gain)
        result = decoder.joint_decode(tensor, session.target_net,
                                      session.masker_net, (model_a, model_b),
                                      corpus.cfg.beam or None)
        print(f"{mix.mix_id}\ttarget: {' '.join(result.words_a)}\t"
              f"masker: {' '.join(result.words_b)}\tscore {result.log_score:.3f}")
        return 0
    rows, items = session.run_estimator(estimator=args.estimator)
    harness.write_results_csv(args.out, items)
    if args.report:
        harness.write_report_csv(args.report, rows)
    print(f"decoded {len(items)} mixtures ({args.estimator}) -> {args.out}")
    return 0


def cmd_score(args) -> int:
    rows = harness.read_report_csv(args.results)
    for r in rows:
        tmr = "all" if r.tmr_db is None else f"{r.tmr_db:g} dB"
        print(f"{r.estimator}\t{r.condition}\t{tmr}\t"
              f"combined {r.combined_acc:.2f}%\t(n={r.n_items})")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_or_default_config(args.config)
    rows, _ = harness.sweep(cfg, args.axis, args.workdir,
                            csv_path=args.out, plot_path=args.plot)
    print(f"sweep over {args.axis}: {len(rows)} rows -> {args.out}")
    return 0


def cmd_verify(args) -> int:
    summary = verify.verify_suite(level=args.level)
    print(summary.report())
    return 0 if summary.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="facspeech",
        description="factorial-HMM two-talker decoding toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p_corpus = sub.add_parser("corpus", help="corpus stages")
    corpus_sub = p_corpus.add_subparsers(dest="subcommand", required=True)
    p = corpus_sub.add_parser("build", help="synthesize the corpus")
    p.add_argument("--config", default=None, help="JSON experiment config")
    p.add_argument("--out", required=True, help="corpus output directory")
    p.set_defaults(func=cmd_corpus_build)

    p_train = sub.add_parser("train", help="training stages")
    train_sub = p_train.add_subparsers(dest="subcommand", required=True)
    p = train_sub.add_parser("source", help="train GMM-HMM source models")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="model output directory")
    p.add_argument("--components", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_source)
    p = train_sub.add_parser("dnn", help="train the joint-posterior network")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="network file")
    p.add_argument("--log", default=None, help="training-log CSV")
    p.add_argument("--gain-unaware", action="store_true")
    p.add_argument("--marginal", choices=["a", "b"], default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_dnn)

    p_tensor = sub.add_parser("tensor", help="joint-state tensor stages")
    tensor_sub = p_tensor.add_subparsers(dest="subcommand", required=True)
    p = tensor_sub.add_parser("build", help="build one mixture's tensor")
    p.add_argument("--corpus", required=True)
    p.add_argument("--mix", required=True, help="mixture id")
    p.add_argument("--estimator", default="vts",
                   choices=list(harness.ESTIMATORS))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tensor_build)

    p = sub.add_parser("decode", help="decode mixtures")
    p.add_argument("--corpus", required=True)
    p.add_argument("--estimator", default="vts",
                   choices=list(harness.ESTIMATORS))
    p.add_argument("--tensor", default=None,
                   help="decode a single prebuilt tensor file")
    p.add_argument("--mix", default=None, help="mixture id for --tensor")
    p.add_argument("--out", default="results.csv")
    p.add_argument("--report", default=None, help="aggregate report CSV")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("score", help="print an aggregate report CSV")
    p.add_argument("--results", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("sweep", help="cross-product experiment sweep")
    p.add_argument("--config", default=None)
    p.add_argument("--axis", required=True,
                   choices=["tmr", "estimator", "gain_mode"])
    p.add_argument("--workdir", required=True)
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--plot", default=None, help="optional SVG plot path")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="run the oracle verification suite")
    p.add_argument("--level", default="fast", choices=["fast", "full"])
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FacspeechError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
