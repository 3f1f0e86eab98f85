#!/usr/bin/env python3

"""
Path Reasoner command line

Generates synthetic corpora, trains the path model, predicts, evaluates, runs the
objective ablation and shows the ranked reasoning paths behind an answer.

Usage:
    python -m path_reasoner generate --out data/synth2h --seed 0
    python -m path_reasoner train --kb data/synth2h/kb.tsv --data data/synth2h/train.jsonl --checkpoint model.ckpt
"""

from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple
import argparse
import logging
import sys

from path_reasoner.ablation import ablate, ablate_features
from path_reasoner.checkpoint import load_checkpoint, save_checkpoint
from path_reasoner.config import build, load_config_file, log_settings, merge_sources
from path_reasoner.dataset import (
    QAInstance,
    Vocabulary,
    expand_multi_answer,
    load_dataset,
    load_kb,
    load_queries,
)
from path_reasoner.errors import PathReasonerError
from path_reasoner.evaluation import evaluate
from path_reasoner.inference import PredictOptions, predict, prediction_record, relation_sequence_scores
from path_reasoner.kb_store import KnowledgeBase
from path_reasoner.path_model import ModelParams
from path_reasoner.synthetic import SyntheticSpec, generate_synthetic, write_corpus
from path_reasoner.training import TrainingConfig, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3

OBJECTIVE_CHOICES = ["gt", "random", "product", "marginal"]


class Colors:
    """ANSI color codes for terminal output."""
    RED = '\033[0;31m'
    GREEN = '\033[0;32m'
    YELLOW = '\033[1;33m'
    BLUE = '\033[0;34m'
    NC = '\033[0m'  # No Color

    @classmethod
    def disable(cls):
        cls.RED = cls.GREEN = cls.YELLOW = cls.BLUE = cls.NC = ''


def say(level: str, message: str):
    colors = {
        'INFO': Colors.BLUE,
        'SUCCESS': Colors.GREEN,
        'WARNING': Colors.YELLOW,
        'ERROR': Colors.RED,
    }
    stream = sys.stderr if level == 'ERROR' else sys.stdout
    print(f"{colors.get(level, '')}[{level}]{Colors.NC} {message}", file=stream)


# -- loading helpers ---------------------------------------------------------

def _settings(args: argparse.Namespace) -> Dict[str, Any]:
    """Config file values overridden by every flag the user actually passed."""
    file_values = load_config_file(args.config) if getattr(args, "config", None) else {}
    flags = {key: value for key, value in vars(args).items() if key not in ("command", "config", "func")}
    return merge_sources(file_values, flags)


def _load_model(checkpoint: str, kb: KnowledgeBase) -> Tuple[ModelParams, Vocabulary]:
    ckpt = load_checkpoint(checkpoint)
    ckpt.check_compatible(kb, vocabulary_size=len(ckpt.vocabulary))
    return ckpt.params, Vocabulary.from_list(ckpt.vocabulary)


def _load_training_data(args: argparse.Namespace, kb: KnowledgeBase) -> Tuple[Vocabulary, List[QAInstance], List[QAInstance]]:
    vocab = Vocabulary()
    train_set = expand_multi_answer(load_dataset(args.data, kb, vocab))
    vocab.frozen = True
    dev_set = load_dataset(args.dev, kb, vocab) if args.dev else []
    logger.info(f"{len(train_set)} training instances, {len(dev_set)} dev instances, {len(vocab)} words")
    return vocab, train_set, dev_set


def _write_or_print(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n", encoding="utf-8")
        say('SUCCESS', f"Wrote {out}")
    else:
        print(text)


# -- commands ----------------------------------------------------------------

def cmd_generate(args: argparse.Namespace) -> int:
    spec = build(SyntheticSpec, _settings(args))
    log_settings("Synthetic corpus", spec)
    corpus = generate_synthetic(spec)
    out = write_corpus(corpus, args.out)
    say('SUCCESS', f"Generated {spec.total_questions} questions and {corpus.kb.fact_count} facts in {out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = build(TrainingConfig, _settings(args))
    log_settings("Training configuration", config)
    kb = load_kb(args.kb)
    vocab, train_set, dev_set = _load_training_data(args, kb)
    result = train(train_set, kb, vocab, config, dev=dev_set, progress=sys.stderr.isatty())
    save_checkpoint(args.checkpoint, result.params, config.seed, vocab.words(), kb)
    say('SUCCESS', f"Saved checkpoint to {args.checkpoint}")
    if args.out:
        _write_or_print(result.report.model_dump_json(indent=2), args.out)
    return EXIT_OK


def _predict_options(args: argparse.Namespace) -> PredictOptions:
    return build(PredictOptions, _settings(args))


def cmd_predict(args: argparse.Namespace) -> int:
    options = _predict_options(args)
    kb = load_kb(args.kb)
    params, vocab = _load_model(args.checkpoint, kb)
    if args.question:
        if not args.topic:
            say('ERROR', "--question needs --topic")
            return EXIT_USAGE
        queries = [(args.question, args.topic)]
    else:
        queries = [(q.question, q.topic_entity) for q in load_queries(args.data)]
    lines = []
    for text, topic in queries:
        e0 = kb.entity_id(topic)
        prediction = predict(params, kb, vocab.encode(text), e0, options, vocab)
        lines.append(prediction_record(kb, text, e0, prediction).model_dump_json())
    _write_or_print("\n".join(lines), args.out)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    options = _predict_options(args)
    kb = load_kb(args.kb)
    params, vocab = _load_model(args.checkpoint, kb)
    test_set = load_dataset(args.data, kb, vocab)
    report = evaluate(params, kb, test_set, options, vocab, progress=sys.stderr.isatty())
    print(report.to_table())
    if args.out:
        _write_or_print(report.model_dump_json(indent=2), args.out)
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    settings = _settings(args)
    config = build(TrainingConfig, settings)
    options = build(PredictOptions, settings)
    log_settings("Ablation base configuration", config)
    kb = load_kb(args.kb)
    vocab, train_set, dev_set = _load_training_data(args, kb)
    test_set = load_dataset(args.test, kb, vocab)
    harness = ablate_features if args.features else ablate
    table = harness(train_set, test_set, kb, vocab, config, options, dev_set=dev_set or None)
    print(table.to_table())
    if args.out:
        _write_or_print(table.to_json(), args.out)
    return EXIT_OK


def cmd_inspect_paths(args: argparse.Namespace) -> int:
    options = _predict_options(args)
    kb = load_kb(args.kb)
    params, vocab = _load_model(args.checkpoint, kb)
    e0 = kb.entity_id(args.topic)
    prediction = predict(params, kb, vocab.encode(args.question), e0, options, vocab)
    if not prediction.has_answer:
        say('WARNING', f"No reasoning path leaves {args.topic}")
        return EXIT_OK
    say('INFO', f"Answer: {kb.entity_name(prediction.answer)}")
    for relation_ids, prob in relation_sequence_scores(prediction.ranked_paths)[:args.top]:
        relations = " -> ".join(kb.relation_name(r) for r in relation_ids)
        print(f"{prob:.2f}  {relations}")
    return EXIT_OK


# -- argument parsing --------------------------------------------------------

def _common_parents() -> Dict[str, argparse.ArgumentParser]:
    config = argparse.ArgumentParser(add_help=False)
    config.add_argument("--config", help="key = value config file (flags override it)")
    config.add_argument("--seed", type=int, help="seed for every random choice")

    kb = argparse.ArgumentParser(add_help=False)
    kb.add_argument("--kb", required=True, help="KB fact file (head<TAB>relation<TAB>tail)")

    search = argparse.ArgumentParser(add_help=False)
    search.add_argument("--beam-width", dest="beam_width", type=int)
    search.add_argument("--max-hops", dest="max_hops", type=int)
    search.add_argument("--use-pmi", dest="use_pmi", action=argparse.BooleanOptionalAction, default=None,
                        help="rescore answers by p(y|q) / p(y|topic entity)")
    search.add_argument("--marginal-prediction", dest="marginal_prediction",
                        action=argparse.BooleanOptionalAction, default=None,
                        help="score answers by the path marginal (default) or the best single path")
    search.add_argument("--tau", type=float, help="answers within this factor of the best form the predicted set")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--data", required=True, help="training JSONL file")
    training.add_argument("--dev", help="dev JSONL file for per-epoch monitoring")
    training.add_argument("--objective", choices=OBJECTIVE_CHOICES)
    training.add_argument("--k1-base", dest="k1_base", type=int)
    training.add_argument("--k2-fraction", dest="k2_fraction", type=float)
    training.add_argument("--epochs", type=int)
    training.add_argument("--learning-rate", dest="learning_rate", type=float)
    training.add_argument("--batch-size", dest="batch_size", type=int)
    training.add_argument("--warm-start-ground-truth", dest="warm_start_ground_truth",
                          action=argparse.BooleanOptionalAction, default=None)
    training.add_argument("--inference-in-training", dest="inference_in_training",
                          action=argparse.BooleanOptionalAction, default=None)
    training.add_argument("--include-annotated-paths", dest="include_annotated_paths",
                          action=argparse.BooleanOptionalAction, default=None)
    training.add_argument("--entity-in-state", dest="entity_in_state",
                          action=argparse.BooleanOptionalAction, default=None)
    return {"config": config, "kb": kb, "search": search, "training": training}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="path_reasoner",
        description="Multi-hop question answering over a knowledge base with latent reasoning paths",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Synthetic 2-hop corpus, then train and evaluate
  python -m path_reasoner generate --out data/synth2h --seed 0
  python -m path_reasoner train --kb data/synth2h/kb.tsv --data data/synth2h/train.jsonl \\
      --dev data/synth2h/dev.jsonl --checkpoint model.ckpt --objective marginal
  python -m path_reasoner eval --kb data/synth2h/kb.tsv --data data/synth2h/test.jsonl --checkpoint model.ckpt

  # Paths behind one answer
  python -m path_reasoner inspect-paths --kb data/synth2h/kb.tsv --checkpoint model.ckpt \\
      --question "what is the seat of the founder of ent_0007" --topic ent_0007
        """,
    )
    parser.add_argument("--debug", action="store_true", help="debug logging")
    parser.add_argument("--quiet", action="store_true", help="warnings and errors only")
    parents = _common_parents()
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("generate", parents=[parents["config"]], help="write a synthetic KB and QA splits")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-entities", dest="n_entities", type=int)
    p.add_argument("--n-relations", dest="n_relations", type=int)
    p.add_argument("--hop-mix", dest="hop_mix", help='e.g. "2:0.5,3:0.5"')
    p.add_argument("--multipath-rate", dest="multipath_rate", type=float)
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-dev", dest="n_dev", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[parents["config"], parents["kb"], parents["training"], parents["search"]],
                       help="train the path model")
    p.add_argument("--checkpoint", required=True, help="checkpoint file to write")
    p.add_argument("--out", help="training report JSON")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[parents["config"], parents["kb"], parents["search"]],
                       help="answer questions, one JSON object per line")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="JSONL queries {question, topic_entity}")
    p.add_argument("--question")
    p.add_argument("--topic", help="topic entity name for --question")
    p.add_argument("--out", help="predictions JSONL (default stdout)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", parents=[parents["config"], parents["kb"], parents["search"]],
                       help="F1 and set accuracy on a labelled set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="labelled JSONL file")
    p.add_argument("--out", help="metrics report JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[parents["config"], parents["kb"], parents["training"], parents["search"]],
                       help="train and compare the objective variants")
    p.add_argument("--test", required=True, help="test JSONL file")
    p.add_argument("--features", action="store_true",
                   help="remove one model feature at a time instead of varying the objective")
    p.add_argument("--out", help="comparison table JSON")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect-paths", parents=[parents["config"], parents["kb"], parents["search"]],
                       help="ranked reasoning paths with probabilities for one question")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--question", required=True)
    p.add_argument("--topic", required=True, help="topic entity name")
    p.add_argument("--top", type=int, default=10, help="number of relation sequences to show")
    p.set_defaults(func=cmd_inspect_paths)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    if args.command == "predict" and not (args.data or args.question):
        parser.print_usage(sys.stderr)
        say('ERROR', "predict needs --data or --question")
        return EXIT_USAGE

    level = logging.DEBUG if args.debug else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level)
    logging.getLogger().setLevel(level)
    if not sys.stdout.isatty():
        Colors.disable()

    try:
        return args.func(args)
    except FileNotFoundError as e:
        logger.error(str(e))
        say('ERROR', str(e))
        return EXIT_MISSING_FILE
    except PathReasonerError as e:
        logger.error(f"{type(e).__name__}: {e}")
        say('ERROR', str(e))
        return e.exit_code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
