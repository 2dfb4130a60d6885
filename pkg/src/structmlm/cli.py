"""Command-line entry point for the full workflow:
extract -> stats -> build-corpus / synth-corpus -> pretrain (x2) -> eval ->
analyze -> compare.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.
Config precedence: command-line flag > config file > built-in default; the
effective configuration is echoed into every output directory. All file
writers are atomic (write-to-temp, rename), so a failing command never
leaves partial outputs. STRUCTMLM_THREADS controls per-document
parallelism during extraction.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Dict, Optional, Sequence

from . import analysis, corpus, docfile, latex, plots, training
from .encoder import ModelConfig
from .errors import (
    CorruptFileError,
    DivergenceError,
    EmptyCorpusError,
    EmptyHeldoutError,
    FormatError,
    MismatchedReportsError,
    NoMaskedPositionsError,
    NoValidPairsError,
    RangeOutOfBoundsError,
    StructMlmError,
    VersionMismatchError,
)
from .training import TrainConfig

_DATA_ERRORS = (
    FormatError,
    EmptyCorpusError,
    EmptyHeldoutError,
    MismatchedReportsError,
    NoValidPairsError,
    NoMaskedPositionsError,
    RangeOutOfBoundsError,
    CorruptFileError,
    VersionMismatchError,
    FileNotFoundError,
    NotADirectoryError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def _n_jobs() -> int:
    try:
        return max(1, int(os.environ.get("STRUCTMLM_THREADS", "1")))
    except ValueError:
        return 1


def _echo_config(out_dir: Path, values: Dict[str, object]) -> None:
    lines = [f"{k} = {v}" for k, v in values.items()]
    docfile.atomic_write_text(out_dir / "effective-config.txt", "\n".join(lines) + "\n")


def _read_config_file(path: Path) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for i, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}: expected 'key = value'", i)
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _coerce(value: str, kind: type):
    if kind is bool:
        if value.lower() in ("1", "true", "on", "yes"):
            return True
        if value.lower() in ("0", "false", "off", "no"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return kind(value)


def _merge_config(cls, file_values: Dict[str, str], cli_values: Dict[str, object]):
    kwargs = {}
    names = {f.name: f.type for f in fields(cls)}
    types = {"int": int, "float": float, "bool": bool, "str": str}
    for name in names:
        kind = types.get(names[name], str) if isinstance(names[name], str) else names[name]
        if cli_values.get(name) is not None:
            kwargs[name] = cli_values[name]
        elif name in file_values:
            kwargs[name] = _coerce(file_values[name], kind)
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------


def _extract_one(args):
    path_str, fmt = args
    path = Path(path_str)
    source = path.read_text(encoding="utf-8")
    stripped = latex.strip_noise(source)
    tree = latex.extract_tree(stripped.text, path.stem)
    return path.stem, docfile.encode_document(tree, fmt), stripped.warnings


def _cmd_extract(args) -> int:
    in_dir = Path(args.in_dir)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tex_files = sorted(in_dir.glob("*.tex"))
    if not tex_files:
        raise EmptyCorpusError(f"no .tex files in {in_dir}")
    suffix = ".txt" if args.format == docfile.TEXT else ".json"
    jobs = [(str(p), args.format) for p in tex_files]
    skipped = 0
    results = []
    n_jobs = _n_jobs()
    if n_jobs > 1 and len(jobs) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=n_jobs) as pool:
            for job, outcome in zip(jobs, pool.map(_try_extract, jobs)):
                results.append((job[0], outcome))
    else:
        results = [(job[0], _try_extract(job)) for job in jobs]
    written = 0
    for src, outcome in results:
        if isinstance(outcome, str):
            print(f"warning: {outcome}", file=sys.stderr)
            skipped += 1
            continue
        doc_id, encoded, warnings = outcome
        for w in warnings:
            print(f"warning: {doc_id}: {w}", file=sys.stderr)
        docfile.atomic_write_bytes(out_dir / (doc_id + suffix), encoded)
        written += 1
    _echo_config(out_dir, {"format": args.format, "source": str(in_dir)})
    print(f"extracted {written} documents to {out_dir} ({skipped} skipped)")
    return 0


def _try_extract(job):
    try:
        return _extract_one(job)
    except StructMlmError as exc:
        return f"{Path(job[0]).name}: {exc}"


def _cmd_stats(args) -> int:
    trees = docfile.read_tree_dir(args.in_dir)
    stats = latex.corpus_stats(trees)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv = docfile.stats_csv(stats)
    docfile.atomic_write_text(out_dir / "stats.csv", csv)
    per_doc = {
        "tokens_per_doc": [float(t.word_count()) for t in trees],
        "headers_per_doc": [float(t.header_count()) for t in trees],
        "tokens_per_header": [
            t.word_count() / t.header_count() for t in trees if t.header_count() > 0
        ],
    }
    plots.save_metric_histograms(out_dir / "stats.png", per_doc)
    sys.stdout.write(csv)
    print(f"stats for {len(trees)} documents written to {out_dir}")
    return 0


def _cmd_build_corpus(args) -> int:
    trees = docfile.read_tree_dir(args.trees)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.vocab:
        # held-out and annotated splits must share the training vocabulary,
        # otherwise their token ids mean different words to the model
        vocab = corpus.Vocabulary.load(args.vocab)
    else:
        vocab = corpus.build_vocab(trees, args.vocab_size)
    vocab.save(out_dir / "vocab.txt")
    docs = [corpus.tokenize_tree(t, vocab) for t in trees]
    kept = corpus.filter_by_length(docs, args.min_tokens, args.max_tokens)
    corpus.write_token_shards(kept, out_dir, shard_size=args.shard_size)
    _echo_config(
        out_dir,
        {
            "vocab": args.vocab or "(built here)",
            "vocab_size": args.vocab_size,
            "min_tokens": args.min_tokens,
            "max_tokens": args.max_tokens,
            "shard_size": args.shard_size,
        },
    )
    print(f"tokenized {len(docs)} documents, kept {len(kept)} after length filter; vocab {vocab.size}")
    return 0


def _cmd_synth_corpus(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    synth = corpus.generate_synthetic_corpus(
        n_docs=args.n_docs,
        n_topics=args.n_topics,
        words_per_doc=args.words_per_doc,
        correlation=args.correlation,
        seed=args.seed,
        keywords_per_topic=args.keywords_per_topic,
        background_words=args.background_words,
        section_len=args.section_len,
        doc_prefix=args.doc_prefix,
        doc_seed_offset=args.doc_seed_offset,
    )
    docfile.write_tree_shards(synth.trees, out_dir, format=docfile.TREE, shard_size=args.shard_size)
    annotations = corpus.analysis_annotations(synth, args.keyword_window)
    corpus.write_annotations(annotations, out_dir / "annotations.jsonl")
    _echo_config(
        out_dir,
        {
            "n_docs": args.n_docs,
            "n_topics": args.n_topics,
            "words_per_doc": args.words_per_doc,
            "correlation": args.correlation,
            "seed": args.seed,
            "keywords_per_topic": args.keywords_per_topic,
            "background_words": args.background_words,
            "section_len": args.section_len,
            "doc_prefix": args.doc_prefix,
            "doc_seed_offset": args.doc_seed_offset,
            "keyword_window": args.keyword_window,
        },
    )
    print(f"generated {args.n_docs} synthetic documents and {len(annotations)} annotation records in {out_dir}")
    return 0


def _load_vocab_size(corpus_dir: Path, flag_value: Optional[int]) -> int:
    if flag_value is not None:
        return flag_value
    vocab_file = corpus_dir / "vocab.txt"
    if vocab_file.exists():
        return corpus.Vocabulary.load(vocab_file).size
    raise FormatError(f"no vocab.txt in {corpus_dir}; pass --vocab-size")


def _cmd_pretrain(args) -> int:
    corpus_dir = Path(args.corpus)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    docs = corpus.read_token_docs(corpus_dir)
    file_values = _read_config_file(Path(args.config)) if args.config else {}

    cli_train = {
        "steps": args.steps,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "seed": args.seed,
        "eval_every": args.eval_every,
        "mask_rate": args.mask_rate,
        "global_attention_enabled": None if args.global_attention is None else args.global_attention == "on",
    }
    cli_model = {
        "n_layers": args.n_layers,
        "n_heads": args.n_heads,
        "d_model": args.d_model,
        "d_ff": args.d_ff,
        "window": args.window,
        "max_len": args.max_len,
        "vocab_size": _load_vocab_size(corpus_dir, args.vocab_size),
    }
    train_config = _merge_config(TrainConfig, file_values, cli_train)
    model_config = _merge_config(ModelConfig, file_values, cli_model)

    heldout = corpus.read_token_docs(Path(args.heldout)) if args.heldout else None
    result = training.train(docs, train_config, model_config, heldout=heldout, model_id=args.model_id)
    ckpt_path = out_dir / "checkpoint.bin"
    training.save_checkpoint(result.checkpoint, ckpt_path)
    training.write_loss_curve(out_dir / "loss_curve.csv", result.loss_curve)
    plots.save_loss_curve(out_dir / "loss_curve.png", result.loss_curve, title=result.checkpoint.model_id)
    if result.eval_curve:
        lines = ["step,masked_ce_nats,bpc"] + [
            f"{s},{r.masked_ce_nats:.17g},{r.bpc:.17g}" for s, r in result.eval_curve
        ]
        docfile.atomic_write_text(out_dir / "eval_curve.csv", "\n".join(lines) + "\n")
    _echo_config(out_dir, {**train_config.to_dict(), **model_config.to_dict()})
    digest = hashlib.sha256(ckpt_path.read_bytes()).hexdigest()[:16]
    final = result.loss_curve[-1][1] if result.loss_curve else float("nan")
    print(f"trained {train_config.steps} steps; final loss {final:.4f}; checkpoint {ckpt_path} (sha256 {digest})")
    return 0


def _cmd_eval(args) -> int:
    ckpt = training.load_checkpoint(args.checkpoint)
    docs = corpus.read_token_docs(Path(args.corpus))
    report = training.evaluate(ckpt, docs, args.seed, args.mask_rate)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    training.write_eval_report(out_dir / "eval.json", report)
    print(
        f"{ckpt.model_id}: masked CE {report.masked_ce_nats:.4f} nats, "
        f"BPC {report.bpc:.4f} ({report.n_masked} masked tokens, {report.n_chars} chars)"
    )
    return 0


def _cmd_analyze(args) -> int:
    ckpt = training.load_checkpoint(args.checkpoint)
    docs = corpus.read_token_docs(Path(args.corpus))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    annotations = corpus.read_annotations(args.annotations)
    report = analysis.header_keyword_attention(ckpt, docs, annotations, layer=args.layer)
    analysis.write_report(out_dir / "report.json", report)
    summary = (
        f"{report.model_id} layer {report.layer}: header->keyword {report.header_to_keyword:.6f}, "
        f"keyword->header {report.keyword_to_header:.6f} over {report.n_pairs} pairs"
    )
    if args.heatmap_doc is not None:
        doc = next((d for d in docs if d.doc_id == args.heatmap_doc), None)
        if doc is None:
            raise FormatError(f"document {args.heatmap_doc!r} not found in corpus")
        vocab = corpus.Vocabulary.load(Path(args.corpus) / "vocab.txt")
        stop = args.heatmap_stop if args.heatmap_stop is not None else min(len(doc), args.heatmap_start + 32)
        labels, matrix = analysis.export_heatmap(ckpt, doc, vocab, args.layer, args.heatmap_start, stop)
        docfile.atomic_write_text(out_dir / "heatmap.csv", analysis.heatmap_csv(labels, matrix))
        plots.save_heatmap(out_dir / "heatmap.png", labels, matrix, title=f"{ckpt.model_id} layer {report.layer}")
        summary += f"; heatmap over [{args.heatmap_start}, {stop})"
    print(summary)
    return 0


def _cmd_compare(args) -> int:
    a = analysis.read_report(args.a)
    b = analysis.read_report(args.b)
    changes = analysis.compare_reports(a, b)
    if args.out_dir:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = {"a": a.to_dict(), "b": b.to_dict(), "relative_change": changes}
        docfile.atomic_write_text(out_dir / "compare.json", json.dumps(payload, indent=2) + "\n")
        plots.save_report_comparison(out_dir / "compare.png", a, b)
    print(
        f"relative change ({a.model_id} vs {b.model_id}): "
        f"header->keyword {changes['header_to_keyword']:+.2%}, "
        f"keyword->header {changes['keyword_to_header']:+.2%}"
    )
    return 0


# ---------------------------------------------------------------------------
# Argument wiring
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="structmlm", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="parse .tex files into document trees")
    p.add_argument("--in", dest="in_dir", required=True, help="directory of .tex files")
    p.add_argument("--out", dest="out_dir", required=True, help="output directory, one file per document")
    p.add_argument("--format", choices=[docfile.TEXT, docfile.TREE], default=docfile.TREE)
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("stats", help="corpus statistics over extracted trees")
    p.add_argument("--in", dest="in_dir", required=True, help="directory of tree files")
    p.add_argument("--out", dest="out_dir", required=True)
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("build-corpus", help="vocabulary + tokenized shards from trees")
    p.add_argument("--trees", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--vocab", default=None,
                   help="reuse an existing vocab.txt (required for held-out/annotated splits)")
    p.add_argument("--vocab-size", type=int, default=2000, help="cap when building a fresh vocabulary")
    p.add_argument("--min-tokens", type=int, default=0, help="length filter lower bound (full scale: 2000)")
    p.add_argument("--max-tokens", type=int, default=10**9, help="length filter upper bound (full scale: 12000)")
    p.add_argument("--shard-size", type=int, default=docfile.DEFAULT_SHARD_SIZE)
    p.set_defaults(func=_cmd_build_corpus)

    p = sub.add_parser("synth-corpus", help="generate the header-correlated synthetic corpus")
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--n-docs", type=int, default=1000)
    p.add_argument("--n-topics", type=int, default=5)
    p.add_argument("--words-per-doc", type=int, default=192)
    p.add_argument("--correlation", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--keywords-per-topic", type=int, default=10)
    p.add_argument("--background-words", type=int, default=400)
    p.add_argument("--section-len", type=int, default=48)
    p.add_argument("--doc-prefix", default="synth")
    p.add_argument("--doc-seed-offset", type=int, default=0)
    p.add_argument("--keyword-window", type=int, default=8, help="max header-keyword distance for annotations")
    p.add_argument("--shard-size", type=int, default=docfile.DEFAULT_SHARD_SIZE)
    p.set_defaults(func=_cmd_synth_corpus)

    p = sub.add_parser("pretrain", help="MLM pre-training (the one flag: --global-attention)")
    p.add_argument("--corpus", required=True, help="directory of token shards (vocab.txt alongside)")
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--global-attention", choices=["on", "off"], default=None)
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--model-id", default=None)
    p.add_argument("--heldout", default=None, help="token shards for periodic evaluation")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--eval-every", type=int, default=None)
    p.add_argument("--mask-rate", type=float, default=None)
    p.add_argument("--n-layers", type=int, default=None)
    p.add_argument("--n-heads", type=int, default=None)
    p.add_argument("--d-model", type=int, default=None)
    p.add_argument("--d-ff", type=int, default=None)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--vocab-size", type=int, default=None)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("eval", help="held-out masked CE and BPC for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True, help="held-out token shards")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mask-rate", type=float, default=0.15)
    p.add_argument("--out", dest="out_dir", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("analyze", help="header/keyword attention report (and optional heatmap)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True, help="token shards of the annotated documents")
    p.add_argument("--annotations", required=True)
    p.add_argument("--layer", default=analysis.LAST)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--heatmap-doc", default=None)
    p.add_argument("--heatmap-start", type=int, default=0)
    p.add_argument("--heatmap-stop", type=int, default=None)
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("compare", help="relative change between two attention reports")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--out", dest="out_dir", default=None)
    p.set_defaults(func=_cmd_compare)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DivergenceError, StructMlmError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
