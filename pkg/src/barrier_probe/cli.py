"""Command-line entry points: detect, simulate, analyze, rerank, align.

Runs are configured by a JSON file; any field can be overridden on the
command line with ``--set dotted.key=value`` (values parse as JSON, falling
back to strings), and the common knobs have dedicated flags. Flags win over
the environment, which wins over the file. The ``BARRIER_PROBE_CACHE``
variable overrides the decode-cache path.

Exit codes: 0 success, 1 usage or configuration error, 2 model or transport
failure, 3 data-format error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Sequence

from . import analytics, rerank as rerank_mod
from .estimators import (
    EstimatorConfig,
    RiskReport,
    estimate_risk,
    report_from_json,
    report_to_json,
    simulate_estimators,
    stratified_presample,
    write_histogram_csv,
    write_simulation_csv,
)
from .gateway import (
    DecodeCache,
    GatewayError,
    ModelHandle,
    RemoteModel,
    ToyModel,
    TransportError,
)
from .text_core import AnnotatedCorpus, DataFormatError, build_vocab, read_parallel_corpus, read_token_lines
from .toy import ToyModelError, build_toy_model, load_toy_params

logger = logging.getLogger("barrier_probe")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_MODEL = 2
EXIT_DATA = 3

DEFAULT_CONFIG: dict[str, Any] = {
    "model": None,
    "corpus": {"src": None, "refs": [], "pos_tags": None, "dep_depths": None},
    "estimator": {
        "method": "stratified",
        "b": 100,
        "presample": None,
        "repeats": 25,
        "budgets": [5, 10, 25, 50, 100, 250, 500, 1000, 5000],
        "methods": ["uniform", "stratified", "gradient"],
    },
    "analysis": {
        "k_values": [5, 10, 15],
        "p0": 0.1,
        "min_contexts": 10,
        "dep_distances": [1, 2],
    },
    "rerank": {"n": 10, "k": 3},
    "align": {"iterations": 10, "max_vocab": 100000},
    "reports": None,
    "reports_b": None,
    "cache": None,
    "output_dir": "out",
    "seed": 0,
    "jobs": 1,
}


class UsageError(ValueError):
    """Bad flags or configuration."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit(2); map to our code 1
        raise UsageError(message)


def _deep_update(base: dict, override: dict) -> dict:
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def _set_dotted(config: dict, dotted: str, raw: str) -> None:
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    parts = dotted.split(".")
    for part in parts[:-1]:
        nxt = node.get(part)
        if not isinstance(nxt, dict):
            nxt = {}
            node[part] = nxt
        node = nxt
    node[parts[-1]] = value


def load_config(args: argparse.Namespace) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if args.config is not None:
        try:
            file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        _deep_update(config, file_cfg)
    env_cache = os.environ.get("BARRIER_PROBE_CACHE")
    if env_cache:
        config["cache"] = env_cache
    for dotted in args.set or []:
        if "=" not in dotted:
            raise UsageError(f"--set expects key=value, got {dotted!r}")
        key, raw = dotted.split("=", 1)
        _set_dotted(config, key, raw)
    flag_map = {
        "method": ("estimator", "method"),
        "budget": ("estimator", "b"),
        "presample": ("estimator", "presample"),
        "cache": ("cache",),
        "output_dir": ("output_dir",),
        "seed": ("seed",),
        "jobs": ("jobs",),
        "reports": ("reports",),
        "reports_b": ("reports_b",),
    }
    for attr, path in flag_map.items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        node = config
        for part in path[:-1]:
            node = node[part]
        node[path[-1]] = value
    return config


def build_model(config: dict) -> ModelHandle:
    spec = config.get("model")
    if not isinstance(spec, dict) or len(spec) != 1:
        raise UsageError(
            "config.model must hold exactly one of: toy, toy_params, command"
        )
    (kind, value), = spec.items()
    if kind == "toy":
        params = build_toy_model(
            seed=value.get("seed", 0),
            n_vocab=value.get("n_vocab", 50),
            dim=value.get("dim", 16),
            barrier_set=value.get("barrier_ids", []),
            window=value.get("window", 2),
            tau_inv=value.get("tau_inv", 10.0),
            interference=value.get("interference", 0.95),
        )
        return ToyModel(params)
    if kind == "toy_params":
        return ToyModel(load_toy_params(value))
    if kind == "command":
        if not isinstance(value, list) or not value:
            raise UsageError("config.model.command must be a non-empty argv list")
        return RemoteModel(value)
    raise UsageError(f"unknown model source {kind!r}")


def load_corpus(config: dict, model: ModelHandle) -> AnnotatedCorpus:
    corpus_cfg = config.get("corpus") or {}
    src = corpus_cfg.get("src")
    refs = corpus_cfg.get("refs") or []
    if not src or not refs:
        raise UsageError("config.corpus.src and config.corpus.refs are required")
    return read_parallel_corpus(
        model.vocab,
        src,
        refs,
        pos_path=corpus_cfg.get("pos_tags"),
        dep_path=corpus_cfg.get("dep_depths"),
    )


def make_estimator_config(config: dict) -> EstimatorConfig:
    est = config["estimator"]
    method = est.get("method", "stratified")
    b = est.get("b")
    presample = est.get("presample")
    if method == "stratified" and presample is None and b is not None:
        presample = stratified_presample(b)
    return EstimatorConfig(
        method=method,
        b=None if method == "exact" else b,
        presample=presample if method == "stratified" else None,
        seed=config["seed"],
    )


def _out_dir(config: dict) -> Path:
    out = Path(config["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _run_reports(
    model: ModelHandle,
    cache: DecodeCache,
    corpus: AnnotatedCorpus,
    cfg: EstimatorConfig,
    jobs: int,
) -> list[RiskReport]:
    def one(n: int) -> RiskReport:
        ex = corpus.examples[n]
        return estimate_risk(model, cache, ex.source, ex.reference, cfg, example_id=n)

    indices = range(len(corpus.examples))
    if jobs <= 1:
        return [one(n) for n in indices]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, indices))


def _model_call_counts(model: ModelHandle) -> dict:
    return {
        "decode": getattr(model, "decode_calls", 0),
        "nll": getattr(model, "nll_calls", 0),
        "proposal": getattr(model, "proposal_calls", 0),
        "nbest": getattr(model, "nbest_calls", 0),
    }


def cmd_detect(config: dict) -> int:
    model = build_model(config)
    cache = DecodeCache(config.get("cache"))
    corpus = load_corpus(config, model)
    cfg = make_estimator_config(config)
    out = _out_dir(config)
    start = time.monotonic()
    reports = _run_reports(model, cache, corpus, cfg, config["jobs"])
    elapsed = time.monotonic() - start
    report_path = out / "reports.jsonl"
    with open(report_path, "w", encoding="utf-8") as fh:
        for rep in reports:
            fh.write(report_to_json(rep) + "\n")
    if cfg.method == "exact":
        write_histogram_csv(reports, out / "histograms.csv")
    summary = {
        "examples": len(reports),
        "method": cfg.method,
        "b": cfg.b,
        "presample": cfg.presample,
        "seed": cfg.seed,
        "jobs": config["jobs"],
        "elapsed_sec": elapsed,
        "cache": {
            "path": str(cache.path) if cache.path else None,
            "entries": len(cache),
            "hits": cache.hits,
            "misses": cache.misses,
            "hit_rate": cache.hit_rate,
        },
        "model_calls": _model_call_counts(model),
        "fallbacks": sum(1 for r in reports if r.config.fallback_from),
    }
    (out / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    logger.info("wrote %d reports to %s", len(reports), report_path)
    if isinstance(model, RemoteModel):
        model.close()
    return EXIT_OK


def cmd_simulate(config: dict) -> int:
    model = build_model(config)
    cache = DecodeCache(config.get("cache"))
    corpus = load_corpus(config, model)
    est = config["estimator"]
    out = _out_dir(config)
    rows = simulate_estimators(
        corpus,
        model,
        cache,
        budgets=est["budgets"],
        methods=tuple(est.get("methods", ("uniform", "stratified", "gradient"))),
        k_values=tuple(config["analysis"]["k_values"]),
        repeats=est.get("repeats", 25),
        seed=config["seed"],
    )
    write_simulation_csv(rows, out / "estimator_comparison.csv")
    logger.info("wrote %d simulation rows", len(rows))
    if isinstance(model, RemoteModel):
        model.close()
    return EXIT_OK


def _load_reports(path: str) -> list[RiskReport]:
    reports = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                reports.append(report_from_json(line))
    if not reports:
        raise DataFormatError(f"{path}: no reports found")
    return reports


def cmd_analyze(config: dict) -> int:
    if not config.get("reports"):
        raise UsageError("analyze requires --reports (a reports.jsonl from detect)")
    reports = _load_reports(config["reports"])
    model = build_model(config)
    corpus = load_corpus(config, model)
    if len(reports) != len(corpus.examples):
        raise DataFormatError("reports and corpus cover different numbers of sentences")
    analysis = config["analysis"]
    k_values = list(analysis["k_values"])
    out = _out_dir(config)
    produced = []
    skipped = []

    detections = {k: analytics.detections_from_reports(reports, k) for k in k_values}

    if corpus.pos_tags is not None:
        with open(out / "pos_distribution.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k", "pos", "barrier_fraction", "base_fraction"])
            for k in k_values:
                table = analytics.pos_distribution(corpus, detections[k])
                for tag, (bf, base) in table.items():
                    writer.writerow([k, tag, bf, base])
        produced.append("pos_distribution")
    else:
        skipped.append("pos_distribution (no POS annotations)")

    if corpus.dep_depths is not None:
        with open(out / "dep_recall.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k", "d", "recall", "base"])
            for k in k_values:
                for d in analysis["dep_distances"]:
                    recall, base = analytics.dep_recall(corpus, detections[k], d)
                    writer.writerow([k, d, recall, base])
        produced.append("dep_recall")
    else:
        skipped.append("dep_recall (no dependency annotations)")

    stats = [analytics.inverse_frequency(corpus)]
    pairs = [(ex.source, ex.reference) for ex in corpus.examples]
    lex, _ = analytics.ibm1_em(pairs, iterations=config["align"]["iterations"])
    stats.append(analytics.translation_entropy(lex))
    alignments = analytics.align_corpus(lex, pairs)
    stats.append(analytics.exception_rate(model, corpus, alignments, analysis["p0"]))
    with open(out / "overlap_vs_global.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stat", "k", "overlap", "random_baseline"])
        for k in k_values:
            baseline_written = False
            for stat in stats:
                mean, baseline = analytics.overlap_vs_global(reports, corpus, stat, k)
                if not baseline_written:
                    writer.writerow(["random", k, baseline, baseline])
                    baseline_written = True
                writer.writerow([stat.kind, k, mean, baseline])
    produced.append("overlap_vs_global")

    with open(out / "barrier_rate.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "token", "contexts", "barrier_count", "rate", "label"])
        for k in k_values:
            rows = analytics.barrier_rate(corpus, detections[k], analysis["min_contexts"])
            for row in rows:
                writer.writerow(
                    [k, model.vocab.tokens[row.token_id], row.contexts,
                     row.barrier_count, row.rate, row.label]
                )
    produced.append("barrier_rate")

    if config.get("reports_b"):
        reports_b = _load_reports(config["reports_b"])
        with open(out / "cross_run_overlap.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k", "overlap"])
            for k in k_values:
                writer.writerow([k, analytics.cross_run_overlap(reports, reports_b, k)])
        produced.append("cross_run_overlap")

    for item in skipped:
        logger.warning("skipped %s", item)
    if not produced:
        raise DataFormatError("no analysis could be produced")
    logger.info("produced: %s", ", ".join(produced))
    if isinstance(model, RemoteModel):
        model.close()
    return EXIT_OK


def cmd_rerank(config: dict) -> int:
    if not config.get("reports"):
        raise UsageError("rerank requires --reports (a reports.jsonl from detect)")
    reports = _load_reports(config["reports"])
    model = build_model(config)
    cache = DecodeCache(config.get("cache"))
    corpus = load_corpus(config, model)
    rows = rerank_mod.rerank_report(
        corpus,
        model,
        cache,
        reports,
        n=config["rerank"]["n"],
        k=config["rerank"]["k"],
        seed=config["seed"],
    )
    out = _out_dir(config)
    rerank_mod.write_rerank_csv(rows, out / "rerank.csv")
    logger.info("wrote rerank comparison for %d sentences", len(corpus.examples))
    if isinstance(model, RemoteModel):
        model.close()
    return EXIT_OK


def cmd_align(config: dict) -> int:
    corpus_cfg = config.get("corpus") or {}
    src = corpus_cfg.get("src")
    refs = corpus_cfg.get("refs") or []
    if not src or not refs:
        raise UsageError("config.corpus.src and config.corpus.refs are required")
    src_lines = read_token_lines(src)
    tgt_lines = read_token_lines(refs[0])
    if len(src_lines) != len(tgt_lines):
        raise DataFormatError("source and target corpora have different lengths")
    max_vocab = config["align"]["max_vocab"]
    src_vocab = build_vocab(src_lines, max_vocab)
    tgt_vocab = build_vocab(tgt_lines, max_vocab)
    pairs = [
        (src_vocab.encode(s), tgt_vocab.encode(t)) for s, t in zip(src_lines, tgt_lines)
    ]
    lex, log_likelihoods = analytics.ibm1_em(pairs, iterations=config["align"]["iterations"])
    alignments = analytics.align_corpus(lex, pairs)
    out = _out_dir(config)
    analytics.write_lex_table_tsv(lex, src_vocab, tgt_vocab, out / "lex_table.tsv")
    analytics.write_pharaoh(alignments, out / "alignments.pharaoh")
    (out / "em_log_likelihood.csv").write_text(
        "iteration,log_likelihood\n"
        + "".join(f"{i},{ll!r}\n" for i, ll in enumerate(log_likelihoods, start=1)),
        encoding="utf-8",
    )
    logger.info("aligned %d pairs over %d EM iterations", len(pairs), len(log_likelihoods))
    return EXIT_OK


COMMANDS = {
    "detect": cmd_detect,
    "simulate": cmd_simulate,
    "analyze": cmd_analyze,
    "rerank": cmd_rerank,
    "align": cmd_align,
}


def build_parser() -> _Parser:
    parser = _Parser(prog="barrier-probe", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any config field (dotted path, JSON value)")
    parser.add_argument("--method", choices=["exact", "uniform", "stratified", "gradient"])
    parser.add_argument("-b", "--budget", type=int, dest="budget")
    parser.add_argument("-B", "--presample", type=int, dest="presample")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--jobs", type=int)
    parser.add_argument("--cache")
    parser.add_argument("--output-dir", dest="output_dir")
    parser.add_argument("--reports")
    parser.add_argument("--reports-b", dest="reports_b")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"barrier-probe: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        config = load_config(args)
        return COMMANDS[args.command](config)
    except UsageError as exc:
        print(f"barrier-probe: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TransportError, GatewayError, ToyModelError) as exc:
        print(f"barrier-probe: model failure: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (DataFormatError, FileNotFoundError) as exc:
        print(f"barrier-probe: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"barrier-probe: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
