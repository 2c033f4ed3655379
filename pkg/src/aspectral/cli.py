"""``aspectral`` command line: data generation, training, evaluation, search, checks, ablations.

Exit codes: 0 success, 1 usage error, 2 ingest/config error, 3 numerical
failure (non-finite loss or failed gradient check). Diagnostics go to
stderr; results go to stdout or ``--out``.

Any config key can be overridden with a dotted flag, e.g.
``--finetune.lr 5e-4`` or ``--aspect_repr=first_k``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from .aspect_repr import ReprConfigError
from .config import ConfigError, RunConfig, load_config, parse_text, parse_value
from .data import (SynthConfig, SynthConfigError, judgments_by_query, load_corpus, load_qrels, load_queries,
                   synth_gen, write_dataset)
from .fusion import FusionConfigError
from .vocab import IngestError, SchemaError

log = logging.getLogger("aspectral")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with 2, which we reserve for input errors
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", help="run config file (key = value lines)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aspectral", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a seeded synthetic corpus, queries and qrels")
    _common(p, config=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--items", type=int, default=SynthConfig.n_items)
    p.add_argument("--train", type=int, default=SynthConfig.n_train)
    p.add_argument("--dev", type=int, default=SynthConfig.n_dev)
    p.add_argument("--test", type=int, default=SynthConfig.n_test)
    p.add_argument("--coverage", default=",".join(map(str, SynthConfig.coverage)),
                   help="per-aspect annotation probabilities, comma separated")

    p = sub.add_parser("pretrain", help="MLM + aspect-learning pre-training")
    _common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="run directory (checkpoints, log, sidecars)")

    p = sub.add_parser("finetune", help="relevance fine-tuning from a pre-trained checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="retrieval metrics on a qrels split")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--baseline-run", help="TREC run file to t-test against")
    p.add_argument("--format", choices=("table", "jsonl"), default="table", help="stdout format")
    p.add_argument("--out", help="directory for metrics.jsonl, metrics.txt and run.trec")

    p = sub.add_parser("search", help="top-k items for a query, with fusion weights")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("query", help="query text")
    p.add_argument("-k", type=int, default=10)

    p = sub.add_parser("gradcheck", help="finite-difference check of the composite losses")
    _common(p)
    p.add_argument("--all-variants", action="store_true", help="check every representation/fusion combination")

    p = sub.add_parser("ablate", help="run a grid of variants and print a combined table")
    _common(p)
    p.add_argument("--matrix", help="grid file: grid.<axis> = [...] and seeds = [...]")
    p.add_argument("--corpus")
    p.add_argument("--queries")
    p.add_argument("--qrels")
    p.add_argument("--out", help="directory for ablation.tsv and ablation.jsonl")
    return parser


def _split_overrides(extra: Sequence[str]) -> dict[str, Any]:
    """``--key value`` / ``--key=value`` pairs naming config keys."""
    known = set(RunConfig().to_flat())
    out: dict[str, Any] = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key, eq, val = tok[2:].partition("=")
        if key not in known:
            raise UsageError(f"unrecognized argument {tok!r}")
        if not eq:
            if i + 1 >= len(extra):
                raise UsageError(f"{tok} needs a value")
            i += 1
            val = extra[i]
        out[key] = parse_value(val)
        i += 1
    return out


def _config(args, overrides: dict[str, Any], fallback: Path | None = None) -> RunConfig:
    path = args.config or (fallback if fallback is not None and fallback.exists() else None)
    if args.seed is not None:
        overrides = {**overrides, "seed": args.seed}
    cfg = load_config(path, overrides)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, overrides) -> int:
    if overrides:
        raise UsageError(f"gen-data takes no config overrides: {sorted(overrides)}")
    try:
        coverage = tuple(float(c) for c in args.coverage.split(","))
    except ValueError:
        raise ConfigError(f"--coverage must be comma-separated numbers, got {args.coverage!r}") from None
    if len(coverage) != 3:
        raise ConfigError("--coverage needs three values (brand, color, category)")
    synth = SynthConfig(n_items=args.items, n_train=args.train, n_dev=args.dev, n_test=args.test,
                        coverage=coverage)
    synth.validate()
    items, queries, qrels = synth_gen(args.seed, synth)
    write_dataset(args.out, items, queries, qrels)
    log.info("wrote %d items, %d queries, %d judgments to %s", len(items), len(queries), len(qrels), args.out)
    return EXIT_OK


def cmd_pretrain(args, overrides) -> int:
    from .training import pretrain

    cfg = _config(args, overrides)
    items = load_corpus(args.corpus, cfg.aspects)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "log.jsonl", "w", encoding="utf-8") as fh:
        res = pretrain(cfg, items, out, on_record=lambda r: fh.write(json.dumps(r) + "\n"))
    print(json.dumps({"checkpoint": str(res.checkpoints[-1]), **res.history[-1]}))
    return EXIT_OK


def _load(args, overrides):
    from .training import _find_run_dir, load_model

    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise IngestError(f"checkpoint {ckpt} not found")
    cfg = _config(args, overrides, fallback=_find_run_dir(ckpt) / "config.txt")
    model, cfg, header = load_model(ckpt, cfg)
    return model, cfg


def cmd_finetune(args, overrides) -> int:
    from .training import finetune

    model, cfg = _load(args, overrides)
    items = load_corpus(args.corpus, cfg.aspects)
    queries, qrels = load_queries(args.queries), load_qrels(args.qrels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "log.jsonl", "w", encoding="utf-8") as fh:
        res = finetune(cfg, model, items, queries, qrels, out, on_record=lambda r: fh.write(json.dumps(r) + "\n"))
    print(json.dumps({"checkpoint": str(out / "best.ckpt"), "best_epoch": res.best_epoch,
                      f"dev_R@{cfg.finetune.select_k}": res.best_score}))
    return EXIT_OK


def cmd_eval(args, overrides) -> int:
    from .retrieval import DEFAULT_METRICS, format_run, parse_run, score_rankings, evaluate_split

    model, cfg = _load(args, overrides)
    items = load_corpus(args.corpus, cfg.aspects)
    queries, qrels = load_queries(args.queries), load_qrels(args.qrels)
    baseline = None
    if args.baseline_run:
        path = Path(args.baseline_run)
        if not path.exists():
            raise IngestError(f"baseline run {path} not found")
        baseline = score_rankings(parse_run(path.read_text(encoding="utf-8")),
                                  judgments_by_query(qrels, args.split), DEFAULT_METRICS)
    ranked: dict = {}
    report = evaluate_split(model, cfg, items, queries, qrels, args.split, DEFAULT_METRICS, runs_out=ranked)
    table, jsonl = report.table(baseline), report.to_jsonl(baseline)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.txt").write_text(table, encoding="utf-8")
        (out / "metrics.jsonl").write_text(jsonl, encoding="utf-8")
        (out / "run.trec").write_text(format_run(ranked), encoding="utf-8")
    sys.stdout.write(table if args.format == "table" else jsonl)
    return EXIT_OK


def cmd_search(args, overrides) -> int:
    from .retrieval import DenseIndex

    model, cfg = _load(args, overrides)
    items = load_corpus(args.corpus, cfg.aspects)
    if not 1 <= args.k <= len(items):
        raise UsageError(f"-k must be in [1, {len(items)}]")
    index = DenseIndex.build(model, items, cfg)
    qv = model.embed_texts([args.query], cfg.query_max_len)[0]
    weights = model.explain(args.query, cfg.query_max_len)
    print("query weights: " + " ".join(f"{n}={w:.4f}" for n, w in weights))
    by_id = {it.id: it for it in items}
    from .training import item_texts
    text_of = dict(zip((it.id for it in items), item_texts(items, cfg)))
    for rank, (iid, score) in enumerate(index.search(qv, args.k), 1):
        w = model.explain(text_of[iid], cfg.item_max_len)
        print(f"{rank}\t{iid}\t{score:.6f}\t{by_id[iid].title}\t" + " ".join(f"{n}={x:.4f}" for n, x in w))
    return EXIT_OK


def cmd_gradcheck(args, overrides) -> int:
    from .diagnostics import VARIANTS, gradient_check, tiny_config

    cfg = _config(args, overrides)
    variants = VARIANTS if args.all_variants else [(cfg.aspect_repr, cfg.weighting, cfg.fusion_objects)]
    worst = 0.0
    for r, w, o in variants:
        tiny = tiny_config(cfg, aspect_repr=r, weighting=w, fusion_objects=o)
        res = gradient_check(tiny, seed=cfg.seed)
        worst = max(worst, res.max_rel_err)
        log.info("%s/%s/%s: pretrain %.3e finetune %.3e", r, w, o, res.pretrain, res.finetune)
    print(f"max rel err {worst:.3e}")
    if not worst < GRADCHECK_TOL:
        log.error("gradient check failed: %.3e >= %.0e", worst, GRADCHECK_TOL)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_ablate(args, overrides) -> int:
    from .experiments import Dataset, format_table, matrix_from_flat, run_grid

    cfg = _config(args, overrides)
    flat: dict[str, Any] = {}
    if args.matrix:
        path = Path(args.matrix)
        if not path.exists():
            raise ConfigError(f"matrix file {path} not found")
        flat = parse_text(path.read_text(encoding="utf-8"), str(path))
    matrix = matrix_from_flat(flat, cfg)
    data = None
    given = [args.corpus, args.queries, args.qrels]
    if any(given):
        if not all(given):
            raise UsageError("--corpus, --queries and --qrels go together")
        data = Dataset(load_corpus(args.corpus, cfg.aspects), load_queries(args.queries), load_qrels(args.qrels))
    rows = run_grid(cfg, matrix, data)
    table = format_table(rows)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.tsv").write_text(table, encoding="utf-8")
        (out / "ablation.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows),
                                            encoding="utf-8")
    sys.stdout.write(table)
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "eval": cmd_eval,
            "search": cmd_search, "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


def run(argv: Sequence[str] | None = None) -> int:
    from .training import CheckpointError, NumericalError

    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        overrides = _split_overrides(extra)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return COMMANDS[args.command](args, overrides)
    except UsageError as exc:
        print(f"aspectral {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestError, SchemaError, ConfigError, SynthConfigError, CheckpointError, FusionConfigError,
            ReprConfigError, FileNotFoundError) as exc:
        print(f"aspectral {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"aspectral {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
