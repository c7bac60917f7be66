"""Command-line entry point: ``gagstream {ingest,synth,train,run,report}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config
from .data import (
    Corpus,
    chronological_split,
    git_blob_sha1,
    ingest_events,
    is_corpus_file,
    load_corpus,
    save_corpus,
)
from .errors import ConfigError, DataError, GagError, NumericError
from .harness import ChunkReport, run_stream, train_offline
from .model import GAGModel
from .synth import SynthConfig, generate_log, write_log

log = logging.getLogger("gagstream")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file or a run manifest")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            p.add_argument(flag, dest=f.name, action="store_const", const=True, default=None)
        else:
            p.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper())
    p.add_argument("--seed", dest="rng_seed", default=None, help="alias of --rng-seed")


def _run_config(args) -> RunConfig:
    names = {f.name for f in dataclasses.fields(RunConfig)}
    overrides = {k: v for k, v in vars(args).items() if k in names}
    return load_run_config(args.config, **overrides)


def _load_dataset(cfg: RunConfig) -> Corpus:
    if not cfg.dataset:
        raise ConfigError("dataset", "no dataset given")
    path = Path(cfg.dataset)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    if is_corpus_file(path):
        return load_corpus(path)
    return ingest_events(path, cfg.session_gap_hours * 3600.0, cfg.top_n_items)


def cmd_ingest(args) -> int:
    corpus = ingest_events(args.input, args.gap_hours * 3600.0, args.top_items)
    save_corpus(args.output, corpus)
    lengths = [len(s) for s in corpus.sessions]
    print(
        f"{len(corpus.sessions)} sessions, {len(corpus.item_vocab)} items, "
        f"{len(corpus.user_vocab)} users, mean length {sum(lengths) / len(lengths):.2f}"
    )
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        users=args.users,
        items=args.items,
        sessions=args.sessions,
        drift_at=args.drift_at,
        drift_strength=args.drift_strength,
        novel_rate=args.novel_rate,
        seed=args.seed,
    )
    rows = generate_log(cfg)
    write_log(args.output, rows)
    print(f"wrote {len(rows)} events in {cfg.sessions} sessions to {args.output}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    corpus = _load_dataset(cfg)
    train, _ = chronological_split(corpus.sessions, cfg.train_frac, cfg.num_chunks)
    model = train_offline(cfg, train)
    save_checkpoint(args.checkpoint, model.params, model.config)
    print(f"trained on {len(train)} sessions; wrote {args.checkpoint}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _run_config(args)
    corpus = _load_dataset(cfg)
    offline: Optional[GAGModel] = None
    if args.checkpoint:
        params, mcfg = load_checkpoint(args.checkpoint)
        offline = GAGModel(params, mcfg)
    start = time.perf_counter()
    result = run_stream(cfg, corpus, offline_model=offline)
    total = time.perf_counter() - start

    out = Path(cfg.output)
    with open(out, "w", newline="\n") as fh:
        for r in result.reports:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    manifest = {
        "version": __version__,
        "config": cfg.to_dict(),
        "seed": cfg.rng_seed,
        "input_sha1": git_blob_sha1(Path(cfg.dataset).read_bytes()),
        "checkpoint": args.checkpoint,
        "num_sessions": len(corpus.sessions),
        "train_size": result.train_size,
        "chunk_sizes": result.chunk_sizes,
        "reservoir_capacity": result.reservoir_capacity,
        "final_num_items": result.final_num_items,
        "final_num_users": result.final_num_users,
        "timings": {
            "offline_seconds": result.offline_seconds,
            "total_seconds": total,
            "chunk_seconds": [r.wall_time for r in result.reports],
        },
    }
    manifest_path = out.with_name(out.name + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _print_table(result.reports)
    print(f"wrote {out} and {manifest_path}")
    return EXIT_OK


def _print_table(reports: Sequence[ChunkReport]) -> None:
    if not reports:
        print("(no reports)")
        return
    ks = sorted(reports[0].recall)
    cols = ["chunk", "sessions", "events"] + [f"R@{k}" for k in ks] + [f"MRR@{k}" for k in ks]
    print("  ".join(f"{c:>8}" for c in cols))
    for r in reports:
        vals = [str(r.chunk_index), str(r.session_count), str(r.event_count)]
        vals += [f"{r.recall[k]:.4f}" for k in ks] + [f"{r.mrr[k]:.4f}" for k in ks]
        print("  ".join(f"{v:>8}" for v in vals))


def cmd_report(args) -> int:
    for path in args.reports:
        try:
            lines = Path(path).read_text().splitlines()
            reports = [ChunkReport.from_dict(json.loads(line)) for line in lines if line.strip()]
        except (ValueError, KeyError) as exc:
            raise DataError(f"{path}: not a report file ({exc})") from exc
        if len(args.reports) > 1:
            print(f"== {path}")
        _print_table(reports)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gagstream", description="Streaming session recommendation with GAG")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="event log -> corpus file")
    p.add_argument("input")
    p.add_argument("-o", "--output", default="corpus.jsonl")
    p.add_argument("--gap-hours", type=float, default=8.0)
    p.add_argument("--top-items", type=int, default=10000)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="write a seeded synthetic drifting event log")
    p.add_argument("-o", "--output", default="synthetic.tsv")
    defaults = SynthConfig()
    p.add_argument("--users", type=int, default=defaults.users)
    p.add_argument("--items", type=int, default=defaults.items)
    p.add_argument("--sessions", type=int, default=defaults.sessions)
    p.add_argument("--drift-at", type=float, default=defaults.drift_at)
    p.add_argument("--drift-strength", type=float, default=defaults.drift_strength)
    p.add_argument("--novel-rate", type=float, default=defaults.novel_rate)
    p.add_argument("--seed", type=int, default=defaults.seed)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="offline training only; writes a checkpoint")
    _add_run_flags(p)
    p.add_argument("--checkpoint", default="model.gag")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="full prequential streaming protocol")
    _add_run_flags(p)
    p.add_argument("--checkpoint", default=None, help="start from this offline model")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="pretty-print JSON-lines reports")
    p.add_argument("reports", nargs="+")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except GagError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
