"""Command-line entry point: ``p4rec <command> [--config PATH] ...``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error,
3 missing upstream artifact.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from . import corpus as cg, pipeline as pl, rewards as rw
from .rl import ALGOS

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3

COMMANDS = pl.STAGES + pl.EXTRA_STAGES + ("all", "resume", "run", "reward-score")


class _JsonLines(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        msg = record.getMessage()
        if msg.startswith("{"):
            return msg
        return json.dumps({"event": "log", "level": record.levelname.lower(), "logger": record.name, "msg": msg})


def _setup_logging(verbose: bool) -> None:
    root = logging.getLogger("p4rec")
    root.handlers.clear()
    h = logging.StreamHandler(sys.stdout)
    h.setFormatter(_JsonLines())
    root.addHandler(h)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="p4rec", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", help="pipeline config JSON")
    src.add_argument("--profile", choices=("tiny", "desk"), help="built-in config preset")
    p.add_argument("--stage", choices=pl.STAGES + pl.EXTRA_STAGES, help="stage for the 'run' command")
    p.add_argument("--out", help="output directory (overrides P4REC_OUT and the config)")
    p.add_argument("--seed", type=int, help="global seed override")
    g = p.add_argument_group("fine-tuning overrides")
    g.add_argument("--algo", choices=ALGOS)
    g.add_argument("--beta", type=float)
    g.add_argument("--alpha", type=float)
    g.add_argument("--eta", help="reward weights, four comma-separated numbers")
    g.add_argument("--steps", type=int)
    d = p.add_argument_group("decoding")
    dm = d.add_mutually_exclusive_group()
    dm.add_argument("--greedy", action="store_true")
    dm.add_argument("--temperature", type=float)
    r = p.add_argument_group("reward-score")
    r.add_argument("--bundle", help="reward bundle directory")
    r.add_argument("--input", help="JSONL with text, item_text and optional i_vec/u_vec/user_id/item_id")
    r.add_argument("--cf", help="CF checkpoint used to look up user_id/item_id vectors")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args: argparse.Namespace) -> pl.PipelineConfig:
    cfg = pl.load_config(args.config) if args.config else pl.profile(args.profile or "desk")
    if args.seed is not None:
        cfg.seed = args.seed
    rl = cfg.rl
    for name in ("algo", "beta", "alpha", "steps"):
        v = getattr(args, name)
        if v is not None:
            setattr(rl, name, v)
    if args.eta is not None:
        try:
            rl.eta = list(rw.RewardWeights.parse(args.eta).as_array())
        except ValueError as exc:
            raise pl.ConfigError(f"--eta: {exc}") from exc
    if args.greedy:
        cfg.eval.decode = "greedy"
    elif args.temperature is not None:
        cfg.eval = dataclasses.replace(cfg.eval, decode="temperature", temperature=args.temperature)
    cfg.out_dir = args.out or os.environ.get("P4REC_OUT") or cfg.out_dir
    cfg.validate()
    return cfg


def _reward_score(args) -> int:
    if not args.bundle or not args.input:
        raise pl.ConfigError("reward-score needs --bundle and --input")
    if not (Path(args.bundle) / "bundle.json").exists():
        raise pl.MissingArtifactError(f"missing upstream artifact: {Path(args.bundle) / 'bundle.json'}")
    bundle = rw.load_bundle(args.bundle)
    if args.eta is not None:
        bundle.weights = rw.RewardWeights.parse(args.eta)
    recs = cg.read_jsonl(args.input)
    tables = None
    if args.cf:
        from .cf import EmbeddingTables
        tables = EmbeddingTables.load(args.cf)

    def vec(r, key, idx_key, matrix):
        if key in r:
            return np.asarray(r[key], dtype=float)
        if tables is None or idx_key not in r:
            raise pl.ConfigError(f"record needs {key} or {idx_key} with --cf")
        return getattr(tables, matrix)[r[idx_key]]

    texts = [r["text"] for r in recs]
    items = [r["item_text"] for r in recs]
    iv = np.stack([vec(r, "i_vec", "item_id", "item_matrix") for r in recs]) if recs else np.zeros((0, 1))
    uv = np.stack([vec(r, "u_vec", "user_id", "user_matrix") for r in recs]) if recs else np.zeros((0, 1))
    comps = bundle.components(texts, items, iv, uv) if recs else np.zeros((0, 4))
    joint = bundle.scalarize(comps) if recs else np.zeros(0)
    for c, j in zip(comps, joint):
        out = {k: float(v) for k, v in zip(rw.KINDS, c)}
        out["joint"] = float(j)
        sys.stdout.write(json.dumps(out, sort_keys=True) + "\n")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        if args.command == "reward-score":
            return _reward_score(args)
        cfg = resolve_config(args)
        if args.command == "run" and not args.stage:
            raise pl.ConfigError("'run' needs --stage")
        with pl.Run(cfg) as run:
            if args.command in ("all", "resume"):
                pl.run_all(run, resume=args.command == "resume")
            else:
                pl.run_stage(run, args.stage if args.command == "run" else args.command)
        return EXIT_OK
    except pl.ConfigError as exc:
        print(f"p4rec: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pl.MissingArtifactError as exc:
        print(f"p4rec: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        if args.verbose:
            traceback.print_exc()
        print(f"p4rec: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
