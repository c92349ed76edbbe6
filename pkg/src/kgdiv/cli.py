"""Command-line entry point: ``kgdiv {prepare,train,eval,recommend}``.

Exit codes: 0 on success, 1 when training diverges or hits a non-finite
value, 2 for usage, parse and file errors.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from kgdiv.config import ABLATIONS, PRESETS, TrainConfig, apply_overrides, parse_pairs, preset, read_config_file
from kgdiv.data import (Dataset, build_dataset, load_interactions, load_prepared, load_ratings, read_triplets,
                        save_prepared)
from kgdiv.errors import KGDivError, NumericError
from kgdiv.evaluator import CoverageIndex, evaluate_embeddings, topk
from kgdiv.model import Model
from kgdiv.trainer import Checkpoint, train

log = logging.getLogger("kgdiv")

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global")
    g.add_argument("--config", type=Path, help="key=value config file")
    g.add_argument("--seed", type=int)
    g.add_argument("--deterministic", action="store_true", default=None,
                   help="single-threaded BLAS for bitwise-reproducible runs (config default: on)")
    g.add_argument("--out", type=Path, help="output directory")
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--ablate", action="append", choices=ABLATIONS, default=[])
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    g.add_argument("--data", type=Path, help="directory written by 'prepare'")
    g.add_argument("--interactions", type=Path, help="raw interaction file (u i1 i2 ...)")
    g.add_argument("--kg", type=Path, help="raw triplet file (h r t)")
    g.add_argument("--format", choices=("lists", "ratings"), default="lists",
                   help="interaction file layout: 'u i1 i2 ...' lines or 'u i label' rows")
    g.add_argument("--core", type=int, default=10, help="k-core threshold on users (default 10)")
    g.add_argument("--checkpoint", type=Path, help="checkpoint directory")
    g.add_argument("--k", type=int, nargs="+", help="cutoffs (eval) or list length (recommend)")
    g.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="kgdiv", description="KG-aware diversified recommendation.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="filter, split and remap raw data")
    sub.add_parser("train", parents=[common], help="train and write the best checkpoint")
    ev = sub.add_parser("eval", parents=[common], help="score a checkpoint on the test split")
    ev.add_argument("--which", choices=("test", "valid"), default="test")
    rec = sub.add_parser("recommend", parents=[common], help="top-k list for one user")
    rec.add_argument("--user", type=int, required=True, help="dense user id (see user_map.txt)")
    rec.add_argument("--explain", action="store_true", help="show each item's KG neighbours and coverage")
    return p


def resolve_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if args.preset:
        cfg = preset(args.preset, cfg)
    if args.config:
        if not args.config.exists():
            raise FileNotFoundError(f"config file not found: {args.config}")
        cfg = apply_overrides(cfg, read_config_file(args.config))
    if args.set:
        cfg = apply_overrides(cfg, parse_pairs(args.set))
    changes = {name: True for name in args.ablate}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.deterministic:
        changes["deterministic"] = True
    return cfg.replace(**changes)


def _require(value, flag: str):
    if value is None:
        raise UsageError(f"{flag} is required for this command")
    return value


def _load_raw(args):
    return load_ratings(args.interactions) if args.format == "ratings" else load_interactions(args.interactions)


def _dataset(args, seed: int) -> Dataset:
    if args.data is not None:
        return load_prepared(args.data)
    if args.interactions is None or args.kg is None:
        raise UsageError("give --data DIR, or both --interactions and --kg")
    raw = _load_raw(args)
    return build_dataset(raw, read_triplets(args.kg), core=args.core, seed=seed)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def cmd_prepare(args, cfg: TrainConfig) -> int:
    out = _require(args.out, "--out")
    if args.interactions is None or args.kg is None:
        raise UsageError("prepare needs --interactions and --kg")
    raw = _load_raw(args)
    ds = build_dataset(raw, read_triplets(args.kg), core=args.core, seed=cfg.seed)
    save_prepared(ds, out, extra={"core": args.core})
    _write(out / "config.txt", cfg.dumps())
    for key, value in ds.stats().items():
        print(f"{key}\t{value}")
    return EXIT_OK


def cmd_train(args, cfg: TrainConfig) -> int:
    out = _require(args.out, "--out")
    ds = _dataset(args, cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.txt", cfg.dumps())
    result = train(cfg, ds, log_path=out / "train_log.csv")
    result.checkpoint.save(out / "checkpoint")
    if result.valid_report is not None:
        result.valid_report.config = cfg.to_dict()
        _write(out / "valid_metrics.json", result.valid_report.to_json() + "\n")
    ck = result.checkpoint
    print(f"best epoch {ck.epoch}: valid recall@{cfg.eval_k} {ck.best_metric:.6f}")
    if result.diverged:
        print("training diverged; kept the last good checkpoint", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _load_checkpoint(args, ds: Dataset) -> Checkpoint:
    ck = Checkpoint.load(_require(args.checkpoint, "--checkpoint"))
    ck.check_shapes(ds)
    return ck


def cmd_eval(args, cfg: TrainConfig) -> int:
    out = _require(args.out, "--out")
    ds = _dataset(args, cfg.seed)
    ck = _load_checkpoint(args, ds)
    users, items = Model(ds, ck.config).embed(ck.params)
    report = evaluate_embeddings(users, items, ds, ks=tuple(args.k or (20, 40)), which=args.which)
    report.config = ck.config.to_dict()
    _write(out / "metrics.json", report.to_json(per_user=True) + "\n")
    _write(out / "metrics.csv", report.to_csv())
    for key in sorted(report.means):
        print(f"{key}\t{report.means[key]:.6f}")
    return EXIT_OK


def recommend(ds: Dataset, ck: Checkpoint, user: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-``k`` unseen items for a dense user id and their scores."""
    if not 0 <= user < ds.n_users:
        raise UsageError(f"unknown user {user}; valid dense ids are 0..{ds.n_users - 1}")
    users, items = Model(ds, ck.config).embed(ck.params)
    ranked = topk(user, k, users, items, exclude=ds.graph.items_of(user))
    return ranked, (items[ranked].astype(np.float64) @ users[user].astype(np.float64))


def cmd_recommend(args, cfg: TrainConfig) -> int:
    ds = _dataset(args, cfg.seed)
    ck = _load_checkpoint(args, ds)
    k = (args.k or [20])[0]
    ranked, scores = recommend(ds, ck, args.user, k)
    kg, maps = ds.kg, ds.maps
    for line in ck.config.dumps().splitlines():
        print(f"# {line}")
    print(f"# user {args.user} (original id {int(maps.users[args.user])}), top {len(ranked)}")
    print("rank\titem\toriginal\tscore")
    index = CoverageIndex(kg)
    for r, (item, score) in enumerate(zip(ranked.tolist(), scores.tolist()), 1):
        print(f"{r}\t{item}\t{int(maps.entities[item])}\t{score:.6f}")
        if args.explain:
            for rel, ent in kg.item_triplets(item).tolist():
                print(f"\trelation {rel} (original {int(maps.relations[rel])})"
                      f" -> entity {ent} (original {int(maps.entities[ent])})")
            ec, rc = index.counts(ranked[None, :r])
            print(f"\tcumulative EC={int(ec[0])} RC={int(rc[0])}")
    return EXIT_OK


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval, "recommend": cmd_recommend}


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command in ("eval", "recommend") and args.checkpoint is not None and args.seed is None:
            # data rebuilt from raw files must use the seed the checkpoint was trained with
            manifest = args.checkpoint / "manifest.txt"
            if manifest.exists():
                seed = parse_pairs(manifest.read_text(encoding="utf-8").splitlines()).get("config.seed")
                cfg = cfg.replace(seed=int(seed)) if seed is not None else cfg
        return COMMANDS[args.command](args, cfg)
    except NumericError as exc:
        print(f"kgdiv: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, KGDivError, OSError, ValueError, KeyError) as exc:
        print(f"kgdiv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
