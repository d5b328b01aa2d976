"""``psr`` command-line entry point: train, eval, synth, sample-stats."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import encoder
from .config import RunConfig
from .evaluate import evaluate, load_literal_embeddings, rank_all
from .kg import DataError, Dataset, load_dataset
from .sampler import build_plan, sample_stats, uniform_plan
from .semisup import run_semi
from .synth import make_instance, write_dataset
from .trainer import train

log = logging.getLogger("psr")

EXIT_USAGE = 2

# flag dest -> RunConfig field
CONFIG_FLAGS = {
    "dim": ("--dim", int), "depth": ("--layers", int), "tau": ("--tau", float),
    "epsilon": ("--epsilon", float), "batch_size": ("--batch-size", int), "dropout": ("--dropout", float),
    "learning_rate": ("--lr", float), "patience": ("--patience", int), "rng_seed": ("--seed", int),
    "mode": ("--mode", str), "data_dir": ("--data-dir", str), "literal_emb": ("--literal-emb", str),
    "out_dir": ("--out-dir", str), "max_epochs": ("--max-epochs", int),
    "max_iterations": ("--max-iterations", int), "train_ratio": ("--train-ratio", float),
    "dev_ratio": ("--dev-ratio", float),
}


class ConfigError(ValueError):
    pass


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, overridden by the ``--config`` JSON file, overridden by flags."""
    values = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as f:
                values.update(json.load(f))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
    for name in CONFIG_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    if getattr(args, "k", None):
        values["ks"] = args.k
    if getattr(args, "no_stop_gradient", False):
        values["stop_gradient"] = False
    try:
        cfg = RunConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if cfg.mode == "lit" and not cfg.literal_emb:
        raise ConfigError("mode 'lit' requires --literal-emb")
    return cfg


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    for name, (flag, typ) in CONFIG_FLAGS.items():
        kw = {"choices": ("basic", "semi", "lit")} if name == "mode" else {}
        p.add_argument(flag, dest=name, type=typ, default=None, **kw)
    p.add_argument("--k", type=int, action="append", help="Hits@k cutoff (repeatable)")
    p.add_argument("--config", help="JSON file of RunConfig fields")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("--no-stop-gradient", action="store_true", help="collapse ablation: gradient flows into targets")


def _load(cfg: RunConfig) -> Dataset:
    return load_dataset(cfg.data_dir, (cfg.train_ratio, cfg.dev_ratio), cfg.rng_seed)


def _literal(cfg: RunConfig, data: Dataset):
    if not cfg.literal_emb:
        return None
    return load_literal_embeddings(cfg.literal_emb, data.graph.num_entities, data.raw_to_joint or None)


def write_ranks(path, final, targets, test_pairs, literal=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["direction", "source", "target", "rank"])
        for direction in ("kg1->kg2", "kg2->kg1"):
            pairs = test_pairs if direction == "kg1->kg2" else test_pairs[:, ::-1]
            ranks = rank_all(final, targets, test_pairs, direction, literal=literal)
            for (a, b), r in zip(pairs.tolist(), ranks.tolist()):
                w.writerow([direction, a, b, r])


def cmd_train(cfg: RunConfig, ranks_csv: bool = False) -> dict:
    data = _load(cfg)
    literal = _literal(cfg, data)
    out = Path(cfg.out_dir or "psr-out")
    # build everything in a scratch dir so a failed run leaves nothing behind
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".psr-", dir=out.parent))
    try:
        (tmp / "config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")
        extra = {"config": dataclasses.asdict(cfg)}
        if cfg.mode == "basic":
            res = train(data.graph, data.seeds, cfg, log_path=tmp / "train_log.jsonl")
            params, targets = res.params, res.targets
        else:
            semi = run_semi(data.graph, data.seeds, cfg, report_path=tmp / "semi_report.jsonl")
            params, targets = semi.params, semi.targets
            extra["readd_rate"] = semi.readd_rate
            np.savetxt(tmp / "learned_pairs.tsv", semi.pairs, fmt="%d", delimiter="\t")
        final, _ = encoder.forward(data.graph.edges, params)
        result = evaluate(final, targets, data.seeds.test, cfg.ks, literal=literal, block_size=cfg.block_size)
        encoder.save_checkpoint(tmp / "checkpoint.npz", params, targets, extra)
        report = result.to_dict()
        (tmp / "metrics.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
        if ranks_csv:
            write_ranks(tmp / "ranks.csv", final, targets, data.seeds.test, literal)
        if out.exists():
            shutil.rmtree(out)
        tmp.rename(out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return report


def cmd_eval(cfg: RunConfig, checkpoint, ranks_csv=None) -> dict:
    params, targets, meta = encoder.load_checkpoint(checkpoint)
    if params.dim != cfg.dim:
        raise encoder.ContractError(f"dimension mismatch: checkpoint has dim {params.dim}, config has {cfg.dim}")
    if params.depth != cfg.depth:
        raise encoder.ContractError(f"depth mismatch: checkpoint has {params.depth} layers, config has {cfg.depth}")
    data = _load(cfg)
    if params.entity.shape[0] != data.graph.num_entities or params.relation.shape[0] != data.graph.num_relations:
        raise encoder.ContractError("checkpoint does not match the dataset's entity/relation counts")
    if targets is None:
        raise encoder.ContractError("checkpoint has no targets")
    literal = _literal(cfg, data)
    final, _ = encoder.forward(data.graph.edges, params)
    result = evaluate(final, targets, data.seeds.test, cfg.ks, literal=literal, block_size=cfg.block_size)
    if ranks_csv:
        write_ranks(ranks_csv, final, targets, data.seeds.test, literal)
    return result.to_dict()


def cmd_synth(out_dir, num_entities=500, num_relations=5, avg_degree=6.0, delete_prob=0.0, add_count=0,
              seed=0) -> Path:
    inst = make_instance(num_entities, num_relations, avg_degree, delete_prob, add_count, seed)
    out = write_dataset(inst, out_dir)
    np.savetxt(out / "ground_truth", inst.ground_truth, fmt="%d", delimiter="\t")
    return out


def cmd_sample_stats(cfg: RunConfig, path, checkpoint=None) -> int:
    data = _load(cfg)
    if checkpoint is None:
        plan = uniform_plan(data.graph, cfg.tau)
    else:
        params, _, _ = encoder.load_checkpoint(checkpoint)
        plan = build_plan(data.graph, params, 1, cfg.tau)
    rows = sample_stats(data.graph, plan)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["entity", "degree", "expected_alpha", "t"])
        for e, dg, ex, t in rows.tolist():
            w.writerow([int(e), int(dg), repr(float(ex)), int(t)])
    return len(rows)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="psr", description="Entity alignment with relational reflection GNNs.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and report test metrics")
    _add_config_flags(p)
    p.add_argument("--ranks-csv", action="store_true", help="also write per-pair ranks")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_flags(p)
    p.add_argument("checkpoint")
    p.add_argument("--ranks-csv", help="write per-pair ranks to this path")

    p = sub.add_parser("synth", help="write a synthetic permutation-recovery dataset")
    p.add_argument("out_dir")
    p.add_argument("--num-entities", type=int, default=500)
    p.add_argument("--num-relations", type=int, default=5)
    p.add_argument("--avg-degree", type=float, default=6.0)
    p.add_argument("--delete-prob", type=float, default=0.0)
    p.add_argument("--add-count", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("sample-stats", help="per-entity sampling statistics as CSV")
    _add_config_flags(p)
    p.add_argument("--checkpoint", help="use this model's attention instead of the uniform plan")
    p.add_argument("--output", default="sample_stats.csv")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            out = cmd_synth(args.out_dir, args.num_entities, args.num_relations, args.avg_degree,
                            args.delete_prob, args.add_count, args.seed)
            print(out)
            return 0
        cfg = resolve_config(args)
        if args.print_config:
            print(cfg.to_json())
            return 0
        if args.command == "train":
            report = cmd_train(cfg, args.ranks_csv)
        elif args.command == "eval":
            report = cmd_eval(cfg, args.checkpoint, args.ranks_csv)
        else:
            n = cmd_sample_stats(cfg, args.output, args.checkpoint)
            print(f"wrote {n} rows to {args.output}")
            return 0
        print(json.dumps(report, indent=2))
        return 0
    except (ConfigError, FileNotFoundError, DataError) as exc:
        print(f"psr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except encoder.ContractError as exc:
        print(f"psr: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
