"""Command-line entry point: ``lamreid {synth,train,eval,gradcheck,compare}``.

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical
failure (non-finite loss, failed gradient check), 3 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import ablation, evaluation, gradcheck, network, trainer
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .sampler import DatasetError, generate_synthetic, load_dataset, write_dataset

log = logging.getLogger("lamreid")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
CONFIG_SECTIONS = ("net", "train")

# flag dest -> (section, key)
OVERRIDES = {
    "loss": ("train", "loss_kind"), "lr": ("train", "learning_rate"), "epochs": ("train", "epochs"),
    "seed": ("train", "seed"), "mu": ("train", "mu"), "gamma": ("train", "gamma"), "lam": ("train", "lam"),
    "margin": ("train", "margin"), "anchors": ("train", "anchors"), "positives": ("train", "positives"),
    "negatives": ("train", "negatives"), "max_batches": ("train", "max_batches_per_epoch"),
    "lr_decay": ("train", "lr_decay"), "checkpoint_every": ("train", "checkpoint_every"),
    "precision": ("train", "precision"), "residual_blocks": ("net", "residual_blocks"),
    "batch_norm": ("net", "use_batch_norm"),
}


class UsageError(Exception):
    """Invalid arguments or configuration; carries every problem found."""

    def __init__(self, problems):
        self.problems = [problems] if isinstance(problems, str) else list(problems)
        super().__init__("; ".join(self.problems))


@dataclasses.dataclass
class RunConfig:
    net: network.NetConfig
    train: trainer.TrainConfig

    def to_dict(self):
        return {"net": self.net.to_dict(), "train": self.train.to_dict()}


def read_config_file(path) -> dict:
    """YAML or JSON (a JSON document is valid YAML)."""
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise UsageError(f"config {path} is not valid YAML/JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a mapping with sections {CONFIG_SECTIONS}")
    return data


def resolve_config(raw: dict, args=None) -> RunConfig:
    """Merge file contents with command-line overrides and validate everything at once."""
    problems = [f"unknown config section {k!r}" for k in raw if k not in CONFIG_SECTIONS]
    sections = {s: dict(raw.get(s) or {}) for s in CONFIG_SECTIONS}
    if args is not None:
        for dest, (section, key) in OVERRIDES.items():
            value = getattr(args, dest, None)
            if value is not None:
                sections[section][key] = value
    known = {"net": {f.name for f in dataclasses.fields(network.NetConfig)},
             "train": {f.name for f in dataclasses.fields(trainer.TrainConfig)}}
    for s in CONFIG_SECTIONS:
        problems += [f"unknown key {s}.{k}" for k in sections[s] if k not in known[s]]
    net = train = None
    try:
        net = network.NetConfig(**{k: v for k, v in sections["net"].items() if k in known["net"]})
    except (TypeError, ValueError) as exc:
        problems.append(f"net: {exc}")
    try:
        train = trainer.TrainConfig(**{k: v for k, v in sections["train"].items() if k in known["train"]})
    except (TypeError, ValueError) as exc:
        problems += [f"train: {p}" for p in str(exc).split("; ")]
    if problems:
        raise UsageError(problems)
    return RunConfig(net, train)


def prepare_out(path, force: bool, allow_existing: bool = False) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not (force or allow_existing):
        raise UsageError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(path, config: network.NetConfig):
    return load_dataset(path, image_shape=config.input_shape)


def cmd_synth(args) -> int:
    if args.ids + args.test_ids < 2 or args.ids == 1:
        raise UsageError("--ids must be 0 or at least 2 (training needs negative pairs)")
    out = prepare_out(args.out, args.force)
    if args.force:
        for d in ("cam_a", "cam_b"):
            shutil.rmtree(out / d, ignore_errors=True)
    ds = generate_synthetic(args.ids, args.images_per_view, seed=args.seed, test_ids=args.test_ids,
                            image_shape=(3, args.height, args.width))
    write_dataset(ds, out)
    print(f"wrote {len(ds)} images ({len(ds.train_ids)} train / {len(ds.test_ids)} test identities) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    raw = read_config_file(args.config)
    cfg = resolve_config(raw, args)
    out = prepare_out(args.out, args.force, allow_existing=args.resume is not None)
    dataset = _load_data(args.data, cfg.net)
    params, start = None, 0
    if args.resume:
        params, start, _ = load_checkpoint(args.resume)
        if params.config != cfg.net:
            raise UsageError("checkpoint network config does not match the resolved config")
    if args.config:
        shutil.copyfile(args.config, out / ("config.source" + Path(args.config).suffix))
    (out / "config.resolved.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    ckpt_dir = out / "checkpoints"
    if cfg.train.checkpoint_every:
        ckpt_dir.mkdir(exist_ok=True)

    def progress(row):
        log.info("iter %d loss %.6f hinge %.6f s %.4f d %.4f active %.3f", row["iter"], row["loss"],
                 row["hinge"], row["s"], row["d"], row["active_fraction"])

    params, metrics = trainer.train(dataset, cfg.net, cfg.train, params=params, start_iteration=start,
                                    metrics_path=out / "metrics.csv", checkpoint_dir=ckpt_dir, progress=progress)
    total = cfg.train.epochs * trainer.batches_per_epoch(dataset, cfg.train)
    save_checkpoint(out / "model.ckpt", params, max(total, start), {"train_config": cfg.train.to_dict()})
    trainer.write_run_summary(out / "summary.json", metrics, resumed_from=start)
    print(f"trained {len(metrics.rows)} iterations; checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, _, _ = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = resolve_config(read_config_file(args.config))
        if cfg.net != params.config:
            raise UsageError("checkpoint network config does not match --config")
    out = prepare_out(args.out, args.force)
    dataset = _load_data(args.data, params.config)
    if len(dataset.test_ids) < 2:
        raise UsageError("dataset needs at least two test identities")
    result = evaluation.repeat_protocol(dataset, params.astype(np.float64), repeats=args.repeats,
                                        seed=args.seed, mode=args.mode)
    evaluation.write_cmc_csv(out / "cmc.csv", result)
    evaluation.write_rankings_csv(out / "rankings.csv", result.rankings[0], top_k=args.top_k)
    evaluation.write_summary_json(out / "summary.json", result, mode=args.mode, seed=args.seed)
    print(f"rank-1 {100 * result.rank(1):.2f}%  rank-5 {100 * result.rank(5):.2f}%  mAP {100 * result.map_mean:.2f}%")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck.run_gradcheck(args.size, args.seed, corrupt=args.corrupt)
    for line in report.lines():
        print(line)
    verdict = "PASS" if report.passed else "FAIL"
    print(f"{verdict}: max relative error {report.max_error:.3e} over {len(report.results)} components "
          f"in {report.seconds:.1f}s (tolerance {gradcheck.TOLERANCE:g})")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_compare(args) -> int:
    cfg = resolve_config(read_config_file(args.config), args)
    losses = [s.strip() for s in args.losses.split(",") if s.strip()]
    bad = [s for s in losses if s not in trainer.LOSS_KINDS]
    if bad:
        raise UsageError([f"unknown loss {b!r}" for b in bad])
    depths = [int(r) for r in args.residual_blocks_list.split(",")] if args.residual_blocks_list else None
    out = prepare_out(args.out, args.force)
    dataset = _load_data(args.data, cfg.net)
    (out / "config.resolved.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    table, runs = ablation.compare(dataset, cfg.net, cfg.train, losses, range(args.seeds), depths,
                                   repeats=args.repeats, progress=lambda r: log.info("%s", r))
    ablation.write_table_csv(out / "ablation.csv", table)
    ablation.write_runs_csv(out / "runs.csv", runs)
    print(ablation.format_table(table))
    return EXIT_OK


def _add_train_flags(p):
    p.add_argument("--config", help="YAML/JSON file with 'net' and 'train' sections")
    p.add_argument("--loss", choices=trainer.LOSS_KINDS)
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mu", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--lam", type=float, help="weight of the squared-parameter regulariser")
    p.add_argument("--margin", type=float, help="fixed margin for contrastive/triplet")
    p.add_argument("--anchors", type=int)
    p.add_argument("--positives", type=int)
    p.add_argument("--negatives", type=int)
    p.add_argument("--max-batches", type=int, help="cap on mini-batches per epoch")
    p.add_argument("--lr-decay", type=float)
    p.add_argument("--checkpoint-every", type=int, help="epochs between checkpoints (0 = final only)")
    p.add_argument("--precision", choices=("float32", "float64"))
    p.add_argument("--residual-blocks", type=int)
    p.add_argument("--batch-norm", action=argparse.BooleanOptionalAction, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lamreid", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=1, help="BLAS threads (1 = deterministic)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic two-camera dataset")
    p.add_argument("--ids", type=int, required=True, help="training identities")
    p.add_argument("--test-ids", type=int, default=0)
    p.add_argument("--images-per-view", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=230)
    p.add_argument("--width", type=int, default=80)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the ranking network")
    _add_train_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="CMC / mAP of a checkpoint on the test identities")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="optional config the checkpoint must agree with")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("single", "multi"), default="single")
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--size", choices=gradcheck.SIZES, default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("compare", help="loss ablation across seeds")
    _add_train_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--losses", default="adaptive,contrastive,triplet")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds (0..k-1)")
    p.add_argument("--residual-blocks-list", help="comma-separated R values")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except UsageError as exc:
        for p in exc.problems:
            print(f"error: {p}", file=sys.stderr)
        return EXIT_INVALID
    except trainer.NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DatasetError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO if isinstance(exc.__cause__, OSError) else EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
