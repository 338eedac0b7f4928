"""Mini-batch adaptive-margin gradient descent with metrics logging and checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evaluation, network
from .checkpoint import save_checkpoint
from .margin_loss import LOSS_KINDS, LossConfig, batch_loss, regularizer
from .sampler import make_minibatch

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("iter", "epoch", "loss", "hinge", "reg", "s", "d", "M_p", "M_n", "active_fraction")
METRICS_SCHEMA_VERSION = 1


class NonFiniteLossError(RuntimeError):
    def __init__(self, iteration, quantity, value):
        super().__init__(f"non-finite {quantity} ({value}) at iteration {iteration}")
        self.iteration = iteration
        self.quantity = quantity


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    lam: float = 0.01
    mu: float = 8.0
    gamma: float = 2.1
    loss_kind: str = "adaptive"
    margin: float = 1.0
    reduction: str = "mean"
    epochs: int = 1
    anchors: int = 16
    positives: int = 2
    negatives: int = 6
    max_batches_per_epoch: int = 1
    seed: int = 0
    lr_decay: float = 1.0
    checkpoint_every: int = 0
    train_cmc_every: int = 10
    precision: str = "float32"

    def __post_init__(self):
        errors = self.problems()
        if errors:
            raise ValueError("; ".join(errors))

    def problems(self) -> list:
        out = []
        if self.learning_rate < 0:
            out.append("learning_rate must be >= 0")
        if self.epochs < 0:
            out.append("epochs must be >= 0")
        if min(self.anchors, self.positives, self.negatives, self.max_batches_per_epoch) < 1:
            out.append("anchors, positives, negatives and max_batches_per_epoch must be >= 1")
        if self.precision not in ("float32", "float64"):
            out.append("precision must be float32 or float64")
        if not 0 < self.lr_decay <= 1:
            out.append("lr_decay must be in (0, 1]")
        if self.loss_kind not in LOSS_KINDS:
            out.append(f"loss_kind must be one of {LOSS_KINDS}")
        return out

    def loss_config(self) -> LossConfig:
        return LossConfig(self.mu, self.gamma, self.lam, self.loss_kind, self.margin, self.reduction)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class TrainMetrics:
    rows: list = field(default_factory=list)      # one dict per iteration
    epochs: list = field(default_factory=list)    # per-epoch summaries

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def epoch_means(self, name="loss") -> np.ndarray:
        by_epoch = {}
        for r in self.rows:
            by_epoch.setdefault(r["epoch"], []).append(r[name])
        return np.array([np.mean(v) for _, v in sorted(by_epoch.items())])


def batches_per_epoch(dataset, config: TrainConfig) -> int:
    """All probe x gallery training pairs over the batch size, capped by the config."""
    probes = len(dataset.indices(dataset.train_ids, 0))
    gallery = len(dataset.indices(dataset.train_ids, 1))
    per_batch = config.anchors * (config.positives + config.negatives)
    return max(1, min(config.max_batches_per_epoch, math.ceil(probes * gallery / per_batch)))


def sgd_update(params: dict, grads: dict, step: float, weight_decay: float = 0.0) -> dict:
    """``p - step * (g + 2 * weight_decay * p)`` for every tensor; returns new arrays."""
    if params.keys() != grads.keys():
        raise ValueError("parameter and gradient sets differ")
    out = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        if weight_decay:
            g = g + (2.0 * weight_decay) * p
        out[k] = (p - step * g).astype(p.dtype, copy=False)
    return out


def _format(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


class MetricsWriter:
    """Append-only CSV, one row per iteration."""

    def __init__(self, path, resume=False):
        self.path = Path(path)
        fresh = not (resume and self.path.exists())
        self._fh = open(self.path, "w" if fresh else "a", newline="")
        self._csv = csv.writer(self._fh)
        if fresh:
            self._fh.write(f"# lamreid metrics schema_version={METRICS_SCHEMA_VERSION}\n")
            self._csv.writerow(METRICS_COLUMNS)

    def write(self, row):
        self._csv.writerow([_format(row[c]) for c in METRICS_COLUMNS])
        self._fh.flush()

    def close(self):
        self._fh.close()


def read_metrics_csv(path) -> list:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    return [{k: (int(v) if k in ("iter", "epoch") else float(v)) for k, v in r.items()} for r in reader]


def train_step(params, dataset, batch, loss_config: LossConfig, step: float, iteration: int = 0):
    """One update: forward, margins, feature grads, backward, SGD.

    Returns ``(new_params, metrics_row)``.
    """
    images = dataset.images[batch.image_indices]
    features, trace = network.forward(params, images, mode="train")
    res = batch_loss(features.astype(np.float64), batch, loss_config)
    reg = regularizer(params.params)
    total = res.loss + loss_config.lam * reg
    for name, value in (("hinge loss", res.loss), ("regularizer", reg), ("total loss", total)):
        if not math.isfinite(value):
            raise NonFiniteLossError(iteration, name, value)
    grads = network.backward(params, trace, res.grad)
    new = network.ParamSet(params.config, sgd_update(params.params, grads, step, loss_config.lam),
                           {**params.buffers, **trace.buffers})
    m = res.margins
    row = {"loss": total, "hinge": res.loss, "reg": reg, "s": m.s, "d": m.d, "M_p": m.m_p, "M_n": m.m_n,
           "active_fraction": res.active_fraction}
    return new, row


def train_cmc(params, dataset, max_ids: int = 10) -> float:
    """Rank-1 on a fixed held-in subset: first probe/gallery image of up to ``max_ids`` train identities."""
    ids = dataset.train_ids[:max_ids]
    probes = np.array([dataset.indices([p], 0)[0] for p in ids])
    gallery = np.array([dataset.indices([p], 1)[0] for p in ids])
    feats = evaluation.extract_features(params, dataset.images[np.concatenate([probes, gallery])])
    ranking = evaluation.rank_gallery(feats[:len(ids)], feats[len(ids):], dataset.person_ids[gallery],
                                      probe_ids=dataset.person_ids[probes])
    return evaluation.cmc_curve(ranking).rank(1)


def train(dataset, net_config: network.NetConfig, config: TrainConfig, params=None, start_iteration: int = 0,
          metrics_path=None, checkpoint_dir=None, metrics: TrainMetrics = None, progress=None):
    """Run ``config.epochs`` epochs from ``start_iteration``; returns ``(params, metrics)``.

    Batch ``h`` is drawn from ``default_rng([seed, h])`` so a run resumed from a
    checkpoint replays exactly the batches an uninterrupted run would have seen.
    """
    dtype = np.float32 if config.precision == "float32" else np.float64
    if params is None:
        params = network.init_params(net_config, config.seed)
    params = params.astype(dtype)
    loss_config = config.loss_config()
    per_epoch = batches_per_epoch(dataset, config)
    total_iters = config.epochs * per_epoch
    metrics = metrics or TrainMetrics()
    writer = MetricsWriter(metrics_path, resume=start_iteration > 0) if metrics_path else None
    if checkpoint_dir and config.checkpoint_every:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    try:
        for h in range(start_iteration, total_iters):
            epoch = h // per_epoch
            step = config.learning_rate * config.lr_decay ** epoch
            batch = make_minibatch(dataset, config.anchors, config.positives, config.negatives,
                                   np.random.default_rng([config.seed, h]))
            params, row = train_step(params, dataset, batch, loss_config, step, h)
            row = {"iter": h, "epoch": epoch, **row}
            metrics.rows.append(row)
            if writer:
                writer.write(row)
            if progress:
                progress(row)
            if (h + 1) % per_epoch == 0:
                summary = {"epoch": epoch, "loss": float(np.mean([r["loss"] for r in metrics.rows
                                                                  if r["epoch"] == epoch]))}
                if config.train_cmc_every and (epoch + 1) % config.train_cmc_every == 0:
                    summary["train_rank1"] = train_cmc(params, dataset)
                metrics.epochs.append(summary)
                log.info("epoch %d loss %.5f", epoch, summary["loss"])
                if checkpoint_dir and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                    save_checkpoint(Path(checkpoint_dir) / f"epoch{epoch + 1:04d}.ckpt", params, h + 1,
                                    {"train_config": config.to_dict()})
    finally:
        if writer:
            writer.close()
    return params, metrics


def write_run_summary(path, metrics: TrainMetrics, **extra):
    rows = metrics.rows
    out = {"schema_version": METRICS_SCHEMA_VERSION, "iterations": len(rows),
           "first_loss": rows[0]["loss"] if rows else None, "final_loss": rows[-1]["loss"] if rows else None,
           "epoch_summaries": metrics.epochs}
    out.update(extra)
    Path(path).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
