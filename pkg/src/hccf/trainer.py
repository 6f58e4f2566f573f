"""Optimization loop, early stopping and checkpoint storage."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data as dataio
from .errors import ConfigError, IntegrityError, NumericError
from .evaluation import evaluate
from .model import Masks, ModelConfig, ModelParams, forward, init_params
from .numcore import AdamState, adam_step, backward
from .objective import LossConfig, LossReport, total_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_decay: float = 0.96
    epochs: int = 50
    batch_size: int = 64
    patience: int = 10
    seed: int = 0
    eval_cutoff: int = 20

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be nonnegative")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.epochs < 0 or self.patience < 1:
            raise ConfigError("epochs must be >= 0 and patience >= 1")

    def lr_at(self, epoch):
        """Learning rate used during 0-based ``epoch``."""
        return self.lr * self.lr_decay ** epoch

    def to_dict(self):
        return asdict(self)


@dataclass
class Checkpoint:
    manifest: dict
    params: dict = field(default_factory=dict)

    def model_params(self) -> ModelParams:
        return ModelParams.from_arrays(self.params)


def epoch_rng(seed, epoch):
    return np.random.default_rng([seed, epoch])


def sample_masks(adj, params, cfg: ModelConfig, rng) -> Masks:
    mu = cfg.dropout
    dropped = dataio.edge_dropout(adj, mu, rng, rescale=cfg.rescale_dropout)
    shapes = {"user": (params["user_emb"].shape[0], cfg.hyperedges),
              "item": (params["item_emb"].shape[0], cfg.hyperedges)}
    if not cfg.hyper or mu == 0:
        return Masks(dropped)
    return Masks(dropped,
                 dataio.dropout_mask(shapes["user"], mu, rng, cfg.rescale_dropout),
                 dataio.dropout_mask(shapes["item"], mu, rng, cfg.rescale_dropout))


def _mean_report(reports, sizes):
    """Epoch components summed over batches and divided by the number of sampled pairs."""
    pairs = float(sum(sizes))

    def mean(key):
        vals = [getattr(r, key) for r in reports]
        return None if vals[0] is None else math.fsum(vals) / pairs
    return LossReport(mean("ranking"), mean("user_contrastive"), mean("item_contrastive"),
                      mean("regularizer"), mean("total"))


def train_epoch(params: ModelParams, index, adj, model_cfg: ModelConfig, loss_cfg: LossConfig,
                train_cfg: TrainConfig, state: AdamState, lr, rng):
    """One pass over all eligible users.  Returns ``(params, state, per-pair LossReport)``."""
    tensors = list(params)
    reports, sizes = [], []
    for b, batch in enumerate(dataio.sample_pairs(index, loss_cfg.samples, train_cfg.batch_size, rng)):
        masks = sample_masks(adj, params, model_cfg, rng)
        states = forward(params, model_cfg, adj, masks)
        loss, report = total_loss(states, batch, params, loss_cfg, model_cfg)
        if not np.isfinite(report.total):
            raise NumericError(f"non-finite loss in batch {b}", dump={
                "batch": b, "anchors": batch.anchors.tolist(), "positives": batch.positives.tolist(),
                "negatives": batch.negatives.tolist(), "report": report.to_dict()})
        grads = backward(loss)
        adam_step(tensors, [grads.get(t) for t in tensors], state, lr)
        reports.append(report)
        sizes.append(len(batch))
    if not reports:
        raise ConfigError("no trainable users in the train split")
    return params, state, _mean_report(reports, sizes)


def eval_embeddings(params, model_cfg, adj):
    states = forward(params, model_cfg, adj)
    return states.user.psi.value, states.item.psi.value


def validation_metric(params, model_cfg, adj, train_m, val_m, cutoff):
    pu, pv = eval_embeddings(params, model_cfg, adj)
    return evaluate(pu, pv, train_m, val_m, (cutoff,)).recall[cutoff]


def make_manifest(model_cfg, loss_cfg, train_cfg, epoch, metrics, params: ModelParams, extra=None):
    manifest = {
        "format": "hccf-checkpoint/1",
        "dtype": "float32-le",
        "epoch": epoch,
        "seed": train_cfg.seed,
        "metrics": metrics,
        "model": model_cfg.to_dict(),
        "loss": loss_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "params": {k: list(t.value.shape) for k, t in params.items()},
    }
    manifest.update(extra or {})
    return manifest


def fit(ds, model_cfg: ModelConfig, loss_cfg: LossConfig, train_cfg: TrainConfig,
        log_path=None, timing_path=None, params=None, log_extra=None):
    """Train with per-epoch lr decay and early stopping on validation Recall@N.

    Returns ``(best Checkpoint, list of per-epoch log records)``.  Records
    carry no wall-clock data so identical runs give identical logs; timings
    go to ``timing_path`` when given.  ``log_extra`` is merged into every record.
    """
    adj = dataio.build_normalized_adjacency(ds).matrix
    train_m, val_m = ds.matrix("train"), ds.matrix("val")
    index = dataio.TrainIndex(ds)
    if params is None:
        params = init_params(ds.num_users, ds.num_items, model_cfg,
                             np.random.default_rng([train_cfg.seed, 2**20]))
    state = AdamState.for_params(list(params))
    cutoff = train_cfg.eval_cutoff
    metric_name = f"val_recall@{cutoff}"
    records = []
    has_val = val_m.nnz > 0
    best = validation_metric(params, model_cfg, adj, train_m, val_m, cutoff) if has_val else 0.0
    best_ckpt = Checkpoint(make_manifest(model_cfg, loss_cfg, train_cfg, 0, {metric_name: best}, params),
                           {k: v.copy() for k, v in params.arrays().items()})
    since_best = 0
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    time_fh = open(timing_path, "a", encoding="utf-8") if timing_path else None
    try:
        for epoch in range(train_cfg.epochs):
            t0 = time.perf_counter()
            lr = train_cfg.lr_at(epoch)
            params, state, report = train_epoch(params, index, adj, model_cfg, loss_cfg, train_cfg,
                                                state, lr, epoch_rng(train_cfg.seed, epoch))
            metric = validation_metric(params, model_cfg, adj, train_m, val_m, cutoff) if has_val else 0.0
            improved = metric > best or not has_val
            if improved:
                best, since_best = metric, 0
                best_ckpt = Checkpoint(
                    make_manifest(model_cfg, loss_cfg, train_cfg, epoch + 1, {metric_name: metric}, params),
                    {k: v.copy() for k, v in params.arrays().items()})
            else:
                since_best += 1
            rec = {**(log_extra or {}), "epoch": epoch + 1, "lr": lr, **report.to_dict(),
                   metric_name: metric, "best": improved}
            records.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                log_fh.flush()
            if time_fh:
                time_fh.write(json.dumps({"epoch": epoch + 1, "wall_time": time.perf_counter() - t0}) + "\n")
            log.info("epoch %d lr %.3g loss %.4f %s %.4f", epoch + 1, lr, report.total, metric_name, metric)
            if has_val and since_best >= train_cfg.patience:
                log.info("early stop after epoch %d (best %.4f)", epoch + 1, best)
                break
    finally:
        if log_fh:
            log_fh.close()
        if time_fh:
            time_fh.close()
    return best_ckpt, records


def _blob_name(name):
    return name.replace("/", "_") + ".f32"


def save_checkpoint(ckpt: Checkpoint, path):
    """Write ``manifest.json`` plus one little-endian float32 blob per parameter."""
    root = Path(path)
    (root / "params").mkdir(parents=True, exist_ok=True)
    manifest = dict(ckpt.manifest)
    blobs = {}
    for name, arr in ckpt.params.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        (root / "params" / _blob_name(name)).write_bytes(raw)
        blobs[name] = {"file": f"params/{_blob_name(name)}", "shape": list(np.shape(arr)),
                       "bytes": len(raw), "sha256": hashlib.sha256(raw).hexdigest()}
    manifest["blobs"] = blobs
    manifest["params"] = {k: v["shape"] for k, v in blobs.items()}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_checkpoint(path) -> Checkpoint:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise IntegrityError(f"{mpath} not found")
    manifest = json.loads(mpath.read_text())
    params = {}
    for name, meta in manifest.get("blobs", {}).items():
        blob = root / meta["file"]
        if not blob.exists():
            raise IntegrityError(f"missing blob for {name}: {blob}")
        raw = blob.read_bytes()
        shape = tuple(meta["shape"])
        if len(raw) != 4 * int(np.prod(shape, dtype=np.int64)) or len(raw) != meta["bytes"]:
            raise IntegrityError(f"{name}: blob has {len(raw)} bytes, manifest shape {shape}")
        if hashlib.sha256(raw).hexdigest() != meta["sha256"]:
            raise IntegrityError(f"{name}: checksum mismatch")
        params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    if set(params) != set(manifest.get("params", {})):
        raise IntegrityError("manifest parameter list does not match stored blobs")
    return Checkpoint(manifest, params)


def configs_from_manifest(manifest):
    return (ModelConfig(**manifest["model"]), LossConfig(**manifest["loss"]),
            TrainConfig(**manifest["train"]))
