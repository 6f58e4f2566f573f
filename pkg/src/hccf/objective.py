"""Training objective: hinge ranking loss, cross-view InfoNCE and weight decay."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import PairBatch
from .errors import ConfigError, ContractError
from .model import LayerStates, ModelConfig, ModelParams, pair_scores
from .numcore import Tensor, logsumexp_rows, matmul, mul, relu, row_dot, row_normalize, take_rows, total

MARGIN = 1.0


@dataclass
class LossConfig:
    ssl_weight: float = 1e-2
    weight_decay: float = 1e-4
    temperature: float = 1.0
    samples: int = 5
    negatives_scope: str = "all"

    def __post_init__(self):
        if self.ssl_weight < 0 or self.weight_decay < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.samples < 1:
            raise ConfigError("samples must be at least 1")
        if self.negatives_scope not in ("all", "batch"):
            raise ConfigError("negatives_scope must be 'all' or 'batch'")

    def to_dict(self):
        return asdict(self)


@dataclass
class LossReport:
    """Scalar loss components.  Contrastive terms are None when disabled."""

    ranking: float
    user_contrastive: float | None
    item_contrastive: float | None
    regularizer: float
    total: float

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


def margin_loss(pos: Tensor, neg: Tensor) -> Tensor:
    """``sum(max(0, 1 - pos + neg))`` over aligned score columns."""
    if pos.shape != neg.shape:
        raise ContractError(f"positive scores {pos.shape} and negative scores {neg.shape} differ")
    return total(relu(MARGIN - pos + neg))


def infonce_loss(local_views, global_views, anchors, temperature, scope="all") -> Tensor:
    """Cross-view InfoNCE summed over anchors and layers.

    ``local_views`` and ``global_views`` are per-layer K x d tensors.  Each
    anchor's local view is contrasted with its own global view against the
    global views of every node (``scope='all'``) or of the anchors only.
    """
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    if len(local_views) != len(global_views):
        raise ContractError("local and global views need the same number of layers")
    anchors = np.asarray(anchors, dtype=np.int64)
    loss = None
    for z, g in zip(local_views, global_views):
        zn = row_normalize(take_rows(z, anchors))
        if scope == "all":
            cand = row_normalize(g)
            own = take_rows(cand, anchors)
        else:
            cand = row_normalize(take_rows(g, anchors))
            own = cand
        logits = matmul(zn, cand.T) * (1.0 / temperature)
        pos = row_dot(zn, own) * (1.0 / temperature)
        term = total(logsumexp_rows(logits) - pos)
        loss = term if loss is None else loss + term
    return loss


def weight_decay(params) -> Tensor:
    """Sum of squared Frobenius norms."""
    params = list(params)
    if not params:
        return Tensor(np.zeros((1, 1)))
    out = total(mul(params[0], params[0]))
    for p in params[1:]:
        out = out + total(mul(p, p))
    return out


def contrastive_anchors(batch: PairBatch):
    """Unique batch users, and unique batch items (positives and negatives)."""
    users = np.unique(batch.anchors)
    items = np.unique(np.concatenate([batch.positives, batch.negatives]))
    return users, items


def total_loss(states: LayerStates, batch: PairBatch, params: ModelParams, cfg: LossConfig,
               model_cfg: ModelConfig | None = None):
    """Return ``(loss tensor, LossReport)``.

    Contrastive terms are skipped for the -CCL variant and whenever the
    hypergraph branch is off, since there is then no global view.
    """
    psi_u, psi_v = states.user.psi, states.item.psi
    pos = pair_scores(psi_u, psi_v, batch.anchors, batch.positives)
    neg = pair_scores(psi_u, psi_v, batch.anchors, batch.negatives)
    ranking = margin_loss(pos, neg)
    reg = weight_decay(list(params))
    loss = ranking + reg * cfg.weight_decay
    use_ssl = model_cfg is None or (model_cfg.ccl and model_cfg.hyper)
    lu = lv = None
    if use_ssl:
        users, items = contrastive_anchors(batch)
        su = infonce_loss(states.user.z, states.user.gamma, users, cfg.temperature, cfg.negatives_scope)
        sv = infonce_loss(states.item.z, states.item.gamma, items, cfg.temperature, cfg.negatives_scope)
        loss = loss + (su + sv) * cfg.ssl_weight
        lu, lv = float(su.value.sum()), float(sv.value.sum())
    report = LossReport(float(ranking.value.sum()), lu, lv, float(reg.value.sum()),
                        float(loss.value.sum()))
    return loss, report


def combine(ranking, user_ssl, item_ssl, regularizer, ssl_weight, decay):
    """Scalar form of the unified objective."""
    ssl = (user_ssl or 0.0) + (item_ssl or 0.0)
    return ranking + ssl_weight * ssl + decay * regularizer
