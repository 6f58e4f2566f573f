"""All-rank evaluation, over-smoothing measurement and contrastive-gradient diagnostics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .numcore import SparseMatrix

log = logging.getLogger(__name__)

DEFAULT_CUTOFFS = (20, 40)


def _csr_rows(m: SparseMatrix):
    return [m.indices[m.indptr[u]:m.indptr[u + 1]] for u in range(m.rows)]


def rank_all(psi_user, psi_item, train: SparseMatrix, n, users=None, chunk=1024):
    """Top-``n`` unseen items for each user, best first.

    Train items are excluded.  Equal scores are ordered by ascending item
    index.  Lists are shorter than ``n`` only when fewer candidates exist.
    """
    psi_user = np.asarray(psi_user)
    psi_item = np.asarray(psi_item)
    users = np.arange(len(psi_user)) if users is None else np.asarray(users, dtype=np.int64)
    out = []
    for start in range(0, len(users), chunk):
        block = users[start:start + chunk]
        scores = psi_user[block] @ psi_item.T
        for r, u in enumerate(block):
            scores[r, train.indices[train.indptr[u]:train.indptr[u + 1]]] = -np.inf
        order = np.argsort(-scores, axis=1, kind="stable")[:, :n]
        for r, u in enumerate(block):
            seen = train.indptr[u + 1] - train.indptr[u]
            limit = min(n, train.cols - seen)
            out.append(order[r, :limit])
    return out


def recall_at_n(topn, truth, n):
    truth = set(int(t) for t in truth)
    hits = sum(1 for i in topn[:n] if int(i) in truth)
    return hits / len(truth)


def ndcg_at_n(topn, truth, n):
    truth = set(int(t) for t in truth)
    dcg = sum(1.0 / math.log2(r + 2) for r, i in enumerate(topn[:n]) if int(i) in truth)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(n, len(truth))))
    return dcg / idcg


@dataclass
class EvalReport:
    cutoffs: tuple
    recall: dict
    ndcg: dict
    users_evaluated: int
    mad_user: float | None = None
    mad_item: float | None = None
    buckets: list = field(default_factory=list)

    def records(self):
        """One flat record per metric."""
        recs = []
        for n in self.cutoffs:
            recs.append({"metric": f"recall@{n}", "value": self.recall[n]})
            recs.append({"metric": f"ndcg@{n}", "value": self.ndcg[n]})
        recs.append({"metric": "users_evaluated", "value": self.users_evaluated})
        if self.mad_user is not None:
            recs.append({"metric": "mad_user", "value": self.mad_user})
        if self.mad_item is not None:
            recs.append({"metric": "mad_item", "value": self.mad_item})
        return recs

    def flat(self):
        return {r["metric"]: r["value"] for r in self.records()}


def evaluate(psi_user, psi_item, train: SparseMatrix, truth: SparseMatrix, cutoffs=DEFAULT_CUTOFFS,
             users=None) -> EvalReport:
    """Mean Recall@N / NDCG@N over users with a nonempty truth set."""
    cutoffs = tuple(sorted(int(c) for c in cutoffs))
    truth_rows = _csr_rows(truth)
    candidates = [u for u in (range(truth.rows) if users is None else users) if len(truth_rows[u])]
    lists = rank_all(psi_user, psi_item, train, max(cutoffs), candidates) if candidates else []
    per_recall = {n: [] for n in cutoffs}
    per_ndcg = {n: [] for n in cutoffs}
    for u, top in zip(candidates, lists):
        for n in cutoffs:
            per_recall[n].append(recall_at_n(top, truth_rows[u], n))
            per_ndcg[n].append(ndcg_at_n(top, truth_rows[u], n))
    count = len(candidates)
    # correctly rounded sums make the means independent of user order
    recall = {n: math.fsum(v) / count if count else 0.0 for n, v in per_recall.items()}
    ndcg = {n: math.fsum(v) / count if count else 0.0 for n, v in per_ndcg.items()}
    return EvalReport(cutoffs, recall, ndcg, count)


def popularity_scores(train: SparseMatrix, num_users):
    """Every user scores items by their train popularity."""
    pop = np.bincount(train.indices, minlength=train.cols).astype(np.float64)
    return np.ones((num_users, 1)), pop[None, :].T


def sparsity_buckets(psi_user, psi_item, train, truth, edges, cutoff=20):
    """Metrics per user group keyed by train-interaction count ``[lo, hi)``."""
    degree = np.diff(train.indptr)
    rows = []
    bounds = list(edges) + [np.inf]
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        users = np.flatnonzero((degree >= lo) & (degree < hi))
        rep = evaluate(psi_user, psi_item, train, truth, (cutoff,), users)
        label = f"{int(lo)}-{'inf' if hi == np.inf else int(hi)}"
        rows.append({"bucket": label, "users": rep.users_evaluated,
                     f"recall@{cutoff}": rep.recall[cutoff], f"ndcg@{cutoff}": rep.ndcg[cutoff]})
    return rows


def mad(embeddings, sample_size=2000, rng=None):
    """Mean cosine distance ``1 - cos`` over unordered row pairs.

    Zero rows are dropped.  Above ``sample_size`` rows, a uniform subset of
    that many rows is used.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        log.warning("mad: excluding %d zero-norm rows", int((norms == 0).sum()))
        x, norms = x[norms > 0], norms[norms > 0]
    if len(x) < 2:
        raise ValueError("mad needs at least two nonzero rows")
    if len(x) > sample_size:
        rng = rng if rng is not None else np.random.default_rng(0)
        pick = np.sort(rng.choice(len(x), size=sample_size, replace=False))
        x, norms = x[pick], norms[pick]
    unit = x / norms[:, None]
    cos = np.clip(unit @ unit.T, -1.0, 1.0)
    iu = np.triu_indices(len(x), k=1)
    return float(np.mean(1.0 - cos[iu]))


def hard_negative_norm(z, gammas, positive_index, tau):
    """Norm of each negative's contribution to the contrastive gradient on ``z``.

    ``z`` and the rows of ``gammas`` must be unit vectors.  For candidate
    ``k`` the contribution is the component of ``gammas[k]`` orthogonal to
    ``z`` weighted by that candidate's softmax probability
    ``exp(z.gammas[k]/tau) / sum_j exp(z.gammas[j]/tau)``.  The positive's
    own entry is reported as NaN.
    """
    z = np.asarray(z, dtype=np.float64)
    g = np.asarray(gammas, dtype=np.float64)
    x = g @ z
    logits = x / tau
    w = np.exp(logits - logits.max())
    w /= w.sum()
    tangent = g - x[:, None] * z[None, :]
    out = np.linalg.norm(tangent, axis=1) * w
    out[positive_index] = np.nan
    return out


@dataclass
class GradCurve:
    x: np.ndarray
    norm: np.ndarray
    tau: float

    def argmax(self):
        return float(self.x[int(np.argmax(self.norm))])

    def rows(self):
        return [{"x": float(a), "norm": float(b)} for a, b in zip(self.x, self.norm)]


def grad_curve(tau, xs) -> GradCurve:
    """Evaluate ``sqrt(1 - x^2) * exp(x / tau)`` on a grid in [-1, 1]."""
    xs = np.asarray(xs, dtype=np.float64)
    if tau <= 0:
        raise ValueError("tau must be positive")
    if np.any(np.abs(xs) > 1):
        raise ValueError("grid values must lie in [-1, 1]")
    return GradCurve(xs, np.sqrt(np.clip(1.0 - xs ** 2, 0.0, None)) * np.exp(xs / tau), tau)


def analytic_peak(tau):
    """Stationary point of the curve: positive root of ``x^2 + tau x - 1 = 0``."""
    return (-tau + math.sqrt(tau * tau + 4.0)) / 2.0
