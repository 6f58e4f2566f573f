"""Implicit-feedback ingestion, splitting, normalized adjacency and sampling."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, EmptyDatasetError
from .numcore import SparseMatrix

log = logging.getLogger(__name__)

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = {"train": TRAIN, "val": VAL, "test": TEST}


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    """Users, items and their (user, item) interaction pairs.

    ``split`` tags every interaction with TRAIN, VAL or TEST.  Freshly loaded
    data is all-train until :func:`split` is applied.
    """

    num_users: int
    num_items: int
    users: np.ndarray
    items: np.ndarray
    split: np.ndarray
    user_ids: list = field(default_factory=list)
    item_ids: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.users) != len(self.items) or len(self.users) != len(self.split):
            raise DataError("users, items and split tags differ in length")
        if len(self.users):
            if self.users.min() < 0 or self.users.max() >= self.num_users:
                raise DataError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= self.num_items:
                raise DataError("item index out of range")

    def __len__(self):
        return len(self.users)

    def part(self, name):
        mask = self.split == SPLIT_NAMES[name]
        return self.users[mask], self.items[mask]

    def matrix(self, name="train"):
        """Binary interaction matrix of one split as CSR."""
        u, i = self.part(name)
        return SparseMatrix.from_coo(self.num_users, self.num_items, u, i)

    def with_split(self, tags):
        return InteractionDataset(self.num_users, self.num_items, self.users, self.items,
                                  np.asarray(tags, dtype=np.int8), self.user_ids, self.item_ids)


def _from_pairs(pairs):
    user_index, item_index = {}, {}
    seen = set()
    users, items = [], []
    for u, i in pairs:
        ui = user_index.setdefault(u, len(user_index))
        ii = item_index.setdefault(i, len(item_index))
        if (ui, ii) in seen:
            continue
        seen.add((ui, ii))
        users.append(ui)
        items.append(ii)
    return InteractionDataset(
        len(user_index), len(item_index),
        np.array(users, dtype=np.int64), np.array(items, dtype=np.int64),
        np.zeros(len(users), dtype=np.int8), list(user_index), list(item_index))


def _read_rows(path, sep):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split(sep)
            if len(parts) < 2 or not parts[0].strip() or not parts[1].strip():
                raise DataError(f"{path}:{lineno}: expected 'user{sep!r}item', got {line!r}")
            rows.append((parts[0].strip(), parts[1].strip()))
    return rows


def _separator(path, fmt):
    fmt = fmt or ("tsv" if str(path).endswith((".tsv", ".txt")) else "csv")
    if fmt not in ("tsv", "csv"):
        raise DataError(f"unknown format {fmt!r}")
    return "\t" if fmt == "tsv" else ","


def load_interactions(path, fmt=None) -> InteractionDataset:
    """Read ``user<sep>item[<sep>...]`` lines; ids are re-indexed by first appearance."""
    rows = _read_rows(path, _separator(path, fmt))
    if not rows:
        raise EmptyDatasetError(f"{path}: no interactions")
    return _from_pairs(rows)


def from_pairs(pairs) -> InteractionDataset:
    pairs = list(pairs)
    if not pairs:
        raise EmptyDatasetError("no interactions")
    return _from_pairs(pairs)


def kcore_filter(ds: InteractionDataset, min_degree: int) -> InteractionDataset:
    """Iteratively drop users and items with fewer than ``min_degree`` interactions."""
    keep = np.ones(len(ds), dtype=bool)
    while True:
        ud = np.bincount(ds.users[keep], minlength=ds.num_users)
        idg = np.bincount(ds.items[keep], minlength=ds.num_items)
        bad = keep & ((ud[ds.users] < min_degree) | (idg[ds.items] < min_degree))
        if not bad.any():
            break
        keep &= ~bad
    dropped = len(ds) - int(keep.sum())
    if dropped:
        log.info("k-core(%d) removed %d interactions", min_degree, dropped)
    pairs = [(ds.user_ids[u], ds.item_ids[i]) for u, i in zip(ds.users[keep], ds.items[keep])]
    if not pairs:
        raise EmptyDatasetError(f"k-core filter with min degree {min_degree} removed everything")
    return _from_pairs(pairs)


def split(ds: InteractionDataset, ratios=(0.7, 0.1, 0.2), seed=0) -> InteractionDataset:
    """Per-user random train/val/test partition.

    Val and test counts are ``floor(n * ratio)`` so any rounding remainder goes
    to train.  Users with fewer than three interactions stay all-train.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ContractError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    tags = np.full(len(ds), TRAIN, dtype=np.int8)
    order = np.argsort(ds.users, kind="stable")
    bounds = np.searchsorted(ds.users[order], np.arange(ds.num_users + 1))
    short = 0
    for u in range(ds.num_users):
        rows = order[bounds[u]:bounds[u + 1]]
        n = len(rows)
        if n < 3:
            short += n > 0
            continue
        perm = rows[rng.permutation(n)]
        n_val = int(math.floor(n * ratios[1] + 1e-9))
        n_test = int(math.floor(n * ratios[2] + 1e-9))
        tags[perm[:n_test]] = TEST
        tags[perm[n_test:n_test + n_val]] = VAL
    if short:
        log.info("%d users with fewer than 3 interactions kept entirely in train", short)
    return ds.with_split(tags)


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    matrix: SparseMatrix
    user_degree: np.ndarray
    item_degree: np.ndarray

    @property
    def transpose(self):
        return self.matrix.transpose()


def build_normalized_adjacency(ds: InteractionDataset) -> NormalizedAdjacency:
    """Symmetric degree normalization of the train interaction matrix."""
    a = ds.matrix("train")
    if a.nnz == 0:
        raise ContractError("train split is empty")
    du = np.diff(a.indptr).astype(np.float64)
    dv = np.bincount(a.indices, minlength=a.cols).astype(np.float64)
    rows = a.row_of_entries()
    values = 1.0 / np.sqrt(du[rows] * dv[a.indices])
    return NormalizedAdjacency(a.with_data(values), du, dv)


@dataclass(frozen=True)
class PairBatch:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __len__(self):
        return len(self.anchors)


class TrainIndex:
    """Sorted (user, item) keys of the train split for fast membership tests."""

    def __init__(self, ds: InteractionDataset):
        a = ds.matrix("train")
        self.num_items = ds.num_items
        self.indptr = a.indptr
        self.indices = a.indices
        self.keys = a.row_of_entries() * ds.num_items + a.indices
        self.degree = np.diff(a.indptr)

    def items_of(self, u):
        return self.indices[self.indptr[u]:self.indptr[u + 1]]

    def contains(self, users, items):
        keys = np.asarray(users) * self.num_items + np.asarray(items)
        pos = np.searchsorted(self.keys, keys)
        pos = np.minimum(pos, len(self.keys) - 1)
        return self.keys[pos] == keys


def eligible_anchors(index: TrainIndex):
    users = np.flatnonzero(index.degree > 0)
    full = index.degree[users] >= index.num_items
    if full.any():
        log.warning("skipping %d users who interacted with every item", int(full.sum()))
    return users[~full]


def sample_negatives(index: TrainIndex, anchors, rng):
    """Uniform items, redrawn until none lies in its anchor's train set."""
    neg = rng.integers(0, index.num_items, size=len(anchors))
    bad = index.contains(anchors, neg)
    while bad.any():
        neg[bad] = rng.integers(0, index.num_items, size=int(bad.sum()))
        bad[bad] = index.contains(anchors[bad], neg[bad])
    return neg


def sample_pairs(ds_or_index, S=1, batch_size=256, rng=None):
    """Yield one epoch of PairBatch objects.

    Every eligible user appears once per epoch in shuffled order, contributing
    ``S`` (anchor, positive, negative) triples.
    """
    if S < 1:
        raise ContractError("S must be at least 1")
    index = ds_or_index if isinstance(ds_or_index, TrainIndex) else TrainIndex(ds_or_index)
    rng = rng if rng is not None else np.random.default_rng()
    users = rng.permutation(eligible_anchors(index))
    for start in range(0, len(users), batch_size):
        chunk = users[start:start + batch_size]
        pos = np.empty(len(chunk) * S, dtype=np.int64)
        for k, u in enumerate(chunk):
            own = index.items_of(u)
            pos[k * S:(k + 1) * S] = rng.choice(own, size=S, replace=len(own) < S)
        anchors = np.repeat(chunk, S)
        yield PairBatch(anchors, pos, sample_negatives(index, anchors, rng))


def edge_dropout(m: SparseMatrix, mu: float, rng, rescale=True) -> SparseMatrix:
    """Keep each stored entry with probability ``1 - mu``.

    With ``rescale`` the survivors are multiplied by ``1 / (1 - mu)``.
    """
    if not 0 <= mu < 1:
        raise ContractError(f"dropout rate must lie in [0, 1), got {mu}")
    if mu == 0:
        return m
    keep = rng.random(m.nnz) < 1.0 - mu
    out = m.select(keep)
    if rescale:
        out = out.with_data(out.data / (1.0 - mu))
    return out


def dropout_mask(shape, mu: float, rng, rescale=True) -> np.ndarray:
    """Dense keep-mask with entries 0 or 1 (or ``1/(1-mu)`` when rescaling)."""
    if not 0 <= mu < 1:
        raise ContractError(f"dropout rate must lie in [0, 1), got {mu}")
    if mu == 0:
        return np.ones(shape)
    keep = rng.random(shape) < 1.0 - mu
    return keep / (1.0 - mu) if rescale else keep.astype(np.float64)


def synthetic_blocks(num_users, num_items, p_in, p_out, seed, blocks=2):
    """Stochastic block interactions: users and items split into contiguous blocks."""
    rng = np.random.default_rng(seed)
    ub = np.arange(num_users) * blocks // num_users
    ib = np.arange(num_items) * blocks // num_items
    prob = np.where(ub[:, None] == ib[None, :], p_in, p_out)
    hit = rng.random((num_users, num_items)) < prob
    u, i = np.nonzero(hit)
    return [(f"u{a}", f"i{b}") for a, b in zip(u, i)]


def parse_synthetic(spec: str):
    """Parse ``blocks:U,V,p_in,p_out,seed``."""
    kind, _, args = spec.partition(":")
    parts = args.split(",")
    if kind != "blocks" or len(parts) != 5:
        raise DataError(f"synthetic spec must look like blocks:U,V,p_in,p_out,seed, got {spec!r}")
    try:
        return int(parts[0]), int(parts[1]), float(parts[2]), float(parts[3]), int(parts[4])
    except ValueError as exc:
        raise DataError(f"bad synthetic spec {spec!r}: {exc}") from None


def save_split(ds: InteractionDataset, out_dir, seed, ratios, extra=None):
    """Write train/val/test TSV files and a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts = {}
    for name, tag in SPLIT_NAMES.items():
        mask = ds.split == tag
        lines = [f"{ds.user_ids[u]}\t{ds.item_ids[i]}\n" for u, i in zip(ds.users[mask], ds.items[mask])]
        (out / f"{name}.tsv").write_text("".join(lines), encoding="utf-8")
        counts[name] = len(lines)
    manifest = {"seed": seed, "ratios": list(ratios), "num_users": ds.num_users,
                "num_items": ds.num_items, "counts": counts}
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_split(data_dir) -> InteractionDataset:
    """Read a directory written by :func:`save_split`."""
    d = Path(data_dir)
    pairs, tags = [], []
    for name, tag in SPLIT_NAMES.items():
        path = d / f"{name}.tsv"
        if not path.exists():
            raise DataError(f"missing split file {path}")
        rows = _read_rows(path, "\t")
        pairs += rows
        tags += [tag] * len(rows)
    if not pairs:
        raise EmptyDatasetError(f"{d}: no interactions")
    user_index, item_index = {}, {}
    users = np.array([user_index.setdefault(u, len(user_index)) for u, _ in pairs], dtype=np.int64)
    items = np.array([item_index.setdefault(i, len(item_index)) for _, i in pairs], dtype=np.int64)
    return InteractionDataset(len(user_index), len(item_index), users, items,
                              np.array(tags, dtype=np.int8), list(user_index), list(item_index))
