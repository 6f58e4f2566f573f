"""Forward computation: local propagation, learned hypergraph passing, aggregation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .numcore import SparseMatrix, Tensor, leaky_relu, matmul, mul, row_dot, spmm, take_rows, zeros

SIDES = ("user", "item")


@dataclass
class ModelConfig:
    dim: int = 32
    layers: int = 2
    hyperedges: int = 128
    hyper_layers: int = 3
    dropout: float = 0.25
    hyper: bool = True
    hhm: bool = True
    lowrank: bool = True
    ccl: bool = True
    tie_mapping: bool = False
    structure_per_layer: bool = False
    rescale_dropout: bool = True
    hyper_init_scale: float = 0.1

    def __post_init__(self):
        if min(self.dim, self.layers, self.hyperedges) < 1:
            raise ConfigError("dim, layers and hyperedges must be at least 1")
        if self.hyper_layers < 0:
            raise ConfigError("hyper_layers must be nonnegative")
        if self.hyper_init_scale <= 0:
            raise ConfigError("hyper_init_scale must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def mapping_layers(self):
        """Effective number of hierarchical mapping layers (0 for the -HHM variant)."""
        return self.hyper_layers if self.hhm else 0

    def to_dict(self):
        return asdict(self)


def _xavier(rng, rows, cols, scale=1.0):
    bound = scale * np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


class ModelParams:
    """Named trainable tensors.

    Names: ``user_emb``, ``item_emb``, ``{side}_hyper_proj`` (d x H, low-rank
    structure) or ``{side}_hyper_struct`` (K x H, free structure), and
    ``{side}_mapping.{k}`` (H x H) for every hierarchical mapping layer.
    """

    EMBEDDINGS = ("user_emb", "item_emb")

    def __init__(self, tensors: dict):
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors.values())

    def names(self):
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def arrays(self):
        return {k: t.value for k, t in self.tensors.items()}

    def copy(self):
        return ModelParams({k: Tensor(t.value.copy(), requires_grad=True, name=k)
                            for k, t in self.tensors.items()})

    @classmethod
    def from_arrays(cls, arrays):
        return cls({k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k)
                    for k, v in arrays.items()})

    def count(self, include_embeddings=True):
        return sum(t.value.size for k, t in self.tensors.items()
                   if include_embeddings or k not in self.EMBEDDINGS)

    def mapping(self, side, cfg: ModelConfig):
        c = cfg.mapping_layers
        if c == 0:
            return []
        if cfg.tie_mapping:
            return [self.tensors[f"{side}_mapping.0"]] * c
        layers = [self.tensors.get(f"{side}_mapping.{k}") for k in range(c)]
        if any(v is None for v in layers):
            raise ConfigError(f"{side}: expected {c} mapping matrices")
        return layers


def init_params(num_users, num_items, cfg: ModelConfig, rng) -> ModelParams:
    d, h = cfg.dim, cfg.hyperedges
    gain = cfg.hyper_init_scale
    arrays = {"user_emb": _xavier(rng, num_users, d), "item_emb": _xavier(rng, num_items, d)}
    for side, k in (("user", num_users), ("item", num_items)):
        if cfg.lowrank:
            arrays[f"{side}_hyper_proj"] = _xavier(rng, d, h, gain)
        else:
            arrays[f"{side}_hyper_struct"] = _xavier(rng, k, h, gain)
        n_maps = min(cfg.mapping_layers, 1) if cfg.tie_mapping else cfg.mapping_layers
        for j in range(n_maps):
            arrays[f"{side}_mapping.{j}"] = _xavier(rng, h, h, gain)
    return ModelParams.from_arrays(arrays)


def expected_extra_params(cfg: ModelConfig):
    """Non-embedding parameter count for the low-rank, untied model: 2dH + 2cH^2."""
    return 2 * cfg.dim * cfg.hyperedges + 2 * cfg.mapping_layers * cfg.hyperedges ** 2


def local_propagate(adj: SparseMatrix, e_user, e_item, adj_t: SparseMatrix | None = None):
    """Return ``(leaky(adj @ e_item), leaky(adj.T @ e_user))``."""
    if adj.shape != (e_user.shape[0], e_item.shape[0]):
        raise DimensionError(f"adjacency {adj.shape} vs embeddings {e_user.shape}, {e_item.shape}")
    adj_t = adj_t if adj_t is not None else adj.transpose()
    z_user = leaky_relu(spmm(adj, e_item, a_t=adj_t))
    z_item = leaky_relu(spmm(adj_t, e_user, a_t=adj))
    return z_user, z_item


def hyper_structure(emb, proj):
    """Low-rank node-hyperedge structure ``emb @ proj``."""
    return matmul(emb, proj)


def hyper_propagate(struct, e_prev, mapping, c=None):
    """Node -> hyperedge -> (c residual mapping layers) -> node message passing."""
    if c is not None and len(mapping) != c:
        raise ConfigError(f"expected {c} mapping matrices, got {len(mapping)}")
    if struct.shape[0] != e_prev.shape[0]:
        raise DimensionError(f"structure {struct.shape} vs embeddings {e_prev.shape}")
    lam = matmul(struct.T, e_prev)
    for v in mapping:
        lam = leaky_relu(matmul(v, lam)) + lam
    return leaky_relu(matmul(struct, lam))


@dataclass
class SideStates:
    z: list = field(default_factory=list)
    gamma: list = field(default_factory=list)
    e: list = field(default_factory=list)
    psi: Tensor | None = None


@dataclass
class LayerStates:
    user: SideStates
    item: SideStates

    def side(self, name):
        return self.user if name == "user" else self.item


@dataclass
class Masks:
    """Training-time augmentation: dropped adjacency plus per-side structure masks."""

    adj: SparseMatrix
    user_struct: np.ndarray | None = None
    item_struct: np.ndarray | None = None


def structure(params: ModelParams, cfg: ModelConfig, side, emb):
    if cfg.lowrank:
        return hyper_structure(emb, params[f"{side}_hyper_proj"])
    return params[f"{side}_hyper_struct"]


def forward(params: ModelParams, cfg: ModelConfig, adj: SparseMatrix, masks: Masks | None = None,
            adj_t: SparseMatrix | None = None) -> LayerStates:
    """Run ``cfg.layers`` rounds of local + hypergraph propagation.

    ``masks`` switches to training mode; its adjacency replaces ``adj``.
    """
    if masks is not None:
        adj, adj_t = masks.adj, None
    adj_t = adj_t if adj_t is not None else adj.transpose()
    e0 = {"user": params["user_emb"], "item": params["item_emb"]}
    states = {s: SideStates(e=[e0[s]]) for s in SIDES}

    def structures(embs):
        out = {}
        for s in SIDES:
            h = structure(params, cfg, s, embs[s])
            mask = getattr(masks, f"{s}_struct", None) if masks is not None else None
            out[s] = mul(h, mask) if mask is not None else h
        return out

    structs = structures(e0) if cfg.hyper else None
    for _ in range(cfg.layers):
        prev = {s: states[s].e[-1] for s in SIDES}
        z_user, z_item = local_propagate(adj, prev["user"], prev["item"], adj_t)
        z = {"user": z_user, "item": z_item}
        if cfg.hyper and cfg.structure_per_layer:
            structs = structures(prev)
        for s in SIDES:
            if cfg.hyper:
                g = hyper_propagate(structs[s], prev[s], params.mapping(s, cfg))
            else:
                g = zeros(prev[s].shape)
            st = states[s]
            st.z.append(z[s])
            st.gamma.append(g)
            st.e.append(z[s] + g + prev[s])
    for s in SIDES:
        st = states[s]
        psi = st.e[0]
        for e in st.e[1:]:
            psi = psi + e
        st.psi = psi
    return LayerStates(states["user"], states["item"])


def pair_scores(psi_user, psi_item, users, items):
    """Differentiable inner-product scores for aligned (user, item) index arrays."""
    return row_dot(take_rows(psi_user, users), take_rows(psi_item, items))


def predict(psi_user, psi_item, users, items) -> np.ndarray:
    pu = psi_user.value if isinstance(psi_user, Tensor) else np.asarray(psi_user)
    pv = psi_item.value if isinstance(psi_item, Tensor) else np.asarray(psi_item)
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if users.size and (users.min() < 0 or users.max() >= len(pu)):
        raise IndexError("user index out of range")
    if items.size and (items.min() < 0 or items.max() >= len(pv)):
        raise IndexError("item index out of range")
    if len(users) != len(items):
        raise DimensionError("users and items differ in length")
    return np.einsum("ij,ij->i", pu[users], pv[items])
