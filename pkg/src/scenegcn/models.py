"""Multi-relational GCN and its relation-attention variant.

Node features are stacked row-wise (n x d) and weights act on the right,
so a layer computes ``H @ W``.  Each layer first forms, for every node, the
six blocks ``[W_s h_i | h_r1[i] | ... | h_r5[i]]``: the self-loop transform
followed by the mean-aggregated neighbour transform for each temporal
relation.  The plain model sums the blocks; the attention model mixes them
with per-node softmax weights, one set per head, concatenates the heads and
projects back to the layer width.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .graph import NUM_RELATIONS, RELATIONS, InteractionGraph, Relation
from .scene import CLASSES, NUM_CLASSES, BehaviorClass

NUM_SLOTS = NUM_RELATIONS + 1  # self loop + one per relation
SLOT_NAMES = ("node",) + tuple(r.value for r in RELATIONS)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    layer_dims: tuple[int, ...] = (64, 32, 6)
    embedding_dim: int = 64
    num_relations: int = NUM_RELATIONS
    heads: int = 2
    use_attention: bool = True
    use_skip: bool = True
    seed: int = 1

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        if not self.layer_dims or self.layer_dims[-1] != NUM_CLASSES:
            raise ConfigError(f"last layer must have {NUM_CLASSES} units, got {self.layer_dims}")
        if self.heads < 1:
            raise ConfigError("heads must be >= 1")
        if self.num_relations != NUM_RELATIONS:
            raise ConfigError(f"num_relations must be {NUM_RELATIONS}")
        if self.embedding_dim < 1 or min(self.layer_dims) < 1:
            raise ConfigError("dimensions must be positive")

    @property
    def dims(self) -> tuple[int, ...]:
        """Widths of h^0 .. h^L."""
        return (self.embedding_dim,) + self.layer_dims

    @property
    def name(self) -> str:
        return "rel-att-gcn" if self.use_attention else "mrgcn"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_dims"] = list(self.layer_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def skip_needs_projection(cfg: ModelConfig, layer: int) -> bool:
    return cfg.dims[layer - 2] != cfg.dims[layer]


def init_params(cfg: ModelConfig) -> ParamStore:
    """Glorot-uniform weights, U(-0.1, 0.1) embeddings, zero attention scorers."""
    rng = np.random.default_rng(cfg.seed)
    store = ParamStore()
    store.add("embedding", rng.uniform(-0.1, 0.1, size=(2, cfg.embedding_dim)))
    dims = cfg.dims
    for l in range(1, len(dims)):
        d_in, d = dims[l - 1], dims[l]
        store.add(f"layer{l}.self", _glorot(rng, d_in, d))
        for r in RELATIONS:
            store.add(f"layer{l}.rel.{r.value}", _glorot(rng, d_in, d))
        if cfg.use_attention:
            for h in range(cfg.heads):
                store.add(f"layer{l}.att{h}.weight", np.zeros((NUM_SLOTS * d, NUM_SLOTS)))
                store.add(f"layer{l}.att{h}.bias", np.zeros((1, NUM_SLOTS)))
            store.add(f"layer{l}.out", _glorot(rng, cfg.heads * d, d))
        if cfg.use_skip and l >= 2 and skip_needs_projection(cfg, l):
            store.add(f"layer{l}.skip", _glorot(rng, dims[l - 2], d))
    return store


# --------------------------------------------------------------------------
# building blocks

def embed_nodes(g: InteractionGraph, params: ParamStore) -> Tensor:
    return ad.gather_rows(params["embedding"], g.kind_index())


def relation_conv(h_prev: Tensor, g: InteractionGraph, rel: Relation, weight: Tensor) -> Tensor:
    """h_r[i] = mean over j in N_r[i] of h_prev[j] @ W_r (zero row when N_r[i] is empty)."""
    adj = g.adjacency()[1 + rel.index][None]
    return ad.relation_aggregate(ad.matmul(h_prev, weight), adj)


def relation_blocks(h_prev: Tensor, g: InteractionGraph, params: ParamStore, layer: int) -> Tensor:
    """n x (6d) matrix [W_s h | h_forward | h_backward | h_l2r | h_r2l | h_nochange]."""
    weights = [params[f"layer{layer}.self"]] + [params[f"layer{layer}.rel.{r.value}"] for r in RELATIONS]
    stacked = ad.concat_cols(weights)
    return ad.relation_aggregate(ad.matmul(h_prev, stacked), g.adjacency())


def attention_scores(blocks: Tensor, params: ParamStore, layer: int, head: int) -> Tensor:
    logits = ad.matmul(blocks, params[f"layer{layer}.att{head}.weight"])
    return ad.softmax_rows(ad.add_row(logits, params[f"layer{layer}.att{head}.bias"]))


def _finish(z: Tensor, skip: Tensor | None, activate: bool) -> Tensor:
    if skip is not None:
        z = ad.add(z, skip)
    return ad.relu(z) if activate else z


def mrgcn_layer(
    h_prev: Tensor,
    g: InteractionGraph,
    params: ParamStore,
    layer: int,
    skip: Tensor | None = None,
    activate: bool = True,
) -> Tensor:
    """ReLU(W_s h[i] + sum_r h_r[i]) with an optional skip term in the pre-activation."""
    z = ad.block_sum(relation_blocks(h_prev, g, params, layer), NUM_SLOTS)
    return _finish(z, skip, activate)


def rel_att_layer(
    h_prev: Tensor,
    g: InteractionGraph,
    params: ParamStore,
    layer: int,
    heads: int,
    skip: Tensor | None = None,
    activate: bool = True,
    alphas: list | None = None,
) -> Tensor:
    """Attention-weighted mix of the self and per-relation blocks, per head.

    Head outputs are concatenated and projected by ``layer{l}.out``.  When
    ``alphas`` is a list, the per-head attention matrices are appended to it.
    """
    blocks = relation_blocks(h_prev, g, params, layer)
    mixed = []
    layer_alphas = []
    for h in range(heads):
        alpha = attention_scores(blocks, params, layer, h)
        layer_alphas.append(alpha.data)
        mixed.append(ad.block_mix(blocks, alpha))
    z = ad.matmul(ad.concat_cols(mixed), params[f"layer{layer}.out"])
    if alphas is not None:
        alphas.append(layer_alphas)
    return _finish(z, skip, activate)


def forward(
    g: InteractionGraph,
    params: ParamStore,
    cfg: ModelConfig,
    alphas: list | None = None,
) -> Tensor:
    """Raw class logits, one row per node (no activation on the last layer)."""
    h = embed_nodes(g, params)
    outputs = [h]
    n_layers = len(cfg.layer_dims)
    for l in range(1, n_layers + 1):
        skip = None
        if cfg.use_skip and l >= 2:
            src = outputs[l - 2]
            skip = ad.matmul(src, params[f"layer{l}.skip"]) if skip_needs_projection(cfg, l) else src
        last = l == n_layers
        if cfg.use_attention:
            h = rel_att_layer(h, g, params, l, cfg.heads, skip, not last, alphas)
        else:
            h = mrgcn_layer(h, g, params, l, skip, not last)
        outputs.append(h)
    return h


def loss_on(g: InteractionGraph, params: ParamStore, cfg: ModelConfig) -> Tensor:
    return ad.masked_cross_entropy(forward(g, params, cfg), g.labels(), g.label_mask())


def predict(g: InteractionGraph, params: ParamStore, cfg: ModelConfig) -> np.ndarray:
    """Argmax class index for every node."""
    return np.argmax(forward(g, params, cfg).data, axis=1)


# --------------------------------------------------------------------------
# attention summary

def final_attention(g: InteractionGraph, params: ParamStore, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """(logits, head-averaged last-layer attention), both with one row per node."""
    if not cfg.use_attention:
        raise ConfigError("model has no attention")
    alphas: list = []
    logits = forward(g, params, cfg, alphas)
    return logits.data, np.mean(alphas[-1], axis=0)


@dataclass
class AttentionSummary:
    matrix: np.ndarray  # classes x slots, NaN rows for absent classes
    counts: np.ndarray
    absent: list[BehaviorClass] = field(default_factory=list)

    def row(self, cls: BehaviorClass) -> np.ndarray:
        return self.matrix[cls.index]

    def argmax_slot(self, cls: BehaviorClass) -> str | None:
        row = self.row(cls)
        return None if np.isnan(row).any() else SLOT_NAMES[int(np.argmax(row))]

    def to_csv(self) -> str:
        lines = ["class," + ",".join(SLOT_NAMES)]
        for cls in CLASSES:
            row = self.matrix[cls.index]
            lines.append(cls.value + "," + ",".join("nan" if np.isnan(v) else repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


def attention_summary(
    graphs: Sequence[InteractionGraph], params: ParamStore, cfg: ModelConfig
) -> AttentionSummary:
    """Mean last-layer attention over vehicle nodes, grouped by predicted class.

    Each present row is renormalised to sum to 1; classes never predicted get
    a NaN row.
    """
    sums = np.zeros((NUM_CLASSES, NUM_SLOTS))
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    for g in graphs:
        vehicles = g.vehicle_indices()
        if not vehicles:
            continue
        logits, alpha = final_attention(g, params, cfg)
        pred = np.argmax(logits, axis=1)
        for v in vehicles:
            sums[pred[v]] += alpha[v]
            counts[pred[v]] += 1
    matrix = np.full((NUM_CLASSES, NUM_SLOTS), np.nan)
    absent = []
    for c in range(NUM_CLASSES):
        if counts[c]:
            mean = sums[c] / counts[c]
            matrix[c] = mean / mean.sum()
        else:
            absent.append(CLASSES[c])
    return AttentionSummary(matrix, counts, absent)


# --------------------------------------------------------------------------
# checkpoints

def checkpoint_dict(params: ParamStore, cfg: ModelConfig, extra: dict | None = None) -> dict:
    doc = params.to_dict()
    doc["config"] = cfg.to_dict()
    if extra:
        doc["meta"] = extra
    return doc


def save_checkpoint(path: str | Path, params: ParamStore, cfg: ModelConfig, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(checkpoint_dict(params, cfg, extra), sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[ParamStore, ModelConfig]:
    doc = json.loads(Path(path).read_text())
    cfg = ModelConfig.from_dict(doc["config"])
    params = ParamStore.from_dict(doc)
    expected = init_params(cfg)
    if expected.names() != params.names():
        raise ConfigError("checkpoint parameters do not match its config")
    for name, t in expected.items():
        if params[name].shape != t.shape:
            raise ConfigError(f"checkpoint parameter {name} has shape {params[name].shape}, config implies {t.shape}")
    return params, cfg


# --------------------------------------------------------------------------
# gradient check

def _cat(parts: list[np.ndarray]) -> np.ndarray:
    lead = np.broadcast_shapes(*(p.shape[:-1] for p in parts))
    return np.concatenate([np.broadcast_to(p, lead + p.shape[-1:]) for p in parts], axis=-1)


def batched_loss(
    g: InteractionGraph,
    params: ParamStore,
    cfg: ModelConfig,
    name: str,
    values: np.ndarray,
) -> np.ndarray:
    """Loss for each of B replacement values of parameter ``name`` at once.

    Plain numpy, no tape: every array may carry a leading batch axis and
    broadcasting does the rest.  Used by the finite-difference check, which
    otherwise spends almost all its time in per-op overhead.
    """
    P = {k: t.data for k, t in params.items()}
    P[name] = values
    adj = g.adjacency()[1:]
    h = P["embedding"][..., g.kind_index(), :]
    outputs = [h]
    n_layers = len(cfg.layer_dims)
    for l in range(1, n_layers + 1):
        ws = [P[f"layer{l}.self"]] + [P[f"layer{l}.rel.{r.value}"] for r in RELATIONS]
        z = h @ _cat(ws)
        d = z.shape[-1] // NUM_SLOTS
        blocks = [z[..., :d]] + [adj[k] @ z[..., (k + 1) * d:(k + 2) * d] for k in range(NUM_SLOTS - 1)]
        if cfg.use_attention:
            cat = _cat(blocks)
            mixed = []
            for hd in range(cfg.heads):
                logits = cat @ P[f"layer{l}.att{hd}.weight"] + P[f"layer{l}.att{hd}.bias"]
                e = np.exp(logits - logits.max(axis=-1, keepdims=True))
                alpha = e / e.sum(axis=-1, keepdims=True)
                mixed.append(sum(alpha[..., k:k + 1] * blocks[k] for k in range(NUM_SLOTS)))
            z = _cat(mixed) @ P[f"layer{l}.out"]
        else:
            z = sum(blocks)
        if cfg.use_skip and l >= 2:
            src = outputs[l - 2]
            z = z + (src @ P[f"layer{l}.skip"] if skip_needs_projection(cfg, l) else src)
        h = z if l == n_layers else np.maximum(z, 0.0)
        outputs.append(h)
    rows = np.flatnonzero(g.label_mask())
    y = np.asarray(g.labels())[rows].astype(np.intp)
    zr = h[..., rows, :]
    zr = zr - zr.max(axis=-1, keepdims=True)
    nll = np.log(np.exp(zr).sum(axis=-1)) - zr[..., np.arange(rows.size), y]
    return np.broadcast_to(nll.mean(axis=-1), values.shape[:1])


def model_grad_check(
    cfg: ModelConfig,
    g: InteractionGraph,
    seed: int = 0,
    h: float = 1e-5,
    tol: float = 1e-4,
) -> ad.GradCheckReport:
    """Full-loss finite-difference check of every parameter on graph ``g``.

    Attention scorers start at zero in a fresh model, which hides any error
    in the softmax path, so they are first filled with small random values.
    Perturbed losses come from :func:`batched_loss`, which is first confirmed
    to agree with the taped loss at the unperturbed point.
    """
    params = init_params(cfg)
    rng = np.random.default_rng(seed)
    for name, t in params.items():
        if ".att" in name:
            t.data[...] = rng.normal(0.0, 0.1, size=t.shape)
    taped = loss_on(g, params, cfg).item()
    name0 = params.names()[0]
    direct = float(batched_loss(g, params, cfg, name0, params[name0].data[None])[0])
    if abs(taped - direct) > 1e-12 * max(1.0, abs(taped)):
        raise AssertionError(f"batched loss {direct!r} disagrees with taped loss {taped!r}")
    return ad.grad_check(
        lambda: loss_on(g, params, cfg), params, h=h, tol=tol,
        batch_f=lambda name, values: batched_loss(g, params, cfg, name, values),
    )
