"""Mask-weighted relational message passing: encoder, decoder, parameters.

The encoder embeds a context graph under a soft edge mask without ever
looking at entity identity: per layer, each node averages the states of
its incident edges weighted by the mask, gets head/tail indicator channels
appended, and each edge updates from its two endpoint states plus its own.
The readout concatenates the max-pooled node state with the head and tail
node states, so two graphs are compared with terminals already aligned.

The decoder runs the same message passing with a target graph embedding
concatenated to every initial edge state and classifies each final edge
state into a soft mask entry.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .context import ContextGraph
from .kg import FORWARD
from .seeding import derive_rng

CHECKPOINT_MAGIC = b"KGFW"
CHECKPOINT_VERSION = 1

# Logits beyond this are flat; keeps decoded masks strictly inside (0, 1)
# and cross-entropy finite at saturation.
LOGIT_CLAMP = 15.0


@dataclass
class ModelConfig:
    d_rel: int = 100
    d_hid: int = 128
    n_layers: int = 3
    clf_hidden: int = 64
    # tanh keeps edge states centered: two graphs then agree in cosine only
    # when their masked structure matches, which is what both the mask
    # optimizer and the cosine scorer rely on.
    activation: str = "tanh"
    init_gain: float = 2.0
    rel_init_scale: float = 1.0

    def __post_init__(self):
        if self.activation not in ("tanh", "sigmoid"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def node_state_dim(self) -> int:
        return self.d_hid + 2

    @property
    def base_embedding_dim(self) -> int:
        return 3 * (self.d_hid + 2)


@dataclass
class LinearLayer:
    W: Tensor
    b: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return (x @ self.W) + self.b


@dataclass
class RelationEmbeddingTable:
    """Two d_rel vectors per relation: one per traversal direction.

    Edges built by this package always carry FORWARD, so the backward rows
    are inert unless a caller constructs reversed edges explicitly.
    """

    fwd: Tensor
    bwd: Tensor

    @property
    def n_relations(self) -> int:
        return self.fwd.shape[0]

    @property
    def dim(self) -> int:
        return self.fwd.shape[1]

    @classmethod
    def random(
        cls, n_relations: int, d_rel: int, rng: np.random.Generator, scale: float = 1.0
    ) -> "RelationEmbeddingTable":
        return cls(
            fwd=ad.parameter(rng.uniform(-scale, scale, size=(n_relations, d_rel))),
            bwd=Tensor(rng.uniform(-scale, scale, size=(n_relations, d_rel))),
        )

    @classmethod
    def from_vectors(cls, fwd: np.ndarray, bwd: np.ndarray | None = None) -> "RelationEmbeddingTable":
        if bwd is None:
            bwd = np.copy(fwd)
        return cls(fwd=ad.parameter(fwd), bwd=Tensor(bwd))


@dataclass
class EntityEmbeddingTable:
    vectors: np.ndarray
    names: list[str] | None = None

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def from_file(cls, path: str, entity_names: list[str]) -> "EntityEmbeddingTable":
        names, matrix = load_embedding_file(path)
        by_name = {n: i for i, n in enumerate(names)}
        missing = [n for n in entity_names if n not in by_name]
        if missing:
            raise ValueError(f"embedding file {path} is missing {len(missing)} entities, e.g. {missing[:3]}")
        rows = np.stack([matrix[by_name[n]] for n in entity_names])
        return cls(vectors=rows, names=list(entity_names))

    @classmethod
    def random(cls, n_entities: int, dim: int, rng: np.random.Generator) -> "EntityEmbeddingTable":
        scale = 1.0 / np.sqrt(dim)
        return cls(vectors=rng.uniform(-scale, scale, size=(n_entities, dim)))


@dataclass
class EncoderParams:
    layers: list[LinearLayer]

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend([layer.W, layer.b])
        return out


@dataclass
class DecoderParams:
    layers: list[LinearLayer]
    clf_hidden: LinearLayer
    clf_out: LinearLayer

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend([layer.W, layer.b])
        out.extend([self.clf_hidden.W, self.clf_hidden.b, self.clf_out.W, self.clf_out.b])
        return out


@dataclass
class Model:
    """Relation embeddings plus encoder/decoder weights."""

    config: ModelConfig
    rel_table: RelationEmbeddingTable
    encoder: EncoderParams
    decoder: DecoderParams | None = None
    entity_table: EntityEmbeddingTable | None = None

    @property
    def embedding_dim(self) -> int:
        d = self.config.base_embedding_dim
        if self.entity_table is not None:
            d += 2 * self.entity_table.dim
        return d

    def parameters(self) -> list[Tensor]:
        out = [self.rel_table.fwd]
        out.extend(self.encoder.parameters())
        if self.decoder is not None:
            out.extend(self.decoder.parameters())
        return out


def _linear(rng: np.random.Generator, d_in: int, d_out: int, gain: float = 1.0) -> LinearLayer:
    scale = gain / np.sqrt(d_in)
    return LinearLayer(
        W=ad.parameter(rng.uniform(-scale, scale, size=(d_in, d_out))),
        b=ad.parameter(rng.uniform(-scale, scale, size=d_out)),
    )


def _layer_dims(cfg: ModelConfig, d_edge_in: int) -> list[tuple[int, int]]:
    dims = []
    d_prev = d_edge_in
    for _ in range(cfg.n_layers):
        dims.append((2 * (d_prev + 2) + d_prev, cfg.d_hid))
        d_prev = cfg.d_hid
    return dims


def init_model(
    cfg: ModelConfig,
    n_relations: int,
    seed: int = 0,
    with_decoder: bool = True,
    entity_table: EntityEmbeddingTable | None = None,
) -> Model:
    """Seeded uniform(-gain/sqrt(fan_in), gain/sqrt(fan_in)) initialization."""
    rng = derive_rng(seed, "model-init")
    rel_table = RelationEmbeddingTable.random(n_relations, cfg.d_rel, rng, cfg.rel_init_scale)
    g = cfg.init_gain
    encoder = EncoderParams([_linear(rng, di, do, g) for di, do in _layer_dims(cfg, cfg.d_rel)])
    decoder = None
    if with_decoder:
        d_emb = cfg.base_embedding_dim + (2 * entity_table.dim if entity_table is not None else 0)
        dec_layers = [_linear(rng, di, do, g) for di, do in _layer_dims(cfg, cfg.d_rel + d_emb)]
        decoder = DecoderParams(
            layers=dec_layers,
            clf_hidden=_linear(rng, cfg.d_hid, cfg.clf_hidden, g),
            clf_out=_linear(rng, cfg.clf_hidden, 1, g),
        )
    return Model(cfg, rel_table, encoder, decoder, entity_table)


def _initial_edge_states(table: RelationEmbeddingTable, ctx: ContextGraph) -> Tensor:
    _, rel, _, dirn = ctx.edge_arrays()
    fwd_rows = ad.gather_rows(table.fwd, rel)
    if np.all(dirn == FORWARD):
        return fwd_rows
    bwd_rows = ad.gather_rows(table.bwd, rel)
    is_bwd = dirn.astype(np.float64).reshape(-1, 1)
    return fwd_rows * Tensor(1.0 - is_bwd) + bwd_rows * Tensor(is_bwd)


def _node_aggregate(ctx: ContextGraph, edge_states: Tensor, mask: Tensor) -> Tensor:
    """Mask-weighted incident-edge average with head/tail indicators appended."""
    u, _, v, _ = ctx.edge_arrays()
    n, n_edges = ctx.n_nodes, len(u)
    seg = np.concatenate([u, v])
    # A self-loop is one incident edge, not two; kill its duplicate copy.
    dup_scale = np.concatenate([np.ones(n_edges), (u != v).astype(np.float64)])
    m2 = ad.concat([mask, mask]) * Tensor(dup_scale)
    states2 = ad.concat([edge_states, edge_states], axis=0)
    num = ad.segment_sum(states2 * ad.reshape(m2, (2 * n_edges, 1)), seg, n)
    den = ad.segment_sum(m2, seg, n) + Tensor(np.ones(n))
    agg = num / ad.reshape(den, (n, 1))
    ind_h = np.zeros((n, 1))
    ind_h[ctx.head_idx, 0] = 1.0
    ind_t = np.zeros((n, 1))
    ind_t[ctx.tail_idx, 0] = 1.0
    return ad.concat([agg, Tensor(ind_h), Tensor(ind_t)], axis=1)


def _message_passing(
    layers: list[LinearLayer],
    ctx: ContextGraph,
    edge_states: Tensor,
    mask: Tensor,
    activation: str,
) -> tuple[Tensor, Tensor]:
    """Run all layers; return (final edge states, final node states)."""
    u, _, v, _ = ctx.edge_arrays()
    act = ad.tanh if activation == "tanh" else ad.sigmoid
    for layer in layers:
        node_states = _node_aggregate(ctx, edge_states, mask)
        x = ad.concat(
            [ad.gather_rows(node_states, u), ad.gather_rows(node_states, v), edge_states],
            axis=1,
        )
        edge_states = act(layer(x))
    return edge_states, _node_aggregate(ctx, edge_states, mask)


def encode(
    model: Model,
    ctx: ContextGraph,
    mask,
    entity_table: EntityEmbeddingTable | None = None,
) -> Tensor:
    """Graph embedding of `ctx` under soft edge mask `mask`.

    Returns max_pool(node states) || head state || tail state, optionally
    extended with the head/tail entity embeddings.
    """
    mask = ad.as_tensor(mask)
    if mask.shape != (ctx.n_edges,):
        raise ValueError(f"mask length {mask.shape} does not match edge count {ctx.n_edges}")
    edge_states = _initial_edge_states(model.rel_table, ctx)
    _, node_states = _message_passing(
        model.encoder.layers, ctx, edge_states, mask, model.config.activation
    )
    parts = [
        ad.amax0(node_states),
        ad.reshape(ad.gather_rows(node_states, np.array([ctx.head_idx])), (-1,)),
        ad.reshape(ad.gather_rows(node_states, np.array([ctx.tail_idx])), (-1,)),
    ]
    table = entity_table if entity_table is not None else model.entity_table
    if table is not None:
        if ctx.node_entities is None:
            raise ValueError("entity embeddings need node_entities on the context graph")
        parts.append(Tensor(table.vectors[ctx.node_entities[ctx.head_idx]]))
        parts.append(Tensor(table.vectors[ctx.node_entities[ctx.tail_idx]]))
    return ad.concat(parts)


def decode(model: Model, ctx: ContextGraph, b) -> Tensor:
    """Soft edge mask over `ctx` matching the target embedding `b`."""
    if model.decoder is None:
        raise ValueError("model has no decoder")
    b = ad.as_tensor(b)
    d_emb = model.embedding_dim
    if b.shape != (d_emb,):
        raise ValueError(f"embedding dimension {b.shape} does not match model ({d_emb},)")
    rel_states = _initial_edge_states(model.rel_table, ctx)
    edge_states = ad.concat([rel_states, ad.broadcast_rows(b, ctx.n_edges)], axis=1)
    ones = Tensor(np.ones(ctx.n_edges))
    final_edges, _ = _message_passing(
        model.decoder.layers, ctx, edge_states, ones, model.config.activation
    )
    hidden = ad.sigmoid(model.decoder.clf_hidden(final_edges))
    logits = ad.reshape(model.decoder.clf_out(hidden), (-1,))
    return ad.sigmoid(ad.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP))


def cosine(a, b) -> Tensor:
    """Cosine similarity; 0 when either vector is exactly zero."""
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na == 0.0 or nb == 0.0:
        return Tensor(0.0)
    return ad.dot(a, b) / (ad.sqrt(ad.dot(a, a)) * ad.sqrt(ad.dot(b, b)))


def load_embedding_file(path: str) -> tuple[list[str], np.ndarray]:
    """Read `name v1 v2 ...` lines into (names, float64 matrix)."""
    names: list[str] = []
    rows: list[np.ndarray] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 2:
                raise ValueError(f"{path}:{line_no}: expected a name and at least one float")
            names.append(parts[0])
            rows.append(np.asarray([float(x) for x in parts[1:]], dtype=np.float64))
    if rows and any(r.shape != rows[0].shape for r in rows):
        raise ValueError(f"{path}: inconsistent vector dimensions")
    matrix = np.stack(rows) if rows else np.zeros((0, 0))
    return names, matrix


# -- checkpoint container -----------------------------------------------
#
# magic | u32 version | u64 header length | header json | raw float64 data
# Deterministic byte-for-byte: array payloads are little-endian C-order in
# the header's listed order, no timestamps or compression.


def _model_arrays(model: Model) -> list[tuple[str, np.ndarray]]:
    arrays = [
        ("rel_fwd", model.rel_table.fwd.data),
        ("rel_bwd", model.rel_table.bwd.data),
    ]
    for i, layer in enumerate(model.encoder.layers):
        arrays.append((f"enc_{i}_W", layer.W.data))
        arrays.append((f"enc_{i}_b", layer.b.data))
    if model.decoder is not None:
        for i, layer in enumerate(model.decoder.layers):
            arrays.append((f"dec_{i}_W", layer.W.data))
            arrays.append((f"dec_{i}_b", layer.b.data))
        arrays.append(("clf_hidden_W", model.decoder.clf_hidden.W.data))
        arrays.append(("clf_hidden_b", model.decoder.clf_hidden.b.data))
        arrays.append(("clf_out_W", model.decoder.clf_out.W.data))
        arrays.append(("clf_out_b", model.decoder.clf_out.b.data))
    if model.entity_table is not None:
        arrays.append(("entity_vectors", model.entity_table.vectors))
    return arrays


def save_checkpoint(
    model: Model,
    path: str,
    meta: dict | None = None,
    extra_arrays: dict[str, np.ndarray] | None = None,
) -> None:
    arrays = _model_arrays(model)
    for name, arr in sorted((extra_arrays or {}).items()):
        arrays.append((f"extra/{name}", np.asarray(arr, dtype=np.float64)))
    header = {
        "config": {
            "d_rel": model.config.d_rel,
            "d_hid": model.config.d_hid,
            "n_layers": model.config.n_layers,
            "clf_hidden": model.config.clf_hidden,
            "activation": model.config.activation,
            "init_gain": model.config.init_gain,
            "rel_init_scale": model.config.rel_init_scale,
        },
        "n_relations": model.rel_table.n_relations,
        "has_decoder": model.decoder is not None,
        "entity_names": model.entity_table.names if model.entity_table is not None else None,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> tuple[Model, dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        arrays: dict[str, np.ndarray] = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            arrays[spec["name"]] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)

    cfg = ModelConfig(**header["config"])
    rel_table = RelationEmbeddingTable(
        fwd=ad.parameter(arrays["rel_fwd"]), bwd=Tensor(arrays["rel_bwd"])
    )
    encoder = EncoderParams(
        [
            LinearLayer(ad.parameter(arrays[f"enc_{i}_W"]), ad.parameter(arrays[f"enc_{i}_b"]))
            for i in range(cfg.n_layers)
        ]
    )
    decoder = None
    if header["has_decoder"]:
        decoder = DecoderParams(
            layers=[
                LinearLayer(ad.parameter(arrays[f"dec_{i}_W"]), ad.parameter(arrays[f"dec_{i}_b"]))
                for i in range(cfg.n_layers)
            ],
            clf_hidden=LinearLayer(
                ad.parameter(arrays["clf_hidden_W"]), ad.parameter(arrays["clf_hidden_b"])
            ),
            clf_out=LinearLayer(ad.parameter(arrays["clf_out_W"]), ad.parameter(arrays["clf_out_b"])),
        )
    entity_table = None
    if "entity_vectors" in arrays:
        entity_table = EntityEmbeddingTable(
            vectors=arrays["entity_vectors"], names=header["entity_names"]
        )
    extra = {
        name.split("/", 1)[1]: arr for name, arr in arrays.items() if name.startswith("extra/")
    }
    return Model(cfg, rel_table, encoder, decoder, entity_table), header["meta"], extra
