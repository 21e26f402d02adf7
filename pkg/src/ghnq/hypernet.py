"""Graph hypernetwork: one forward pass from architecture graph to parameters.

Nodes are embedded by an (op kind, kernel, stride>1, dilation>1, depthwise)
bucket table, refined by rounds of gated message passing that runs along
real edges (weight 1) and virtual edges (a learned scalar per shortest-path
distance), first with and then against edge direction. A two-layer decoder
maps each parameterized node's state to a canonical weight tensor; arbitrary
target shapes come from repeating that tensor along the channel axes and
slicing (spatial extents are sliced from the center). Decoded weights are
then rescaled so their standard deviation matches sqrt(2 / fan_in).
BatchNorm gamma/beta and bias vectors decode from dedicated one-dimensional
heads (gamma near 1 and the rest near 0 at initialization).
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from typing import Optional

import numpy as np

from .errors import CheckpointError, HypernetError
from .graphs import CONV_KINDS, POOL_KINDS, ArchGraph, NodeSpec, OpKind
from .tensor import (Tensor, concat, gather_rows, mul, relu, sigmoid, sqrt,
                     tanh, tile)

CHECKPOINT_MAGIC = b"GHNQCKPT"
CHECKPOINT_VERSION = 1


@dataclasses.dataclass(frozen=True)
class HypernetConfig:
    embed_dim: int = 64
    mp_rounds: int = 2
    canonical_shape: tuple[int, int, int, int] = (64, 64, 3, 3)
    s_max: int = 10
    normalization: str = "fan_in_variance"  # or "none"
    decoder_hidden: int = 128

    def validate(self) -> None:
        if self.embed_dim < 1 or self.decoder_hidden < 1:
            raise HypernetError("embed_dim and decoder_hidden must be >= 1")
        if self.mp_rounds < 0:
            raise HypernetError("mp_rounds must be >= 0 (0 is a testing bypass)")
        if any(e < 1 for e in self.canonical_shape) or len(self.canonical_shape) != 4:
            raise HypernetError(f"bad canonical shape {self.canonical_shape}")
        if self.s_max < 2:
            raise HypernetError("s_max must be >= 2")
        if self.normalization not in ("fan_in_variance", "none"):
            raise HypernetError(f"unknown normalization '{self.normalization}'")


def _bucket_vocabulary() -> list[tuple]:
    """Fixed, enumerable bucket keys; table indices never depend on data."""
    vocab = []
    for kind in OpKind:
        if kind in CONV_KINDS:
            for kernel in (1, 3, 5, 7):
                for big_stride in (0, 1):
                    for dilated in (0, 1):
                        for depthwise in (0, 1):
                            vocab.append((kind.value, kernel, big_stride,
                                          dilated, depthwise))
        elif kind in POOL_KINDS:
            for kernel in (2, 3):
                for big_stride in (0, 1):
                    vocab.append((kind.value, kernel, big_stride, 0, 0))
        else:
            vocab.append((kind.value, 0, 0, 0, 0))
    return vocab


_VOCAB = _bucket_vocabulary()
_VOCAB_INDEX = {key: i for i, key in enumerate(_VOCAB)}


def bucket_of(node: NodeSpec) -> tuple:
    a = node.attrs
    if node.kind in CONV_KINDS:
        return (node.kind.value, a["kernel"], int(a["stride"] > 1),
                int(a["dilation"] > 1), int(a["groups"] == a["c_in"] and a["groups"] > 1))
    if node.kind in POOL_KINDS:
        return (node.kind.value, a["kernel"], int(a["stride"] > 1), 0, 0)
    return (node.kind.value, 0, 0, 0, 0)


class Hypernet:
    """Embedding table, message-passing weights, virtual-edge scalars, decoder."""

    def __init__(self, cfg: HypernetConfig, tensors: dict[str, Tensor]):
        cfg.validate()
        self.cfg = cfg
        self._tensors = tensors

    @classmethod
    def initialize(cls, cfg: HypernetConfig, seed: int = 0) -> "Hypernet":
        cfg.validate()
        rng = np.random.default_rng(seed)
        d = cfg.embed_dim
        hidden = cfg.decoder_hidden
        p_canon = int(np.prod(cfg.canonical_shape))
        c_max = cfg.canonical_shape[0]

        def glorot(fan_in, fan_out, shape):
            return rng.normal(scale=np.sqrt(2.0 / (fan_in + fan_out)), size=shape)

        t: dict[str, Tensor] = {}

        def add(name, data):
            t[name] = Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)

        add("emb", rng.normal(scale=0.5, size=(len(_VOCAB), d)))
        for r in range(cfg.mp_rounds):
            for direction in ("fwd", "bwd"):
                add(f"mp{r}.{direction}.w_msg", glorot(d, d, (d, d)))
                add(f"mp{r}.{direction}.b_msg", np.zeros(d))
                add(f"mp{r}.{direction}.w_gate", glorot(2 * d, d, (2 * d, d)))
                add(f"mp{r}.{direction}.b_gate", np.zeros(d))
                add(f"mp{r}.{direction}.w_cand", glorot(2 * d, d, (2 * d, d)))
                add(f"mp{r}.{direction}.b_cand", np.zeros(d))
        add("vedge", [1.0 / dist for dist in range(2, cfg.s_max + 1)])
        add("dec.w1", glorot(d, hidden, (d, hidden)))
        add("dec.b1", np.zeros(hidden))
        add("dec.w2", glorot(hidden, p_canon, (hidden, p_canon)))
        add("dec.b2", np.zeros(p_canon))
        for head in ("gamma", "beta", "bias"):
            add(f"head_{head}.w", rng.normal(scale=0.01, size=(d, c_max)))
            add(f"head_{head}.b", np.zeros(c_max))
        return cls(cfg, t)

    def t(self, name: str) -> Tensor:
        return self._tensors[name]

    def params(self) -> dict[str, Tensor]:
        """Named parameters in a stable order."""
        return dict(self._tensors)

    @property
    def num_params(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def __repr__(self) -> str:
        return (f"Hypernet(embed_dim={self.cfg.embed_dim}, "
                f"mp_rounds={self.cfg.mp_rounds}, params={self.num_params})")

    def bucket_index(self, node: NodeSpec) -> int:
        key = bucket_of(node)
        idx = _VOCAB_INDEX.get(key)
        if idx is None:
            raise HypernetError(f"node {node.id}: no embedding bucket for {key}")
        return idx

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None


# -- message passing ----------------------------------------------------------


def encode_graph(h: Hypernet, g: ArchGraph) -> dict[int, Tensor]:
    """Node states after gated message passing; requires virtual edges."""
    if g.virtual_edges is None:
        raise HypernetError(
            "graph has no virtual edges; run compute_virtual_edges(g, s_max) first")
    ids = sorted(n.id for n in g.nodes)
    index = {nid: i for i, nid in enumerate(ids)}
    n = len(ids)
    bucket_idx = [h.bucket_index(g.node_by_id(nid)) for nid in ids]
    states = gather_rows(h.t("emb"), bucket_idx)

    real = np.zeros((n, n), dtype=np.float32)
    for src, dst in g.edges:
        real[index[dst], index[src]] = 1.0
    by_distance: dict[int, np.ndarray] = {}
    for src, dst, dist in g.virtual_edges:
        if dist > h.cfg.s_max:
            continue
        mat = by_distance.setdefault(dist, np.zeros((n, n), dtype=np.float32))
        mat[index[dst], index[src]] = 1.0

    def normalized(mats_real, mats_virtual):
        total = mats_real.sum(axis=1)
        for mat in mats_virtual.values():
            total = total + mat.sum(axis=1)
        inv = 1.0 / np.maximum(total, 1.0)
        return (mats_real * inv[:, None],
                {d: m * inv[:, None] for d, m in mats_virtual.items()})

    real_fwd, virt_fwd = normalized(real, by_distance)
    real_bwd, virt_bwd = normalized(real.T, {d: m.T for d, m in by_distance.items()})

    adjacency = {"fwd": (Tensor(real_fwd), {d: Tensor(m) for d, m in virt_fwd.items()}),
                 "bwd": (Tensor(real_bwd), {d: Tensor(m) for d, m in virt_bwd.items()})}

    vedge = h.t("vedge")
    for r in range(h.cfg.mp_rounds):
        for direction in ("fwd", "bwd"):
            a_real, a_virt = adjacency[direction]
            a_eff = a_real
            for dist in sorted(a_virt):
                a_eff = a_eff + mul(vedge[dist - 2], a_virt[dist])
            msg = a_eff @ (states @ h.t(f"mp{r}.{direction}.w_msg") +
                           h.t(f"mp{r}.{direction}.b_msg"))
            joint = concat([states, msg], axis=1)
            gate = sigmoid(joint @ h.t(f"mp{r}.{direction}.w_gate") +
                           h.t(f"mp{r}.{direction}.b_gate"))
            cand = tanh(joint @ h.t(f"mp{r}.{direction}.w_cand") +
                        h.t(f"mp{r}.{direction}.b_cand"))
            states = (1.0 - gate) * states + gate * cand
    return {nid: states[index[nid]] for nid in ids}


# -- decoding -----------------------------------------------------------------


def _tile_2d(block: Tensor, rows: int, cols: int) -> Tensor:
    r0 = -(-rows // block.shape[0])
    r1 = -(-cols // block.shape[1])
    out = tile(block, (r0, r1)) if (r0, r1) != (1, 1) else block
    return out[:rows, :cols]


def _decode_conv_weight(canon: Tensor, c_out: int, c_in_g: int, kernel: int,
                        node_id: int, canonical_shape) -> Tensor:
    co_c, ci_c, kh_c, kw_c = canonical_shape
    if kernel > kh_c or kernel > kw_c:
        raise HypernetError(
            f"node {node_id}: kernel {kernel} exceeds the decoder's canonical "
            f"spatial extent {kh_c}x{kw_c}")
    y0 = (kh_c - kernel) // 2
    x0 = (kw_c - kernel) // 2
    block = canon[:, :, y0:y0 + kernel, x0:x0 + kernel]
    r0 = -(-c_out // co_c)
    r1 = -(-c_in_g // ci_c)
    if (r0, r1) != (1, 1):
        block = tile(block, (r0, r1, 1, 1))
    return block[:c_out, :c_in_g]


def _tile_vector(vec: Tensor, length: int) -> Tensor:
    reps = -(-length // vec.shape[0])
    out = tile(vec, (reps,)) if reps > 1 else vec
    return out[:length]


def _fan_in_normalize(t: Tensor, fan_in: int) -> Tensor:
    # std floored at 1e-8; the floor enters under the sqrt so the gradient
    # stays finite for (near-)constant tensors
    centered = t - t.mean()
    std = sqrt((centered * centered).mean() + 1e-16)
    return t * (float(np.sqrt(2.0 / fan_in)) / std)


def decode_params(h: Hypernet, g: ArchGraph, states: dict[int, Tensor], *,
                  apply_normalization: Optional[bool] = None) -> dict[int, list[Tensor]]:
    """Emit every parameterized node's tensors from its state.

    ``apply_normalization=False`` exposes the raw tiled tensors (used by the
    tiling-invariant checks); the default follows the config.
    """
    normalize = (h.cfg.normalization == "fan_in_variance"
                 if apply_normalization is None else apply_normalization)
    pnodes = sorted(g.parameterized_nodes(), key=lambda n: n.id)
    if not pnodes:
        return {}
    missing = [n.id for n in pnodes if n.id not in states]
    if missing:
        raise HypernetError(f"states missing for nodes {missing}")
    d = h.cfg.embed_dim
    stacked = concat([states[n.id].reshape(1, d) for n in pnodes], axis=0)
    hidden = relu(stacked @ h.t("dec.w1") + h.t("dec.b1"))
    canon_rows = hidden @ h.t("dec.w2") + h.t("dec.b2")
    gamma_rows = stacked @ h.t("head_gamma.w") + h.t("head_gamma.b")
    beta_rows = stacked @ h.t("head_beta.w") + h.t("head_beta.b")
    bias_rows = stacked @ h.t("head_bias.w") + h.t("head_bias.b")

    co_c, ci_c, kh_c, kw_c = h.cfg.canonical_shape
    out: dict[int, list[Tensor]] = {}
    for row, node in enumerate(pnodes):
        a = node.attrs
        if node.kind in CONV_KINDS:
            canon = canon_rows[row].reshape(h.cfg.canonical_shape)
            c_in_g = a["c_in"] // a["groups"]
            weight = _decode_conv_weight(canon, a["c_out"], c_in_g, a["kernel"],
                                         node.id, h.cfg.canonical_shape)
            if normalize:
                weight = _fan_in_normalize(weight, c_in_g * a["kernel"] * a["kernel"])
            tensors = [weight]
            if a.get("bias"):
                tensors.append(_tile_vector(bias_rows[row], a["c_out"]))
            out[node.id] = tensors
        elif node.kind is OpKind.LINEAR:
            flat = canon_rows[row].reshape(co_c, ci_c * kh_c * kw_c)
            weight = _tile_2d(flat, a["out_features"], a["in_features"])
            if normalize:
                weight = _fan_in_normalize(weight, a["in_features"])
            tensors = [weight]
            if a.get("bias"):
                tensors.append(_tile_vector(bias_rows[row], a["out_features"]))
            out[node.id] = tensors
        elif node.kind is OpKind.BATCHNORM:
            c = a["channels"]
            gamma = 1.0 + _tile_vector(gamma_rows[row], c)
            beta = _tile_vector(beta_rows[row], c)
            out[node.id] = [gamma, beta]
        else:
            raise HypernetError(f"node {node.id}: no decoder for {node.kind}")
    return out


def predict(h: Hypernet, g: ArchGraph) -> dict[int, list[Tensor]]:
    """Single-pass parameter prediction: encode then decode, end to end
    differentiable into the hypernetwork weights."""
    return decode_params(h, g, encode_graph(h, g))


# -- checkpointing ------------------------------------------------------------


def save_checkpoint(path: str, h: Hypernet, extras: Optional[dict] = None,
                    meta: Optional[dict] = None) -> None:
    """Write the versioned binary container (atomic replace)."""
    extras = extras or {}
    tensors = h.params()
    header = {
        "config": {
            "embed_dim": h.cfg.embed_dim,
            "mp_rounds": h.cfg.mp_rounds,
            "canonical_shape": list(h.cfg.canonical_shape),
            "s_max": h.cfg.s_max,
            "normalization": h.cfg.normalization,
            "decoder_hidden": h.cfg.decoder_hidden,
        },
        "tensors": [{"name": k, "shape": list(v.shape), "dtype": str(v.dtype)}
                    for k, v in tensors.items()],
        "extras": [{"name": k, "shape": list(np.asarray(v).shape),
                    "dtype": str(np.asarray(v).dtype)}
                   for k, v in extras.items()],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for v in tensors.values():
            f.write(np.ascontiguousarray(v.data).tobytes())
        for v in extras.values():
            f.write(np.ascontiguousarray(np.asarray(v)).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[Hypernet, dict[str, np.ndarray], dict]:
    """Read a checkpoint; returns (hypernet, extras, meta)."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint '{path}': {exc}") from exc
    if len(raw) < 20 or raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"'{path}' is not a checkpoint (bad magic)")
    version = struct.unpack("<I", raw[8:12])[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
    header_len = struct.unpack("<Q", raw[12:20])[0]
    try:
        header = json.loads(raw[20:20 + header_len])
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    cfg = HypernetConfig(
        embed_dim=header["config"]["embed_dim"],
        mp_rounds=header["config"]["mp_rounds"],
        canonical_shape=tuple(header["config"]["canonical_shape"]),
        s_max=header["config"]["s_max"],
        normalization=header["config"]["normalization"],
        decoder_hidden=header["config"]["decoder_hidden"],
    )
    offset = 20 + header_len
    tensors: dict[str, Tensor] = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape)) if shape else dtype.itemsize
        if offset + nbytes > len(raw):
            raise CheckpointError("checkpoint truncated inside tensor data")
        data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)),
                             offset=offset).reshape(shape).copy()
        offset += nbytes
        tensors[entry["name"]] = Tensor(data, requires_grad=True, dtype=dtype)
    extras: dict[str, np.ndarray] = {}
    for entry in header["extras"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = dtype.itemsize * count
        if offset + nbytes > len(raw):
            raise CheckpointError("checkpoint truncated inside extra data")
        extras[entry["name"]] = np.frombuffer(
            raw, dtype=dtype, count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    return Hypernet(cfg, tensors), extras, header.get("meta", {})
