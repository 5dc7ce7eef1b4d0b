"""Learnable trajectory predictors: feed-forward, GCN and GAT.

Every model maps per-vehicle history features ``(N, 20)`` to normalised
future displacements ``(N, 10)``. Graph models stack ``num_layers`` message
passing layers of width ``hidden_dim`` and, by default, a per-node linear
output head.
"""
from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import numkern as nk
from .numkern import Param, Tensor
from .scenegraph import (InteractionGraph, Strategy, add_self_loops, gcn_normalization,
                         remove_self_loops)

MODEL_KINDS = ("ff", "gcn", "gat")
HORIZON = 5
MAGIC = b"TRAJGNN\x00"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    model_kind: str = "gat"
    hidden_dim: int = 256
    num_layers: int = 2
    heads: int = 4
    use_residual: bool = True
    use_ff_output: bool = True
    use_edge_features: bool = True
    use_weighted_edges: bool = False
    input_dim: int = 20
    output_dim: int = 2 * HORIZON
    attention_slope: float = 0.2
    strategy: str = "neighbour"
    use_layer_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy.parse(self.strategy).value)
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}")
        if min(self.hidden_dim, self.num_layers, self.heads, self.input_dim) < 1:
            raise ValueError("model dimensions must be positive")
        if self.output_dim != 2 * HORIZON:
            raise ValueError(f"output_dim must be {2 * HORIZON}")
        if self.model_kind == "gat" and self.hidden_dim % self.heads:
            raise ValueError("hidden_dim must be divisible by heads")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.heads

    @property
    def edge_feature_dim(self) -> int:
        return 2 if (self.model_kind == "gat" and self.use_edge_features) else 0


# ---------------------------------------------------------------------------
# graph preparation


def prepare_graph(g: InteractionGraph, cfg: ModelConfig) -> InteractionGraph:
    """Apply the self-loop and normalisation rules a model kind expects.

    GCN with residual weights drops self-loops and normalises; without them
    it adds unit self-loops first. GAT keeps the ego out of the softmax when
    it has residual weights and puts it in otherwise. Edge weights must
    already be set if ``use_weighted_edges``; otherwise they are reset to 1.
    """
    if cfg.model_kind == "gcn":
        if not cfg.use_weighted_edges:
            g = replace(g, edge_weight=np.ones(g.num_edges), _cache={})
        mode = "adapted_no_selfloops" if cfg.use_residual else "base_with_selfloops"
        return gcn_normalization(g, mode)
    if cfg.model_kind == "gat":
        return remove_self_loops(g) if cfg.use_residual else add_self_loops(g)
    return g


def _edge_index(g: InteractionGraph) -> nk.EdgeIndex:
    idx = g._cache.get("edge_index")
    if idx is None:
        idx = nk.EdgeIndex(g.src, g.dst, g.num_nodes)
        g._cache["edge_index"] = idx
    return idx


def _segments(g: InteractionGraph) -> nk.SegmentLayout:
    seg = g._cache.get("segments")
    if seg is None:
        seg = nk.SegmentLayout(g.dst, g.num_nodes)
        g._cache["segments"] = seg
    return seg


# ---------------------------------------------------------------------------
# layers


def ff_forward(x, params: dict[str, Param], num_layers: int = 2) -> Tensor:
    """Interaction-blind MLP applied to every node independently."""
    h = nk.as_tensor(x)
    if h.shape[1] != params["ff0.W"].shape[0]:
        raise ValueError(f"expected {params['ff0.W'].shape[0]} input features, got {h.shape[1]}")
    for k in range(num_layers):
        h = nk.relu(h @ params[f"ff{k}.W"] + params[f"ff{k}.b"])
    return h @ params["out.W"] + params["out.b"]


def gcn_layer(h, g: InteractionGraph, W: Param, W_s: Param | None = None,
              mode: str = "adapted", activate: bool = True, b: Param | None = None) -> Tensor:
    """One graph convolution over a normalised graph.

    ``base``: ``sigma(sum_j c_ij h_j W)`` over all in-edges (self-loops
    included). ``adapted``: self-loops are skipped and ``h_i W_s`` is added.
    An optional bias ``b`` is added before the activation.
    """
    h = nk.as_tensor(h)
    if g.norm_coeff is None:
        raise ValueError("graph has no norm_coeff; run gcn_normalization first")
    if mode == "adapted" and W_s is None:
        raise ValueError("adapted GCN layer requires residual weights W_s")
    if mode == "adapted" and g.is_self_loop().any():
        g = remove_self_loops(g)
    hw = h @ W
    out = nk.edge_aggregate(g.norm_coeff, hw, _edge_index(g))
    if mode == "adapted":
        out = out + h @ W_s
    if b is not None:
        out = out + b
    return nk.relu(out) if activate else out


def gat_layer(h, g: InteractionGraph, W: Param, att: Param, W_s: Param | None = None,
              heads: int = 4, use_edge_features: bool = True, slope: float = 0.2,
              final: bool = False, b: Param | None = None) -> Tensor:
    """Multi-head graph attention over in-edges.

    ``W`` holds the heads side by side (column block ``k`` is head ``k``);
    ``att[k]`` scores ``concat(W_k h_i, W_k h_j, e_ij)`` for an edge
    ``j -> i``. Hidden layers concatenate heads and apply ReLU; a ``final``
    layer averages heads and stays linear. ``W_s`` adds ``h_i W_s`` and
    ``b`` a bias before the activation.
    """
    h = nk.as_tensor(h)
    n = h.shape[0]
    width = W.shape[1] // heads
    hw = h @ W
    if g.num_edges:
        hw3 = hw.reshape(n, heads, width)
        a_dst = nk.reshape(nk.take_columns(att, 0, width), (1, heads, width))
        a_src = nk.reshape(nk.take_columns(att, width, 2 * width), (1, heads, width))
        score_dst = nk.sum(hw3 * a_dst, axis=2)
        score_src = nk.sum(hw3 * a_src, axis=2)
        logits = nk.gather_rows(score_dst, g.dst) + nk.gather_rows(score_src, g.src)
        if use_edge_features:
            a_edge = nk.take_columns(att, 2 * width, att.shape[1])
            logits = logits + nk.matmul(Tensor(g.edge_feature), nk.transpose(a_edge))
        alpha = nk.segment_softmax(nk.leaky_relu(logits, slope), _segments(g))
        agg = nk.edge_aggregate(alpha, hw, _edge_index(g), heads)
    else:
        agg = Tensor(np.zeros(hw.shape))
    if final:
        agg = nk.mean(agg.reshape(n, heads, width), axis=1)
    if W_s is not None:
        agg = agg + h @ W_s
    if b is not None:
        agg = agg + b
    return agg if final else nk.relu(agg)


def attention_coefficients(h, g: InteractionGraph, W: Param, att: Param, heads: int,
                           use_edge_features: bool = True, slope: float = 0.2) -> np.ndarray:
    """The ``(E, heads)`` softmax weights a GAT layer would use (no tape)."""
    with nk.no_grad():
        h = nk.as_tensor(h)
        n = h.shape[0]
        width = W.shape[1] // heads
        hw = (h.data @ W.data).reshape(n, heads, width)
        a = att.data
        logits = (hw * a[None, :, :width]).sum(2)[g.dst] + (hw * a[None, :, width:2 * width]).sum(2)[g.src]
        if use_edge_features:
            logits = logits + g.edge_feature @ a[:, 2 * width:].T
        return nk.segment_softmax(nk.leaky_relu(Tensor(logits), slope), g.dst, n).data


# ---------------------------------------------------------------------------
# assembled model


class TrajectoryModel:
    """A configured predictor with its parameters in declaration order."""

    def __init__(self, config: ModelConfig, params: "OrderedDict[str, Param]"):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "TrajectoryModel":
        rng = np.random.default_rng(seed)
        params: OrderedDict[str, Param] = OrderedDict()
        for name, shape in parameter_shapes(config):
            if name.endswith(".b"):
                params[name] = Param(np.zeros(shape))
            elif name.endswith(".att"):
                params[name] = Param(nk.glorot_init(shape[1], shape[0], rng).data.T)
            else:
                params[name] = Param(nk.glorot_init(shape[0], shape[1], rng).data)
        return cls(config, params)

    def parameters(self) -> list[Param]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        nk.zero_grad(self.parameters())

    def state_copy(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, values) -> None:
        for p, v in zip(self.parameters(), values):
            p.data[...] = v

    def prepare(self, g: InteractionGraph) -> InteractionGraph:
        return prepare_graph(g, self.config)

    def forward(self, x, g: InteractionGraph | None) -> Tensor:
        """Predictions for prepared graph ``g`` (ignored by FF models)."""
        cfg, p = self.config, self.params
        x = nk.as_tensor(x)
        if x.data.ndim != 2 or x.shape[1] != cfg.input_dim:
            raise ValueError(f"expected features of shape (N, {cfg.input_dim}), got {x.shape}")
        if cfg.model_kind == "ff":
            return ff_forward(x, p, cfg.num_layers)
        if g is None or g.num_nodes != x.shape[0]:
            raise ValueError("graph and features disagree on the number of nodes")
        h = x
        for k in range(cfg.num_layers):
            final = (k == cfg.num_layers - 1) and not cfg.use_ff_output
            W_s, b = p.get(f"g{k}.Ws"), p.get(f"g{k}.b")
            if cfg.model_kind == "gcn":
                h = gcn_layer(h, g, p[f"g{k}.W"], W_s,
                              "adapted" if cfg.use_residual else "base", not final, b)
            else:
                h = gat_layer(h, g, p[f"g{k}.W"], p[f"g{k}.att"], W_s, cfg.heads,
                              cfg.use_edge_features, cfg.attention_slope, final, b)
        if cfg.use_ff_output:
            h = h @ p["out.W"] + p["out.b"]
        return h

    __call__ = forward


def parameter_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in declaration (and file) order."""
    shapes: list[tuple[str, tuple[int, ...]]] = []
    f_in = cfg.input_dim
    if cfg.model_kind == "ff":
        for k in range(cfg.num_layers):
            shapes += [(f"ff{k}.W", (f_in, cfg.hidden_dim)), (f"ff{k}.b", (cfg.hidden_dim,))]
            f_in = cfg.hidden_dim
        return shapes + [("out.W", (f_in, cfg.output_dim)), ("out.b", (cfg.output_dim,))]
    for k in range(cfg.num_layers):
        final = (k == cfg.num_layers - 1) and not cfg.use_ff_output
        f_out = cfg.output_dim if final else cfg.hidden_dim
        if cfg.model_kind == "gcn":
            shapes.append((f"g{k}.W", (f_in, f_out)))
        else:
            width = cfg.output_dim if final else cfg.head_dim
            shapes.append((f"g{k}.W", (f_in, cfg.heads * width)))
            shapes.append((f"g{k}.att", (cfg.heads, 2 * width + cfg.edge_feature_dim)))
        if cfg.use_residual:
            shapes.append((f"g{k}.Ws", (f_in, f_out)))
        if cfg.use_layer_bias:
            shapes.append((f"g{k}.b", (f_out,)))
        f_in = f_out
    if cfg.use_ff_output:
        shapes += [("out.W", (f_in, cfg.output_dim)), ("out.b", (cfg.output_dim,))]
    return shapes


def predict(features, g: InteractionGraph | None, model: TrajectoryModel,
            prepared: bool = False) -> np.ndarray:
    """Normalised displacement predictions ``(N, 10)`` without recording a tape."""
    if g is not None and not prepared:
        g = model.prepare(g)
    with nk.no_grad():
        return model.forward(features, g).data


# ---------------------------------------------------------------------------
# binary parameter files


def model_to_bytes(model: TrajectoryModel) -> bytes:
    buf = io.BytesIO()
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(cfg)))
    buf.write(cfg)
    for p in model.parameters():
        buf.write(struct.pack("<I", p.data.ndim))
        buf.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        buf.write(p.data.astype("<f8").tobytes())
    return buf.getvalue()


def model_from_bytes(raw: bytes) -> TrajectoryModel:
    view = memoryview(raw)
    if bytes(view[:8]) != MAGIC:
        raise ValueError("not a trajectory model file")
    version, n = struct.unpack_from("<II", view, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model file version {version}")
    pos = 16
    cfg = ModelConfig(**json.loads(bytes(view[pos:pos + n]).decode()))
    pos += n
    params: OrderedDict[str, Param] = OrderedDict()
    for name, shape in parameter_shapes(cfg):
        (ndim,) = struct.unpack_from("<I", view, pos)
        dims = struct.unpack_from(f"<{ndim}I", view, pos + 4)
        pos += 4 + 4 * ndim
        if tuple(dims) != shape:
            raise ValueError(f"parameter {name}: stored shape {dims} != expected {shape}")
        count = int(np.prod(dims))
        data = np.frombuffer(view, dtype="<f8", count=count, offset=pos).reshape(dims)
        params[name] = Param(data.astype(np.float64))
        pos += 8 * count
    if pos != len(raw):
        raise ValueError("trailing bytes in model file")
    return TrajectoryModel(cfg, params)


def save_model(model: TrajectoryModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> TrajectoryModel:
    return model_from_bytes(Path(path).read_bytes())
