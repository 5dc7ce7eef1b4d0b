"""Interaction graphs over the vehicles of one scene.

Edges point from a neighbouring vehicle to the ego vehicle it may influence,
so every node aggregates over its in-edges. Node order is ascending
``vehicle_id``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

NEIGHBOR_CUTOFF_M = 100.0
ALONGSIDE_M = 5.0
DISTANCE_CLAMP_M = 1.0
EDGE_FEATURE_SCALE = 1.0 / 100.0


@dataclass(frozen=True)
class VehicleState:
    vehicle_id: int
    x: float
    y: float
    vx: float = 0.0
    vy: float = 0.0
    lane_id: int = 1

    def __post_init__(self):
        vals = (self.x, self.y, self.vx, self.vy)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"vehicle {self.vehicle_id}: non-finite kinematics")
        if self.lane_id < 1:
            raise ValueError(f"vehicle {self.vehicle_id}: lane_id must be >= 1")


@dataclass(frozen=True)
class SceneFrame:
    """All vehicles observed at one timestamp."""

    timestamp: float
    states: tuple[VehicleState, ...]

    def __init__(self, timestamp: float, states: Iterable[VehicleState]):
        states = tuple(sorted(states, key=lambda s: s.vehicle_id))
        ids = [s.vehicle_id for s in states]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate vehicle_id in frame")
        object.__setattr__(self, "timestamp", float(timestamp))
        object.__setattr__(self, "states", states)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def vehicle_ids(self) -> list[int]:
        return [s.vehicle_id for s in self.states]

    def positions(self) -> np.ndarray:
        return np.array([[s.x, s.y] for s in self.states], dtype=float).reshape(-1, 2)

    @classmethod
    def from_arrays(cls, timestamp, vehicle_ids, x, y, vx, vy, lane_ids):
        return cls(timestamp, [
            VehicleState(int(i), float(a), float(b), float(c), float(d), int(ln))
            for i, a, b, c, d, ln in zip(vehicle_ids, x, y, vx, vy, lane_ids)])


class Strategy(enum.Enum):
    """Rule for connecting vehicles."""

    SELF = "self"
    ALL = "all"
    PRECEDING = "preceding"
    NEIGHBOUR = "neighbour"

    @classmethod
    def parse(cls, name: "str | Strategy") -> "Strategy":
        if isinstance(name, cls):
            return name
        aliases = {"selfconnections": "self", "allconnections": "all",
                   "precedingconnection": "preceding", "neighbor": "neighbour",
                   "neighbourconnection": "neighbour", "close": "neighbour"}
        key = str(name).lower().replace("_", "").replace("-", "")
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown strategy {name!r}") from None


@dataclass
class InteractionGraph:
    """Directed graph; edge ``e`` runs from node ``src[e]`` to node ``dst[e]``.

    ``edge_weight`` defaults to ones, ``edge_feature`` to zeros and
    ``norm_coeff`` is ``None`` until :func:`gcn_normalization` fills it.
    """

    node_ids: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    edge_weight: np.ndarray = None
    edge_feature: np.ndarray = None
    norm_coeff: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.node_ids = np.asarray(self.node_ids, dtype=np.int64)
        self.src = np.asarray(self.src, dtype=np.intp).reshape(-1)
        self.dst = np.asarray(self.dst, dtype=np.intp).reshape(-1)
        e = len(self.src)
        if self.edge_weight is None:
            self.edge_weight = np.ones(e)
        if self.edge_feature is None:
            self.edge_feature = np.zeros((e, 2))
        self.edge_weight = np.asarray(self.edge_weight, dtype=float)
        self.edge_feature = np.asarray(self.edge_feature, dtype=float).reshape(e, 2)

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def num_edges(self) -> int:
        return len(self.src)

    @property
    def edges(self) -> list[tuple[int, int]]:
        return list(zip(self.src.tolist(), self.dst.tolist()))

    def is_self_loop(self) -> np.ndarray:
        return self.src == self.dst

    def with_edges(self, keep: np.ndarray) -> "InteractionGraph":
        """Subgraph with the selected edges and all nodes."""
        return InteractionGraph(
            self.node_ids, self.src[keep], self.dst[keep], self.edge_weight[keep],
            self.edge_feature[keep],
            None if self.norm_coeff is None else self.norm_coeff[keep])

    def in_degree_count(self) -> np.ndarray:
        return np.bincount(self.dst, minlength=self.num_nodes)

    def permuted(self, perm: Sequence[int]) -> "InteractionGraph":
        """Relabel nodes so that old node ``i`` becomes node ``perm[i]``."""
        perm = np.asarray(perm, dtype=np.intp)
        ids = np.empty_like(self.node_ids)
        ids[perm] = self.node_ids
        return InteractionGraph(
            ids, perm[self.src], perm[self.dst], self.edge_weight.copy(),
            self.edge_feature.copy(),
            None if self.norm_coeff is None else self.norm_coeff.copy())


def disjoint_union(graphs: Sequence[InteractionGraph]) -> tuple[InteractionGraph, np.ndarray]:
    """Merge graphs block-wise; returns the union and each graph's node offset."""
    sizes = np.array([g.num_nodes for g in graphs], dtype=np.intp)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.intp)
    norm = None
    if all(g.norm_coeff is not None for g in graphs):
        norm = np.concatenate([g.norm_coeff for g in graphs])
    merged = InteractionGraph(
        np.concatenate([g.node_ids for g in graphs]),
        np.concatenate([g.src + o for g, o in zip(graphs, offsets)]),
        np.concatenate([g.dst + o for g, o in zip(graphs, offsets)]),
        np.concatenate([g.edge_weight for g in graphs]),
        np.concatenate([g.edge_feature for g in graphs]).reshape(-1, 2),
        norm)
    return merged, offsets


# ---------------------------------------------------------------------------
# neighbour search


def _nearest(cands: list[tuple[float, int, VehicleState]]) -> VehicleState | None:
    if not cands:
        return None
    return min(cands, key=lambda c: (c[0], c[1]))[2]


def find_neighbors(frame: SceneFrame, ego: VehicleState,
                   cutoff: float = NEIGHBOR_CUTOFF_M,
                   alongside: float = ALONGSIDE_M) -> dict[str, VehicleState]:
    """Up to eight surrounding vehicles keyed by slot.

    Slots are ``ahead``/``behind`` in the ego lane and ``ahead``/``behind``/
    ``alongside`` suffixed with ``_left`` (lane + 1) or ``_right`` (lane - 1).
    Only vehicles within ``cutoff`` metres longitudinally are considered.
    """
    if not any(s.vehicle_id == ego.vehicle_id for s in frame.states):
        raise ValueError(f"ego vehicle {ego.vehicle_id} is not in the frame")
    slots: dict[str, list] = {}
    for other in frame.states:
        if other.vehicle_id == ego.vehicle_id:
            continue
        dx = other.x - ego.x
        if abs(dx) > cutoff:
            continue
        dlane = other.lane_id - ego.lane_id
        if dlane == 0:
            side = ""
        elif dlane == 1:
            side = "_left"
        elif dlane == -1:
            side = "_right"
        else:
            continue
        key = (abs(dx), other.vehicle_id, other)
        if dx > alongside:
            slots.setdefault("ahead" + side, []).append(key)
        elif dx < -alongside:
            slots.setdefault("behind" + side, []).append(key)
        elif side:
            slots.setdefault("alongside" + side, []).append(key)
        # a same-lane vehicle inside the alongside band fills no slot
    return {k: _nearest(v) for k, v in sorted(slots.items())}


def _same_lane_predecessors(frame: SceneFrame, cutoff: float) -> list[tuple[int, int]]:
    """(predecessor_index, follower_index) pairs by node index."""
    pairs = []
    states = frame.states
    for i, ego in enumerate(states):
        best = None
        for j, other in enumerate(states):
            if j == i or other.lane_id != ego.lane_id:
                continue
            dx = other.x - ego.x
            if dx <= 0 or dx > cutoff:
                continue
            key = (dx, other.vehicle_id)
            if best is None or key < best[0]:
                best = (key, j)
        if best is not None:
            pairs.append((best[1], i))
    return pairs


def build_graph(frame: SceneFrame, strategy) -> InteractionGraph:
    """Interaction graph for ``frame`` under a connection strategy."""
    strategy = Strategy.parse(strategy)
    n = len(frame)
    if n == 0:
        raise ValueError("cannot build a graph on an empty frame")
    ids = np.array(frame.vehicle_ids, dtype=np.int64)
    if strategy is Strategy.SELF:
        pairs = [(i, i) for i in range(n)]
    elif strategy is Strategy.ALL:
        pairs = [(j, i) for i in range(n) for j in range(n) if j != i]
    elif strategy is Strategy.PRECEDING:
        pairs = _same_lane_predecessors(frame, NEIGHBOR_CUTOFF_M)
    else:
        index = {vid: k for k, vid in enumerate(frame.vehicle_ids)}
        pairs = []
        for i, ego in enumerate(frame.states):
            found = find_neighbors(frame, ego)
            srcs = sorted({index[v.vehicle_id] for v in found.values()})
            pairs.extend((j, i) for j in srcs)
    pairs.sort(key=lambda p: (p[1], p[0]))
    src = np.array([p[0] for p in pairs], dtype=np.intp)
    dst = np.array([p[1] for p in pairs], dtype=np.intp)
    return relative_position_edge_features(InteractionGraph(ids, src, dst), frame)


def _check_frame(g: InteractionGraph, frame: SceneFrame) -> np.ndarray:
    if list(g.node_ids) != frame.vehicle_ids:
        raise ValueError("graph and frame disagree on vehicles")
    return frame.positions()


def inverse_distance_weights(g: InteractionGraph, frame: SceneFrame) -> InteractionGraph:
    """Edge weight ``1 / max(distance, 1 m)``; self-loops weigh 1."""
    pos = _check_frame(g, frame)
    d = np.hypot(*(pos[g.src] - pos[g.dst]).T) if g.num_edges else np.zeros(0)
    w = 1.0 / np.maximum(d, DISTANCE_CLAMP_M)
    w[g.is_self_loop()] = 1.0
    return replace(g, edge_weight=w, _cache={})


def relative_position_edge_features(g: InteractionGraph, frame: SceneFrame) -> InteractionGraph:
    """Edge feature ``(pos[src] - pos[dst]) / 100`` for every edge."""
    pos = _check_frame(g, frame)
    feat = (pos[g.src] - pos[g.dst]) * EDGE_FEATURE_SCALE
    feat[g.is_self_loop()] = 0.0
    return replace(g, edge_feature=feat.reshape(-1, 2), _cache={})


def add_self_loops(g: InteractionGraph) -> InteractionGraph:
    """Add a unit-weight, zero-feature self-loop wherever one is missing."""
    have = np.zeros(g.num_nodes, dtype=bool)
    have[g.src[g.is_self_loop()]] = True
    missing = np.flatnonzero(~have)
    if len(missing) == 0:
        return g
    src = np.concatenate([g.src, missing])
    dst = np.concatenate([g.dst, missing])
    order = np.lexsort((src, dst))
    return InteractionGraph(
        g.node_ids, src[order], dst[order],
        np.concatenate([g.edge_weight, np.ones(len(missing))])[order],
        np.concatenate([g.edge_feature, np.zeros((len(missing), 2))])[order])


def remove_self_loops(g: InteractionGraph) -> InteractionGraph:
    loops = g.is_self_loop()
    return g if not loops.any() else g.with_edges(~loops)


def gcn_normalization(g: InteractionGraph, mode: str = "adapted_no_selfloops") -> InteractionGraph:
    """Attach ``norm_coeff = w / sqrt(d_in(dst) * d_out(src))`` to every edge.

    ``base_with_selfloops`` first adds unit self-loops; ``adapted_no_selfloops``
    drops them, since the ego node is handled by a separate weight matrix.
    Degrees are weighted and clamped away from zero.
    """
    if mode == "base_with_selfloops":
        g = add_self_loops(g)
    elif mode == "adapted_no_selfloops":
        g = remove_self_loops(g)
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    n = g.num_nodes
    d_in = np.bincount(g.dst, weights=g.edge_weight, minlength=n)
    d_out = np.bincount(g.src, weights=g.edge_weight, minlength=n)
    tiny = np.finfo(float).tiny
    d_in = np.maximum(d_in, tiny)
    d_out = np.maximum(d_out, tiny)
    coeff = g.edge_weight / np.sqrt(d_in[g.dst] * d_out[g.src])
    return replace(g, norm_coeff=coeff, _cache={})
