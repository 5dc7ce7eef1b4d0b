"""Non-learned baselines: constant velocity and the Intelligent Driver Model.

The IDM interaction term follows the printed form

    a_int = -a_max * ((s0 + v*tau) / s + v*dv / (2*s*sqrt(a_max*b)))

i.e. the desired-gap ratio enters linearly rather than squared.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .scenegraph import SceneFrame, VehicleState

MIN_GAP_M = 0.1


@dataclass(frozen=True)
class IdmParams:
    v0: float
    a_max: float
    tau: float
    b: float
    s0: float
    delta: float = 4.0

    def __post_init__(self):
        for f in fields(self):
            val = float(getattr(self, f.name))
            object.__setattr__(self, f.name, val)
            if not (math.isfinite(val) and val > 0):
                raise ValueError(f"IDM parameter {f.name} must be positive, got {val}")

    def to_text(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "IdmParams":
        vals = {}
        names = {f.name for f in fields(cls)}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or key not in names:
                raise ValueError(f"line {lineno}: unknown or malformed entry {line!r}")
            vals[key] = float(value)
        return cls(**vals)


# Car-following parameters for the two datasets (delta is not tabulated).
NGSIM_IDM = IdmParams(v0=17.8, a_max=0.76, tau=0.92, b=3.81, s0=5.249)
HIGHD_IDM = IdmParams(v0=58.87, a_max=0.14, tau=0.12, b=12.17, s0=14.46)

# Outer bounds for parameter search.
SEARCH_BOUNDS = {
    "v0": (1.0, 70.0),
    "a_max": (0.05, 5.0),
    "tau": (0.05, 3.0),
    "b": (0.5, 15.0),
    "s0": (0.5, 20.0),
}


def save_idm_params(p: IdmParams, path) -> None:
    Path(path).write_text(p.to_text(), encoding="utf-8", newline="\n")


def load_idm_params(path) -> IdmParams:
    return IdmParams.from_text(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class RolloutConfig:
    dt: float = 0.1
    horizon: float = 5.0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.horizon <= 0 or abs(self.horizon - round(self.horizon)) > 1e-9:
            raise ValueError("horizon must be a positive whole number of seconds")
        if abs(1.0 / self.dt - round(1.0 / self.dt)) > 1e-9:
            raise ValueError("dt must divide one second")

    @property
    def steps_per_second(self) -> int:
        return int(round(1.0 / self.dt))

    @property
    def horizon_steps(self) -> int:
        return int(round(self.horizon))


# ---------------------------------------------------------------------------
# constant velocity


def cvm_predict(state: VehicleState, horizon_steps: int = 5) -> np.ndarray:
    """Positions ``(horizon_steps, 2)`` at 1 Hz, continuing the current velocity."""
    if horizon_steps < 1:
        raise ValueError("horizon_steps must be >= 1")
    k = np.arange(1, horizon_steps + 1, dtype=float)
    return np.column_stack([state.x + k * state.vx, state.y + k * state.vy])


def cvm_predict_arrays(pos: np.ndarray, vel: np.ndarray, horizon_steps: int = 5) -> np.ndarray:
    """Vectorised :func:`cvm_predict`: ``(M, 2)`` inputs to ``(M, horizon, 2)``."""
    k = np.arange(1, horizon_steps + 1, dtype=float)[None, :, None]
    return pos[:, None, :] + k * vel[:, None, :]


# ---------------------------------------------------------------------------
# IDM


def idm_acceleration(v: float, s: float, dv: float, leader_present: bool,
                     p: IdmParams) -> float:
    """Longitudinal acceleration: free-road term plus, with a leader, the
    interaction term. ``dv`` is the closing speed ``v - v_leader``."""
    a_free = p.a_max * (1.0 - (v / p.v0) ** p.delta)
    if not leader_present:
        return a_free
    if not s > 0:
        raise ValueError(f"gap must be positive when a leader is present, got {s}")
    a_int = -p.a_max * ((p.s0 + v * p.tau) / s + v * dv / (2.0 * s * math.sqrt(p.a_max * p.b)))
    return a_free + a_int


def idm_acceleration_array(v: np.ndarray, s: np.ndarray, dv: np.ndarray,
                           has_leader: np.ndarray, p: IdmParams) -> np.ndarray:
    """Elementwise :func:`idm_acceleration`; gaps are floored at 0.1 m."""
    a_free = p.a_max * (1.0 - (v / p.v0) ** p.delta)
    s = np.maximum(np.where(has_leader, s, 1.0), MIN_GAP_M)
    a_int = -p.a_max * ((p.s0 + v * p.tau) / s + v * dv / (2.0 * s * math.sqrt(p.a_max * p.b)))
    return a_free + np.where(has_leader, a_int, 0.0)


def resolve_leaders(x: np.ndarray, group: np.ndarray, tie: np.ndarray | None = None) -> np.ndarray:
    """Index of the nearest vehicle ahead in the same group, or -1.

    ``group`` identifies a lane (within a scene); ties in ``x`` are ordered
    by ``tie`` (e.g. vehicle id).
    """
    tie = np.arange(len(x)) if tie is None else tie
    order = np.lexsort((tie, x, group))
    leader = np.full(len(x), -1, dtype=np.intp)
    if len(x) > 1:
        same = group[order[1:]] == group[order[:-1]]
        leader[order[:-1][same]] = order[1:][same]
    return leader


def rollout_arrays(x: np.ndarray, v: np.ndarray, group: np.ndarray, p: IdmParams,
                   cfg: RolloutConfig = RolloutConfig(), tie: np.ndarray | None = None) -> np.ndarray:
    """Jointly integrate longitudinal motion; returns ``(M, horizon)`` x at 1 Hz.

    Explicit Euler: acceleration from the current state, then
    ``x += v*dt`` and ``v = max(v + a*dt, 0)``. Leaders are re-resolved
    every step.
    """
    x = np.array(x, dtype=float)
    v = np.array(v, dtype=float)
    group = np.asarray(group)
    out = np.empty((len(x), cfg.horizon_steps))
    for k in range(cfg.horizon_steps):
        for _ in range(cfg.steps_per_second):
            lead = resolve_leaders(x, group, tie)
            has = lead >= 0
            li = np.where(has, lead, 0)
            a = idm_acceleration_array(v, x[li] - x, v - v[li], has, p)
            x = x + v * cfg.dt
            v = np.maximum(v + a * cfg.dt, 0.0)
        out[:, k] = x
    return out


def idm_rollout(frame: SceneFrame, p: IdmParams, cfg: RolloutConfig = RolloutConfig()) -> dict[int, np.ndarray]:
    """IDM prediction for every vehicle in ``frame``: ``{vehicle_id: (horizon, 2)}``.

    Lateral position is held constant; leaders are same-lane predecessors.
    """
    if len(frame) == 0:
        return {}
    ids = np.array(frame.vehicle_ids)
    x = np.array([s.x for s in frame.states])
    y = np.array([s.y for s in frame.states])
    v = np.array([s.vx for s in frame.states])
    lanes = np.array([s.lane_id for s in frame.states])
    xs = rollout_arrays(x, v, lanes, p, cfg, tie=ids)
    return {int(i): np.column_stack([xs[k], np.full(cfg.horizon_steps, y[k])])
            for k, i in enumerate(ids)}


# ---------------------------------------------------------------------------
# tuning


@dataclass
class RolloutProblem:
    """Flattened IDM evaluation set built from prediction windows.

    ``x``, ``y``, ``v``, ``group`` hold the last observed state of every
    vehicle (groups separate scenes and lanes); ``target`` is the true
    future ``(M, 5, 2)`` and ``mask`` selects the vehicles that are scored.
    """

    x: np.ndarray
    y: np.ndarray
    v: np.ndarray
    group: np.ndarray
    tie: np.ndarray
    target: np.ndarray
    mask: np.ndarray

    @classmethod
    def from_windows(cls, windows: Sequence) -> "RolloutProblem":
        if len(windows) == 0:
            raise ValueError("no scenes to evaluate")
        xs, ys, vs, groups, ties, targets, masks = [], [], [], [], [], [], []
        for w_idx, w in enumerate(windows):
            last = w.samples[:, 4, :]
            xs.append(last[:, 0])
            ys.append(last[:, 1])
            vs.append(last[:, 2])
            groups.append(w_idx * 1000 + w.lanes[:, 4])
            ties.append(w.vehicle_ids)
            targets.append(w.samples[:, 5:, :2])
            masks.append(w.loss_mask)
        return cls(np.concatenate(xs), np.concatenate(ys), np.concatenate(vs),
                   np.concatenate(groups).astype(np.int64), np.concatenate(ties),
                   np.concatenate(targets), np.concatenate(masks))

    def predict(self, p: IdmParams, cfg: RolloutConfig = RolloutConfig()) -> np.ndarray:
        xs = rollout_arrays(self.x, self.v, self.group, p, cfg, self.tie)
        return np.stack([xs, np.repeat(self.y[:, None], xs.shape[1], axis=1)], axis=-1)

    def mean_displacement(self, p: IdmParams, cfg: RolloutConfig = RolloutConfig()) -> float:
        pred = self.predict(p, cfg)[self.mask]
        err = np.hypot(*(pred - self.target[self.mask]).transpose(2, 0, 1))
        return float(err.mean(axis=1).mean())


@dataclass
class TuneResult:
    params: IdmParams
    objective: float
    history: list[tuple[IdmParams, float]]


def tune_idm(scenes, sample_budget: int = 20000, seed: int = 0,
             rounds: int = 10, bounds: dict | None = None,
             delta: float = 4.0, return_history: bool = False):
    """Guided random search over IDM parameters.

    ``rounds`` stages draw ``sample_budget / rounds`` uniform samples each;
    after every stage the box halves in width around the incumbent, clipped
    to the outer bounds. The objective is the mean displacement of the IDM
    rollout on ``scenes`` (windows or a prepared :class:`RolloutProblem`).
    """
    if sample_budget < 1:
        raise ValueError("sample_budget must be >= 1")
    problem = scenes if isinstance(scenes, RolloutProblem) else RolloutProblem.from_windows(scenes)
    if not problem.mask.any():
        raise ValueError("no loss-masked vehicles in the tuning scenes")
    outer = dict(SEARCH_BOUNDS if bounds is None else bounds)
    names = list(SEARCH_BOUNDS)
    lo = np.array([outer[k][0] for k in names])
    hi = np.array([outer[k][1] for k in names])
    glo, ghi = lo.copy(), hi.copy()
    rng = np.random.default_rng(seed)
    per_round = [sample_budget // rounds + (1 if r < sample_budget % rounds else 0)
                 for r in range(rounds)]
    best: tuple[IdmParams, float] | None = None
    history = []
    for count in per_round:
        if count == 0:
            continue
        for _ in range(count):
            vals = rng.uniform(lo, hi)
            cand = IdmParams(*vals, delta=delta)
            obj = problem.mean_displacement(cand)
            history.append((cand, obj))
            if best is None or obj < best[1]:
                best = (cand, obj)
        centre = np.array([getattr(best[0], k) for k in names])
        half = (hi - lo) / 4.0
        lo = np.maximum(centre - half, glo)
        hi = np.minimum(centre + half, ghi)
    result = TuneResult(best[0], best[1], history)
    return result if return_history else result.params
