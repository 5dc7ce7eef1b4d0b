"""Node features and regression targets for prediction windows.

History positions are taken relative to the last observed position, so a
node carries no absolute location; relative placement between vehicles
reaches the models only through the graph (edge features).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datapipe.windows import HISTORY, Window
from .scenegraph import InteractionGraph, Strategy, build_graph, inverse_distance_weights

POSITION_SCALE = 100.0  # metres per normalised output unit
VELOCITY_SCALE = 10.0


def node_features(w: Window) -> np.ndarray:
    """``(V, 20)``: per history step ``(dx, dy, vx, vy)``, positions relative to the last one."""
    hist = w.samples[:, :HISTORY, :].copy()
    last = hist[:, -1, :2]
    hist[:, :, :2] = (hist[:, :, :2] - last[:, None, :]) / POSITION_SCALE
    hist[:, :, 2:] /= VELOCITY_SCALE
    return hist.reshape(len(hist), -1)


def displacement_targets(w: Window) -> np.ndarray:
    """``(V, 10)`` normalised future displacements ``(dx1, dy1, ..., dx5, dy5)``; NaN if unknown."""
    last = w.samples[:, HISTORY - 1, :2]
    fut = w.samples[:, HISTORY:, :2] - last[:, None, :]
    return fut.reshape(len(fut), -1) / POSITION_SCALE


def to_positions(pred: np.ndarray, last: np.ndarray) -> np.ndarray:
    """Normalised ``(V, 10)`` outputs to absolute positions ``(V, 5, 2)`` in metres."""
    return last[:, None, :] + pred.reshape(len(pred), -1, 2) * POSITION_SCALE


def window_graph(w: Window, strategy, weighted: bool = False) -> InteractionGraph:
    """Graph over all window vehicles at the last observed sample."""
    frame = w.frame(HISTORY - 1)
    g = build_graph(frame, Strategy.parse(strategy))
    if weighted:
        g = inverse_distance_weights(g, frame)
    return g


@dataclass
class Sample:
    """Model-ready arrays for one window."""

    window: Window
    features: np.ndarray
    targets: np.ndarray
    graph: InteractionGraph | None

    @property
    def last_position(self) -> np.ndarray:
        return self.window.samples[:, HISTORY - 1, :2]

    @property
    def loss_mask(self) -> np.ndarray:
        return self.window.loss_mask
