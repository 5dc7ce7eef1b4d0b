"""Ten-second prediction windows, the canonical scene file, and dataset splits."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from ..scenegraph import SceneFrame, VehicleState
from .ingest import RawTrackTable

WINDOW_SAMPLES = 10
HISTORY = 5
FUTURE = WINDOW_SAMPLES - HISTORY
SCENE_COLUMNS = ["window_id", "vehicle_id", "sample_index", "x", "y", "vx", "vy",
                 "lane_id", "loss_mask"]


@dataclass
class Window:
    """All vehicles of one 10 s, 1 Hz scene slice.

    ``samples[v, k]`` is ``(x, y, vx, vy)`` of vehicle ``v`` at sample ``k``
    (0-based; 0-4 history, 5-9 future), NaN where absent. ``lanes`` uses 0
    for absent samples. ``t0`` is the time of the first future sample in
    seconds from the start of the recording.
    """

    recording_id: int
    t0: int
    vehicle_ids: np.ndarray
    samples: np.ndarray
    lanes: np.ndarray
    loss_mask: np.ndarray

    def __post_init__(self):
        self.vehicle_ids = np.asarray(self.vehicle_ids, dtype=np.int64)
        order = np.argsort(self.vehicle_ids, kind="stable")
        self.vehicle_ids = self.vehicle_ids[order]
        self.samples = np.asarray(self.samples, dtype=float)[order]
        self.lanes = np.asarray(self.lanes, dtype=np.int64)[order]
        self.loss_mask = np.asarray(self.loss_mask, dtype=bool)[order]
        v = len(self.vehicle_ids)
        if self.samples.shape != (v, WINDOW_SAMPLES, 4) or self.lanes.shape != (v, WINDOW_SAMPLES):
            raise ValueError("window arrays have inconsistent shapes")

    @property
    def window_id(self) -> str:
        return f"{self.recording_id}/{self.t0}"

    @property
    def num_vehicles(self) -> int:
        return len(self.vehicle_ids)

    def present(self) -> np.ndarray:
        return ~np.isnan(self.samples[:, :, 0])

    def frame(self, sample: int = HISTORY - 1) -> SceneFrame:
        """Scene at ``sample`` (default: last observed) over vehicles present then."""
        here = self.present()[:, sample]
        s = self.samples[here, sample]
        return SceneFrame.from_arrays(self.t0 - HISTORY + sample, self.vehicle_ids[here],
                                      s[:, 0], s[:, 1], s[:, 2], s[:, 3],
                                      self.lanes[here, sample])

    def equals(self, other: "Window") -> bool:
        return (self.recording_id == other.recording_id and self.t0 == other.t0
                and np.array_equal(self.vehicle_ids, other.vehicle_ids)
                and np.array_equal(self.samples, other.samples, equal_nan=True)
                and np.array_equal(self.lanes, other.lanes)
                and np.array_equal(self.loss_mask, other.loss_mask))


class CanonicalSceneSet(list):
    """A list of :class:`Window` objects."""

    def equals(self, other: Sequence[Window]) -> bool:
        return len(self) == len(other) and all(a.equals(b) for a, b in zip(self, other))

    @property
    def recordings(self) -> list[int]:
        return sorted({w.recording_id for w in self})


def window_extract(table: RawTrackTable, stride_s: int = 5) -> CanonicalSceneSet:
    """Subsample to 1 Hz and cut 10-sample windows every ``stride_s`` seconds.

    Samples sit on every ``rate``-th frame counted from the first frame of
    the recording. A vehicle joins a window if it is present for all five
    history samples; it carries loss if present for all ten. Windows
    without any loss-carrying vehicle are skipped.
    """
    if not table.has_velocity:
        raise ValueError("table has no velocities; run smooth_and_differentiate first")
    if stride_s < 1 or int(stride_s) != stride_s:
        raise ValueError("stride_s must be a positive whole number of seconds")
    rate = int(table.rate_hz)
    out = CanonicalSceneSet()
    rows = table.rows
    for rec in table.recordings:
        r = rows[rows["recording_id"] == rec]
        rel = r["frame"].to_numpy() - r["frame"].min()
        on_grid = rel % rate == 0
        r = r[on_grid]
        k = rel[on_grid] // rate
        vids, vpos = np.unique(r["vehicle_id"].to_numpy(), return_inverse=True)
        n_samples = int(k.max()) + 1 if len(k) else 0
        vals = np.full((len(vids), n_samples, 4), np.nan)
        lanes = np.zeros((len(vids), n_samples), dtype=np.int64)
        vals[vpos, k] = r[["x", "y", "vx", "vy"]].to_numpy(dtype=float)
        lanes[vpos, k] = r["lane_id"].to_numpy()
        present = ~np.isnan(vals[:, :, 0])
        for start in range(0, n_samples - WINDOW_SAMPLES + 1, int(stride_s)):
            ctx = present[:, start:start + HISTORY].all(axis=1)
            full = present[:, start:start + WINDOW_SAMPLES].all(axis=1)
            if not full.any():
                continue
            sl = slice(start, start + WINDOW_SAMPLES)
            out.append(Window(int(rec), start + HISTORY, vids[ctx], vals[ctx, sl],
                              np.where(present[ctx, sl], lanes[ctx, sl], 0), full[ctx]))
    return out


# ---------------------------------------------------------------------------
# canonical scene CSV


def _fmt(v: float) -> str:
    return repr(float(v))


def scenes_to_csv(scenes: Iterable[Window]) -> str:
    """Canonical scene file: one row per present vehicle-sample."""
    buf = io.StringIO()
    buf.write(",".join(SCENE_COLUMNS) + "\n")
    for w in scenes:
        wid = w.window_id
        pres = w.present()
        for v, vid in enumerate(w.vehicle_ids):
            mask = "1" if w.loss_mask[v] else "0"
            for k in np.flatnonzero(pres[v]):
                x, y, vx, vy = w.samples[v, k]
                buf.write(f"{wid},{vid},{k + 1},{_fmt(x)},{_fmt(y)},{_fmt(vx)},{_fmt(vy)},"
                          f"{w.lanes[v, k]},{mask}\n")
    return buf.getvalue()


def write_scenes(scenes: Iterable[Window], path) -> None:
    Path(path).write_text(scenes_to_csv(scenes), encoding="utf-8", newline="\n")


def _parse_window_id(wid: str) -> tuple[int, int]:
    rec, sep, t0 = wid.partition("/")
    if not sep:
        raise ValueError(f"malformed window_id {wid!r}")
    return int(rec), int(t0)


def scenes_from_csv(text: str) -> CanonicalSceneSet:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != SCENE_COLUMNS:
        raise ValueError(f"scene file header must be {','.join(SCENE_COLUMNS)}")
    groups: dict[str, dict[int, list]] = {}
    for lineno, row in enumerate(reader, 2):
        if not row:
            continue
        if len(row) != len(SCENE_COLUMNS):
            raise ValueError(f"line {lineno}: expected {len(SCENE_COLUMNS)} fields")
        try:
            vid, k = int(row[1]), int(row[2])
            vals = [float(v) for v in row[3:7]]
            lane, mask = int(row[7]), row[8] == "1"
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        if not 1 <= k <= WINDOW_SAMPLES:
            raise ValueError(f"line {lineno}: sample_index out of range")
        groups.setdefault(row[0], {}).setdefault(vid, []).append((k - 1, vals, lane, mask))
    out = CanonicalSceneSet()
    for wid, vehicles in groups.items():
        rec, t0 = _parse_window_id(wid)
        ids = sorted(vehicles)
        samples = np.full((len(ids), WINDOW_SAMPLES, 4), np.nan)
        lanes = np.zeros((len(ids), WINDOW_SAMPLES), dtype=np.int64)
        mask = np.zeros(len(ids), dtype=bool)
        for v, vid in enumerate(ids):
            for k, vals, lane, m in vehicles[vid]:
                samples[v, k] = vals
                lanes[v, k] = lane
                mask[v] = m
        out.append(Window(rec, t0, ids, samples, lanes, mask))
    return out


def read_scenes(path) -> CanonicalSceneSet:
    return scenes_from_csv(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# splits


def split_dataset(scenes: Sequence[Window], source: str) -> dict[str, CanonicalSceneSet]:
    """Assign windows to train/val/test by recording.

    ``ngsim``: every recording but the last trains; the last one is split
    by ``t0`` into a validation first half and a test second half.
    ``highd``: the last ceil(10%) of recordings test, the ceil(10%) before
    them validate, the rest train.
    """
    recs = sorted({w.recording_id for w in scenes})
    parts = {name: CanonicalSceneSet() for name in ("train", "val", "test")}
    if source == "ngsim":
        if len(recs) < 2:
            raise ValueError("ngsim split needs at least 2 recordings")
        last = [w for w in scenes if w.recording_id == recs[-1]]
        last.sort(key=lambda w: w.t0)
        half = len(last) // 2
        val_ids = {id(w) for w in last[:half]}
        for w in scenes:
            if w.recording_id != recs[-1]:
                parts["train"].append(w)
            else:
                parts["val" if id(w) in val_ids else "test"].append(w)
        return parts
    if source == "highd":
        n_hold = math.ceil(0.1 * len(recs))
        if len(recs) < 2 * n_hold + 1:
            raise ValueError(f"highd split needs at least {2 * n_hold + 1} recordings, got {len(recs)}")
        test = set(recs[-n_hold:])
        val = set(recs[-2 * n_hold:-n_hold])
        for w in scenes:
            key = "test" if w.recording_id in test else "val" if w.recording_id in val else "train"
            parts[key].append(w)
        return parts
    raise ValueError(f"unknown dataset kind {source!r}")
