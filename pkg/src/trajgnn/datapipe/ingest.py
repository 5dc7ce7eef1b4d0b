"""Readers for NGSIM- and HighD-format track tables, plus smoothing."""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.signal import lfilter

log = logging.getLogger(__name__)

FEET = 0.3048
NGSIM_RATE_HZ = 10
HIGHD_RATE_HZ = 25
NGSIM_COLUMNS = ("Vehicle_ID", "Frame_ID", "Local_X", "Local_Y", "Lane_ID")
HIGHD_COLUMNS = ("id", "frame", "x", "y", "xVelocity", "laneId")
TABLE_COLUMNS = ["recording_id", "vehicle_id", "frame", "x", "y", "lane_id"]


class DataFormatError(ValueError):
    """Raised for malformed input tables."""


@dataclass
class RawTrackTable:
    """Per-frame vehicle positions in canonical axes.

    ``x`` is longitudinal and grows in the driving direction, ``y`` is
    lateral, both in metres. ``rows`` holds the columns in
    ``TABLE_COLUMNS`` plus optional ``v`` (raw speed) and, once derived,
    ``vx`` and ``vy``.
    """

    source: str
    rate_hz: int
    rows: pd.DataFrame
    dropped_tracks: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rows = self.rows.sort_values(["recording_id", "vehicle_id", "frame"],
                                          kind="stable").reset_index(drop=True)
        keys = self.rows[["recording_id", "vehicle_id", "frame"]]
        if keys.duplicated().any():
            dup = keys[keys.duplicated()].iloc[0].tolist()
            raise DataFormatError(f"duplicate frame for (recording, vehicle, frame) = {dup}")

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def has_velocity(self) -> bool:
        return {"vx", "vy"} <= set(self.rows.columns)

    def tracks(self):
        """Iterate ``((recording_id, vehicle_id), rows)`` in sorted order."""
        return self.rows.groupby(["recording_id", "vehicle_id"], sort=True)

    @property
    def num_tracks(self) -> int:
        if self.rows.empty:
            return 0
        return int(self.rows.groupby(["recording_id", "vehicle_id"]).ngroups)

    @property
    def recordings(self) -> list[int]:
        return sorted(int(r) for r in self.rows["recording_id"].unique())


def _read_csv(src) -> pd.DataFrame:
    if src is None:
        raise DataFormatError("input file is missing")
    if isinstance(src, (bytes, bytearray)):
        buf = io.BytesIO(bytes(src))
    else:
        path = Path(src)
        if not path.is_file():
            raise DataFormatError(f"input file not found: {path}")
        buf = path
    try:
        return pd.read_csv(buf, dtype=str, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise DataFormatError("input has no header row") from None


def _require(df: pd.DataFrame, columns, what: str) -> None:
    for col in columns:
        if col not in df.columns:
            raise DataFormatError(f"{what} is missing required column {col!r}")


def _numeric(df: pd.DataFrame, columns) -> pd.DataFrame:
    out = {}
    for col in columns:
        vals = pd.to_numeric(df[col].str.strip(), errors="coerce")
        bad = vals.isna().to_numpy()
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DataFormatError(
                f"row {i + 1}: non-numeric value {df[col].iloc[i]!r} in column {col!r}")
        out[col] = vals.to_numpy(dtype=float)
    return pd.DataFrame(out)


def parse_ngsim(data, recording_id: int = 1) -> RawTrackTable:
    """Read an NGSIM trajectory CSV (feet, 10 Hz).

    Canonical ``x`` is ``Local_Y`` and ``y`` is ``Local_X``, converted to
    metres. A ``Recording_ID`` column, when present, overrides
    ``recording_id``.
    """
    df = _read_csv(data)
    _require(df, NGSIM_COLUMNS, "NGSIM table")
    cols = list(NGSIM_COLUMNS) + [c for c in ("v_Vel", "Recording_ID") if c in df.columns]
    num = _numeric(df, cols)
    rows = pd.DataFrame({
        "recording_id": (num["Recording_ID"] if "Recording_ID" in num else
                         pd.Series(np.full(len(num), recording_id))).astype(np.int64),
        "vehicle_id": num["Vehicle_ID"].astype(np.int64),
        "frame": num["Frame_ID"].astype(np.int64),
        "x": num["Local_Y"] * FEET,
        "y": num["Local_X"] * FEET,
        "lane_id": num["Lane_ID"].astype(np.int64),
    })
    if "v_Vel" in num:
        rows["v"] = num["v_Vel"] * FEET
    return RawTrackTable("ngsim", NGSIM_RATE_HZ, rows)


def parse_highd(tracks, meta, recording_id: int = 1) -> RawTrackTable:
    """Read HighD ``tracks`` and ``tracksMeta`` CSVs (metres, 25 Hz).

    Box corners are converted to centres when ``width``/``height`` exist.
    Vehicles with ``drivingDirection == 1`` travel towards -x; their frame is
    rotated by 180 degrees so all traffic moves towards +x.
    """
    if meta is None:
        raise DataFormatError("HighD meta table is required for driving directions")
    tdf = _read_csv(tracks)
    mdf = _read_csv(meta)
    _require(tdf, HIGHD_COLUMNS, "HighD tracks table")
    _require(mdf, ("id", "drivingDirection"), "HighD meta table")
    extra = [c for c in ("width", "height", "yVelocity") if c in tdf.columns]
    num = _numeric(tdf, list(HIGHD_COLUMNS) + extra)
    mnum = _numeric(mdf, ["id", "drivingDirection"])
    direction = dict(zip(mnum["id"].astype(np.int64), mnum["drivingDirection"].astype(np.int64)))
    ids = num["id"].astype(np.int64).to_numpy()
    missing = sorted(set(ids) - set(direction))
    if missing:
        raise DataFormatError(f"no driving direction for vehicle {missing[0]}")
    sign = np.where(np.array([direction[i] for i in ids]) == 1, -1.0, 1.0)
    xc = num["x"].to_numpy() + (num["width"].to_numpy() / 2 if "width" in num else 0.0)
    yc = num["y"].to_numpy() + (num["height"].to_numpy() / 2 if "height" in num else 0.0)
    rows = pd.DataFrame({
        "recording_id": np.full(len(num), recording_id, dtype=np.int64),
        "vehicle_id": ids,
        "frame": num["frame"].astype(np.int64).to_numpy(),
        "x": sign * xc,
        "y": sign * yc,
        "lane_id": num["laneId"].astype(np.int64).to_numpy(),
        "v": sign * num["xVelocity"].to_numpy(),
    })
    return RawTrackTable("highd", HIGHD_RATE_HZ, rows, meta={"direction": direction})


def merge_tables(tables) -> RawTrackTable:
    """Concatenate tables of one source and frame rate."""
    tables = list(tables)
    if not tables:
        raise ValueError("no tables to merge")
    rates = {t.rate_hz for t in tables}
    sources = {t.source for t in tables}
    if len(rates) != 1 or len(sources) != 1:
        raise ValueError("tables differ in source or frame rate")
    return RawTrackTable(tables[0].source, tables[0].rate_hz,
                         pd.concat([t.rows for t in tables], ignore_index=True),
                         sum(t.dropped_tracks for t in tables))


# ---------------------------------------------------------------------------
# smoothing


def ema_span_alpha(span_s: float, rate_hz: float) -> float:
    n = max(1, int(np.floor(span_s * rate_hz + 0.5)))
    return 2.0 / (n + 1.0)


def _ema(values: np.ndarray, alpha: float) -> np.ndarray:
    # run on offsets from the first value so constant tracks stay exact
    base = values[0]
    dev = lfilter([alpha], [1.0, alpha - 1.0], values - base, zi=[0.0])[0]
    return base + dev


def double_sided_ema(values: np.ndarray, alpha: float) -> np.ndarray:
    """Mean of a forward and a backward exponential moving average."""
    values = np.asarray(values, dtype=float)
    fwd = _ema(values, alpha)
    bwd = _ema(values[::-1], alpha)[::-1]
    return 0.5 * (fwd + bwd)


def smooth_and_differentiate(table: RawTrackTable, span_s: float = 0.5) -> RawTrackTable:
    """Smooth ``x``/``y`` per track and derive ``vx``/``vy`` by central differences.

    Tracks with fewer than three samples are dropped and counted in
    ``dropped_tracks``.
    """
    alpha = ema_span_alpha(span_s, table.rate_hz)
    parts = []
    dropped = 0
    for _, rows in table.tracks():
        if len(rows) < 3:
            dropped += 1
            continue
        rows = rows.copy()
        xs = double_sided_ema(rows["x"].to_numpy(), alpha)
        ys = double_sided_ema(rows["y"].to_numpy(), alpha)
        # integer frame spacing keeps constant tracks at exactly zero velocity
        f = rows["frame"].to_numpy(dtype=float)
        rows["x"], rows["y"] = xs, ys
        rows["vx"] = np.gradient(xs, f) * table.rate_hz
        rows["vy"] = np.gradient(ys, f) * table.rate_hz
        parts.append(rows)
    if dropped:
        log.warning("dropped %d track(s) shorter than 3 samples", dropped)
    cols = list(table.rows.columns) + [c for c in ("vx", "vy") if c not in table.rows.columns]
    rows = pd.concat(parts, ignore_index=True) if parts else pd.DataFrame(columns=cols)
    return replace(table, rows=rows, dropped_tracks=table.dropped_tracks + dropped)
