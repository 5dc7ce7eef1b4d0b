"""Raw-format track files built from small deterministic traffic simulations.

HighD recordings put half the lanes in the upper (leftward) direction, as
the real drone recordings do, and store top-left bounding-box corners.
NGSIM files use feet, 10 Hz frames and swapped axes.
"""
import numpy as np

from trajgnn.classical import IdmParams
from trajgnn.datapipe import simulate_idm

CAR_W, CAR_H = 4.5, 1.8
FEET = 0.3048


def _traffic(seed, vehicles, seconds, rate, lanes=2):
    rng = np.random.default_rng(seed)
    x0 = np.sort(rng.choice(np.arange(0, 200, 15), size=vehicles, replace=False)).astype(float)
    lane0 = rng.integers(1, lanes + 1, size=vehicles)
    params = [IdmParams(rng.uniform(22, 32), rng.uniform(0.8, 1.6), rng.uniform(1.0, 1.6),
                        2.0, 2.5) for _ in range(vehicles)]
    v = np.array([p.v0 for p in params]) * rng.uniform(0.7, 1.0, size=vehicles)
    return simulate_idm(x0, lane0, v, params, seconds, lanes, 1.0 / rate, 1.0, rng)


def highd_recording(seed, vehicles=6, seconds=40):
    """``(tracks_csv, meta_csv)`` text for one recording in HighD layout."""
    sim = _traffic(seed, vehicles, seconds, 25)
    steps, m = sim.x.shape
    upper = np.arange(m) % 2 == 0          # drivingDirection 1: travels towards -x
    tracks = ["frame,id,x,y,width,height,xVelocity,yVelocity,laneId"]
    for k in range(steps):
        for i in range(m):
            cx, cy, vx, vy = sim.x[k, i], sim.y[k, i], sim.vx[k, i], sim.vy[k, i]
            lane = int(sim.lane[k, i])
            if upper[i]:
                cx, cy, vx, vy, lane = 400.0 - cx, 30.0 - cy, -vx, -vy, lane + 1
            else:
                lane = lane + 4
            tracks.append(f"{k + 1},{i + 1},{cx - CAR_W / 2:.4f},{cy - CAR_H / 2:.4f},"
                          f"{CAR_W},{CAR_H},{vx:.4f},{vy:.4f},{lane}")
    meta = ["id,width,height,numFrames,drivingDirection"]
    meta += [f"{i + 1},{CAR_W},{CAR_H},{steps},{1 if upper[i] else 2}" for i in range(m)]
    return "\n".join(tracks) + "\n", "\n".join(meta) + "\n"


def ngsim_recording(seed, vehicles=6, seconds=40, id_offset=0):
    """NGSIM-layout CSV text; ``Local_Y`` is longitudinal, units are feet."""
    sim = _traffic(seed, vehicles, seconds, 10)
    steps, m = sim.x.shape
    rows = ["Vehicle_ID,Frame_ID,Total_Frames,Global_Time,Local_X,Local_Y,v_Vel,Lane_ID"]
    for k in range(steps):
        for i in range(m):
            rows.append(f"{id_offset + i + 1},{k + 1},{steps},{100 * k},"
                        f"{sim.y[k, i] / FEET:.3f},{sim.x[k, i] / FEET:.3f},"
                        f"{sim.vx[k, i] / FEET:.3f},{int(sim.lane[k, i])}")
    return "\n".join(rows) + "\n"


def write_highd(directory, recordings=10, **kw):
    paths = []
    for rec in range(1, recordings + 1):
        tracks, meta = highd_recording(100 + rec, **kw)
        t = directory / f"{rec:02d}_tracks.csv"
        t.write_text(tracks)
        (directory / f"{rec:02d}_tracksMeta.csv").write_text(meta)
        paths.append(t)
    return paths


def write_ngsim(directory, recordings=3, **kw):
    paths = []
    for rec in range(1, recordings + 1):
        p = directory / f"ngsim_{rec}.csv"
        p.write_text(ngsim_recording(200 + rec, **kw))
        paths.append(p)
    return paths
