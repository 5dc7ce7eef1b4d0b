import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajgnn.classical import IdmParams, cvm_predict_arrays
from trajgnn.datapipe import (DataFormatError, RawTrackTable, SynthConfig, Window,
                              double_sided_ema, generate_synthetic, merge_tables, parse_highd,
                              parse_ngsim, read_scenes, scenes_from_csv, scenes_to_csv,
                              simulate_idm, smooth_and_differentiate, split_dataset,
                              window_extract, write_scenes)

NGSIM_CSV = b"""Vehicle_ID,Frame_ID,Total_Frames,Local_X,Local_Y,v_Vel,Lane_ID
7,100,2,10.0,100.0,30.0,2
7,101,2,10.5,103.0,30.0,2
"""

HIGHD_TRACKS = b"""frame,id,x,y,width,height,xVelocity,yVelocity,laneId
1,1,100.0,10.0,4.0,2.0,-30.0,0.0,2
2,1,98.8,10.0,4.0,2.0,-30.0,0.0,2
3,1,97.6,10.0,4.0,2.0,-30.0,0.0,2
5,2,10.0,20.0,4.0,2.0,25.0,0.0,5
6,2,11.0,20.0,4.0,2.0,25.0,0.0,5
"""

HIGHD_META = b"""id,width,height,drivingDirection
1,4.0,2.0,1
2,4.0,2.0,2
"""


def track_table(tracks, rate=25, source="synthetic"):
    """tracks: {(rec, vid): (frames, x, y, vx, lane)}"""
    parts = []
    for (rec, vid), (frames, x, y, vx, lane) in tracks.items():
        n = len(frames)
        parts.append(pd.DataFrame({
            "recording_id": rec, "vehicle_id": vid, "frame": frames,
            "x": np.broadcast_to(x, n).astype(float), "y": np.broadcast_to(y, n).astype(float),
            "lane_id": lane, "vx": np.broadcast_to(vx, n).astype(float), "vy": 0.0}))
    return RawTrackTable(source, rate, pd.concat(parts, ignore_index=True))


def straight(frames, speed=20.0, rate=25, x0=0.0, lane=1):
    frames = np.asarray(frames)
    return frames, x0 + speed * frames / rate, 1.75, speed, lane


# -- NGSIM ------------------------------------------------------------------------------


def test_parse_ngsim_two_rows():
    t = parse_ngsim(NGSIM_CSV)
    assert t.num_tracks == 1 and len(t) == 2 and t.rate_hz == 10
    np.testing.assert_allclose(t.rows["x"], [30.48, 103 * 0.3048])
    np.testing.assert_allclose(t.rows["y"], [3.048, 10.5 * 0.3048])
    assert t.rows["lane_id"].tolist() == [2, 2]


def test_parse_ngsim_missing_lane_column():
    with pytest.raises(DataFormatError, match="Lane_ID"):
        parse_ngsim(b"Vehicle_ID,Frame_ID,Local_X,Local_Y\n1,1,0,0\n")


def test_parse_ngsim_empty_body():
    t = parse_ngsim(b"Vehicle_ID,Frame_ID,Local_X,Local_Y,Lane_ID\n")
    assert t.num_tracks == 0 and len(t) == 0


def test_parse_ngsim_non_numeric_cell():
    with pytest.raises(DataFormatError, match="row 2"):
        parse_ngsim(b"Vehicle_ID,Frame_ID,Local_X,Local_Y,Lane_ID\n1,1,0,0,1\n1,2,abc,0,1\n")


def test_parse_ngsim_duplicate_frame():
    with pytest.raises(DataFormatError, match="duplicate"):
        parse_ngsim(b"Vehicle_ID,Frame_ID,Local_X,Local_Y,Lane_ID\n1,1,0,0,1\n1,1,0,0,1\n")


def test_missing_input_file(tmp_path):
    with pytest.raises(DataFormatError, match="not found"):
        parse_ngsim(tmp_path / "nope.csv")


# -- HighD ------------------------------------------------------------------------------


def test_parse_highd_mirrors_upper_direction():
    t = parse_highd(HIGHD_TRACKS, HIGHD_META, recording_id=4)
    assert t.num_tracks == 2 and t.rate_hz == 25 and t.recordings == [4]
    one = t.rows[t.rows["vehicle_id"] == 1]
    assert np.all(np.diff(one["x"]) > 0)
    np.testing.assert_allclose(one["x"], [-102.0, -100.8, -99.6])
    np.testing.assert_allclose(one["y"], -11.0)
    np.testing.assert_allclose(one["v"], 30.0)
    two = t.rows[t.rows["vehicle_id"] == 2]
    np.testing.assert_allclose(two["x"], [12.0, 13.0])


def test_parse_highd_requires_meta():
    with pytest.raises(DataFormatError):
        parse_highd(HIGHD_TRACKS, None)


def test_parse_highd_unknown_direction():
    with pytest.raises(DataFormatError, match="vehicle 2"):
        parse_highd(HIGHD_TRACKS, b"id,drivingDirection\n1,1\n")


def test_merge_rejects_mixed_sources():
    with pytest.raises(ValueError):
        merge_tables([parse_ngsim(NGSIM_CSV), parse_highd(HIGHD_TRACKS, HIGHD_META)])
    assert len(merge_tables([parse_ngsim(NGSIM_CSV, 1), parse_ngsim(NGSIM_CSV, 2)])) == 4


# -- smoothing --------------------------------------------------------------------------


def test_ema_constant_track_unchanged():
    vals = np.full(40, 123.456)
    np.testing.assert_array_equal(double_sided_ema(vals, 2 / 14), vals)


def test_smoothing_linear_ramp_interior():
    frames = np.arange(500)
    slope = 27.0
    table = RawTrackTable("highd", 25, pd.DataFrame({
        "recording_id": 1, "vehicle_id": 1, "frame": frames,
        "x": slope * frames / 25, "y": 2.0, "lane_id": 1}))
    out = smooth_and_differentiate(table, 0.5)
    inner = slice(200, 300)
    np.testing.assert_allclose(out.rows["x"].to_numpy()[inner], (slope * frames / 25)[inner],
                               atol=1e-6)
    np.testing.assert_allclose(out.rows["vx"].to_numpy()[inner], slope, atol=1e-6)
    np.testing.assert_array_equal(out.rows["y"], 2.0)
    np.testing.assert_array_equal(out.rows["vy"], 0.0)


def test_smoothing_attenuates_sinusoid():
    t = np.arange(300) / 25
    vals = np.sin(2 * np.pi * 1.5 * t)
    sm = double_sided_ema(vals, 2 / 14)
    assert np.abs(sm).max() < np.abs(vals).max()


@settings(max_examples=50)
@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=60), st.floats(0.05, 1.0))
def test_smoothing_never_expands_range(vals, alpha):
    vals = np.array(vals)
    sm = double_sided_ema(vals, alpha)
    tol = 1e-9 * max(1.0, np.abs(vals).max())
    assert sm.min() >= vals.min() - tol and sm.max() <= vals.max() + tol


def test_short_tracks_dropped():
    table = RawTrackTable("ngsim", 10, pd.DataFrame({
        "recording_id": 1, "vehicle_id": [1, 1, 2, 2, 2], "frame": [1, 2, 1, 2, 3],
        "x": [0.0, 1, 0, 1, 2], "y": 0.0, "lane_id": 1}))
    out = smooth_and_differentiate(table)
    assert out.dropped_tracks == 1 and out.num_tracks == 1


# -- windows ------------------------------------------------------------------------------


def test_ten_second_track_gives_one_window():
    ws = window_extract(track_table({(1, 1): straight(range(250))}))
    assert len(ws) == 1 and ws[0].loss_mask.tolist() == [True]
    assert ws[0].t0 == 5 and ws[0].window_id == "1/5"
    np.testing.assert_allclose(ws[0].samples[0, :, 0], 20.0 * np.arange(10))


def test_nine_second_track_gives_none():
    assert len(window_extract(track_table({(1, 1): straight(range(225))}))) == 0


def test_stride_arithmetic():
    ws = window_extract(track_table({(1, 1): straight(range(500))}), stride_s=5)
    assert [w.t0 for w in ws] == [5, 10, 15]


def test_context_and_loss_rules():
    table = track_table({
        (1, 1): straight(range(250)),                    # full window
        (1, 2): straight(range(0, 150), x0=50.0),        # history plus one future sample
        (1, 3): straight(range(25, 250), x0=80.0),       # misses the first sample
    })
    (w,) = window_extract(table)
    assert w.vehicle_ids.tolist() == [1, 2]
    assert w.loss_mask.tolist() == [True, False]
    assert w.present()[1].tolist() == [True] * 6 + [False] * 4
    assert w.lanes[1, 6:].tolist() == [0, 0, 0, 0]


def test_window_needs_velocities():
    table = RawTrackTable("ngsim", 10, pd.DataFrame({
        "recording_id": 1, "vehicle_id": 1, "frame": range(100), "x": 0.0, "y": 0.0,
        "lane_id": 1}))
    with pytest.raises(ValueError):
        window_extract(table)


# -- scene files ------------------------------------------------------------------------


def test_scene_file_round_trip(tmp_path):
    table = track_table({(2, 1): straight(range(500)),
                         (2, 9): straight(range(0, 300), speed=17.3, x0=33.3, lane=2)})
    ws = window_extract(table)
    path = tmp_path / "scenes.csv"
    write_scenes(ws, path)
    raw = path.read_bytes()
    assert b"\r\n" not in raw
    assert raw.startswith(b"window_id,vehicle_id,sample_index,x,y,vx,vy,lane_id,loss_mask\n")
    back = read_scenes(path)
    assert back.equals(ws)
    assert scenes_to_csv(back) == raw.decode()


def test_scene_file_errors():
    with pytest.raises(ValueError, match="header"):
        scenes_from_csv("a,b\n")
    head = "window_id,vehicle_id,sample_index,x,y,vx,vy,lane_id,loss_mask\n"
    with pytest.raises(ValueError, match="line 2"):
        scenes_from_csv(head + "1/5,1,11,0,0,0,0,1,1\n")
    with pytest.raises(ValueError, match="line 2"):
        scenes_from_csv(head + "1/5,1,1,x,0,0,0,1,1\n")


# -- splits -------------------------------------------------------------------------------


def dummy_windows(recordings, per_recording):
    out = []
    for rec in recordings:
        for k in range(per_recording):
            out.append(Window(rec, 5 * (k + 1), [1], np.zeros((1, 10, 4)), np.ones((1, 10)), [True]))
    return out


def test_ngsim_split_counts():
    parts = split_dataset(dummy_windows([1, 2, 3], 100), "ngsim")
    assert [len(parts[k]) for k in ("train", "val", "test")] == [200, 50, 50]
    assert max(w.t0 for w in parts["val"]) < min(w.t0 for w in parts["test"])


def test_highd_split_counts():
    parts = split_dataset(dummy_windows(range(1, 11), 3), "highd")
    assert [parts[k].recordings for k in ("train", "val", "test")] == [list(range(1, 9)), [9], [10]]


def test_split_errors():
    with pytest.raises(ValueError):
        split_dataset(dummy_windows([1], 4), "highd")
    with pytest.raises(ValueError):
        split_dataset(dummy_windows([1, 2, 3], 4), "kitti")


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 25), st.integers(1, 4), st.sampled_from(["ngsim", "highd"]))
def test_split_is_partition(n_rec, per, kind):
    ws = dummy_windows(range(1, n_rec + 1), per)
    parts = split_dataset(ws, kind)
    ids = [id(w) for p in parts.values() for w in p]
    assert sorted(ids) == sorted(id(w) for w in ws)


# -- synthetic traffic ------------------------------------------------------------------------


def test_constant_velocity_synth_is_cvm_exact():
    cfg = SynthConfig(seed=3, mode="constant_velocity", vehicles=10, duration_s=20)
    ws = window_extract(generate_synthetic(cfg))
    assert len(ws) > 0
    for w in ws:
        m = w.loss_mask
        pred = cvm_predict_arrays(w.samples[m, 4, :2], w.samples[m, 4, 2:4])
        assert np.abs(pred - w.samples[m, 5:, :2]).max() < 1e-9


def test_synth_deterministic():
    cfg = SynthConfig(seed=5, vehicles=12, duration_s=15, lane_change_rate=2.0, recordings=2)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    pd.testing.assert_frame_equal(a.rows, b.rows)
    c = generate_synthetic(SynthConfig(seed=6, vehicles=12, duration_s=15, recordings=2))
    assert not a.rows["x"].equals(c.rows["x"])


def test_synth_capacity_error():
    with pytest.raises(ValueError, match="capacity"):
        generate_synthetic(SynthConfig(lanes=1, length=50, vehicles=6))


def test_slow_leader_slows_platoon():
    fast = IdmParams(v0=30, a_max=1.5, tau=1.2, b=2.0, s0=2.0)
    slow = IdmParams(v0=10, a_max=1.5, tau=1.2, b=2.0, s0=2.0)
    x0 = [0.0, 30.0, 60.0, 90.0]
    lanes = [1, 1, 1, 1]
    v = [25.0, 25.0, 25.0, 10.0]
    led = simulate_idm(x0, lanes, v, [fast, fast, fast, slow], 30.0, 1)
    control = simulate_idm(x0[:3], lanes[:3], v[:3], [fast] * 3, 30.0, 1)
    assert led.vx[:, :3].mean() < control.vx.mean()


def test_lane_changes_ramp_between_centres():
    p = IdmParams(v0=25, a_max=1.5, tau=1.2, b=2.0, s0=2.0)
    sim = simulate_idm([0.0, 100.0], [1, 1], [20.0, 20.0], [p, p], 60.0, 2, 0.04, 30.0,
                       np.random.default_rng(1))
    assert sim.events
    assert np.all((sim.y >= 1.75 - 1e-9) & (sim.y <= 5.25 + 1e-9))
    assert np.all(sim.vx >= 0)
