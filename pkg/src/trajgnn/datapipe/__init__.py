"""Track ingestion, smoothing, windowing, splits and synthetic traffic."""
from .ingest import (DataFormatError, RawTrackTable, double_sided_ema, merge_tables,
                     parse_highd, parse_ngsim, smooth_and_differentiate)
from .synth import SynthConfig, generate_synthetic, simulate_idm
from .windows import (CanonicalSceneSet, Window, read_scenes, scenes_from_csv, scenes_to_csv,
                      split_dataset, window_extract, write_scenes)

__all__ = [
    "CanonicalSceneSet", "DataFormatError", "RawTrackTable", "SynthConfig", "Window",
    "double_sided_ema", "generate_synthetic", "merge_tables", "parse_highd", "parse_ngsim",
    "read_scenes", "scenes_from_csv", "scenes_to_csv", "simulate_idm",
    "smooth_and_differentiate", "split_dataset", "window_extract", "write_scenes",
]
