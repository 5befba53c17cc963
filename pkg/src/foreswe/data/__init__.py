from .core import ATTRIBUTES, SEASON_DAYS, SWE, DailySeries, Dataset, StationMeta
from .groups import LocationGroup, group_by_peak_swe
from .io import load_dataset, write_dataset
from .synthetic import generate_synthetic
from .windows import (
    DEFAULT_WINDOWS,
    AccessLog,
    SplitSpec,
    WindowedExample,
    Windows,
    build_windows,
)

__all__ = [
    "ATTRIBUTES",
    "SEASON_DAYS",
    "SWE",
    "AccessLog",
    "DEFAULT_WINDOWS",
    "DailySeries",
    "Dataset",
    "LocationGroup",
    "SplitSpec",
    "StationMeta",
    "WindowedExample",
    "Windows",
    "build_windows",
    "generate_synthetic",
    "group_by_peak_swe",
    "load_dataset",
    "write_dataset",
]
