"""Non-paraxial sequential ray tracing, survival maps and effective ABCD matrices."""
from .core import (
    Clipped,
    IntersectionError,
    Ray,
    SurvivalMap,
    effective_abcd,
    grid_axis,
    reflect,
    refract,
    round_trip_map,
    round_trips_until_clip,
    survival_map,
    trace_many,
    trace_segment,
)
from .kernel import BACKEND, get_kernel
from .table import build_table

__all__ = [
    "BACKEND", "Clipped", "IntersectionError", "Ray", "SurvivalMap", "build_table",
    "effective_abcd", "get_kernel", "grid_axis", "reflect", "refract", "round_trip_map",
    "round_trips_until_clip", "survival_map", "trace_many", "trace_segment",
]
