"""Routing traces and expert-usage analytics."""

from .stats import (
    EmptyTraceError,
    LayerStats,
    StepCDF,
    UsageStats,
    class_occurrence,
    collect_stats,
    expert_similarity,
    pareto_front,
    similarity_from_counts,
    spatial_map,
    usage_cdf,
)
from .trace import RoutingTrace, TraceRecord

__all__ = [
    "EmptyTraceError",
    "LayerStats",
    "RoutingTrace",
    "StepCDF",
    "TraceRecord",
    "UsageStats",
    "class_occurrence",
    "collect_stats",
    "expert_similarity",
    "pareto_front",
    "similarity_from_counts",
    "spatial_map",
    "usage_cdf",
]
