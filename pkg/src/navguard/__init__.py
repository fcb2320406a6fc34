"""Real-time navigation anomaly detection: H-pattern rules plus LLM scene assessment."""

__version__ = "0.1.0"

from .spatial import (  # noqa: E402
    Detection,
    FrameRecord,
    Region,
    RuleVerdict,
    annotate_stream,
    assign_region,
    classify_frame,
)

__all__ = [
    "Detection",
    "FrameRecord",
    "Region",
    "RuleVerdict",
    "annotate_stream",
    "assign_region",
    "classify_frame",
]
