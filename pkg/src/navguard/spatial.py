"""H-pattern region assignment and the rule-based anomaly baseline.

Image coordinates are normalized to [0, 1] with the origin at the top-left,
so a larger ``center_y`` is lower in the frame.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Tuple

SIDE_STRIP = 0.25
HORIZON = 0.5
DEFAULT_AREA_THRESHOLD = 0.10


class InvalidDetection(ValueError):
    """A detection field is missing, non-finite or outside [0, 1]."""

    def __init__(self, message: str, field_name: str | None = None, index: int | None = None):
        super().__init__(message)
        self.field_name = field_name
        self.index = index


class DuplicateFrameId(ValueError):
    pass


class Region(str, enum.Enum):
    LEFT = "Left"
    RIGHT = "Right"
    FRONT = "Front"
    GROUND = "Ground"


@dataclass(frozen=True)
class Detection:
    class_name: str
    confidence: float
    center_x: float
    center_y: float
    width: float
    height: float

    @property
    def area_fraction(self) -> float:
        return self.width * self.height

    def validate(self) -> None:
        if not isinstance(self.class_name, str) or not self.class_name.strip():
            raise InvalidDetection("class_name must be a non-empty string", "class_name")
        for name in ("confidence", "center_x", "center_y", "width", "height"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise InvalidDetection(f"{name} must be a number, got {value!r}", name)
            if not math.isfinite(value) or not 0.0 <= value <= 1.0:
                raise InvalidDetection(f"{name}={value!r} outside [0, 1]", name)


@dataclass(frozen=True)
class FrameRecord:
    frame_id: int
    timestamp_ms: int
    detections: Tuple[Detection, ...] = ()
    source_tag: str = ""

    def __post_init__(self) -> None:
        # accept any sequence but store an immutable tuple
        if not isinstance(self.detections, tuple):
            object.__setattr__(self, "detections", tuple(self.detections))


@dataclass(frozen=True)
class Trigger:
    index: int
    region: Region
    area_fraction: float


@dataclass(frozen=True)
class RuleVerdict:
    triggers: Tuple[Trigger, ...] = field(default_factory=tuple)
    area_threshold_used: float = DEFAULT_AREA_THRESHOLD

    @property
    def is_anomaly(self) -> bool:
        return bool(self.triggers)


def assign_region(d: Detection) -> Region:
    """Map a detection to its H-pattern region by its center point.

    Left/Right strips use strict inequalities against 0.25/0.75; a center on the
    horizon (``center_y == 0.5``) belongs to Front.
    """
    d.validate()
    if d.center_x < SIDE_STRIP:
        return Region.LEFT
    if d.center_x > 1.0 - SIDE_STRIP:
        return Region.RIGHT
    if d.center_y <= HORIZON:
        return Region.FRONT
    return Region.GROUND


def _check_threshold(area_threshold: float) -> None:
    if not (isinstance(area_threshold, (int, float)) and 0.0 < area_threshold < 1.0):
        raise ValueError(f"area_threshold must lie in (0, 1), got {area_threshold!r}")


def classify_frame(f: FrameRecord, area_threshold: float = DEFAULT_AREA_THRESHOLD) -> RuleVerdict:
    _check_threshold(area_threshold)
    triggers: List[Trigger] = []
    for i, d in enumerate(f.detections):
        try:
            region = assign_region(d)
        except InvalidDetection as exc:
            raise InvalidDetection(
                f"frame {f.frame_id}, detection {i}: {exc}", exc.field_name, index=i
            ) from exc
        area = d.area_fraction
        if region is Region.GROUND:
            triggers.append(Trigger(i, region, area))
        elif region in (Region.LEFT, Region.RIGHT) and area > area_threshold:
            triggers.append(Trigger(i, region, area))
    return RuleVerdict(tuple(triggers), area_threshold)


def annotate_stream(
    frames: Iterable[FrameRecord], area_threshold: float = DEFAULT_AREA_THRESHOLD
) -> List[Tuple[int, bool]]:
    """Label each frame with the rule baseline; duplicate frame ids are rejected."""
    _check_threshold(area_threshold)
    seen: dict[int, int] = {}
    labels: List[Tuple[int, bool]] = []
    for pos, f in enumerate(frames):
        if f.frame_id in seen:
            raise DuplicateFrameId(
                f"duplicate frame_id {f.frame_id} at positions {seen[f.frame_id]} and {pos}"
            )
        seen[f.frame_id] = pos
        labels.append((f.frame_id, classify_frame(f, area_threshold).is_anomaly))
    return labels

