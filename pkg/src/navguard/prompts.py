"""Prompt rendering for scene assessment, scene switching and interest targets.

The prompt segments below are kept byte-for-byte as the system ships them; the
only runtime edit is the sensitivity value at the end of the sensitivity
segment.  Source strings used backslash line continuations, so adjacent lines
are joined without a separator (hence ``danger.Current`` and the run of spaces
before each key in the output formats).
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import FrozenSet, Iterable, List, Optional, Sequence, Tuple

from .spatial import FrameRecord, Region, assign_region

INSTRUCTION_PROMPT = (
    "You are a voice assistant for a visually impaired user, "
    "the input is the actual data collected by a phone camera, and the phone is always facing front, "
    "please provide the key information for the blind user to help him navigate and avoid potential danger. "
    "Please note that the center_x and center_y represent the object location (proportional to the image), "
    "object height and width are also a proportion."
)

SENSITIVITY_PROMPT = (
    "System sensitivity: Incorporate the sensitivity setting in your response. "
    "For a low-sensitivity setting, identify and report only imminent and direct threats to safety. "
    "For medium sensitivity, include potential hazards that could pose a risk if not avoided. "
    "For high sensitivity, report all detected objects that could cause any inconvenience or danger."
    "Current sensitivity: low."
)

LOCATION_PROMPT = (
    "The location information (center_x, center_y, height, width) of objects is the proportion to "
    "the image, the detected objects are categorized into 4 type based on the image region. "
    "Left and Right: objects located on left 25% or right 25% of the image, these objects are "
    "usually moving and has large proportion.Front: objects that may still far away, can be used "
    "to discriminate the current situation.Ground: objects that may nearby."
)

MOTION_PROMPT = (
    "Using the information from last frame and current frame to analyze the movement (speed and direction) "
    "and location of each object to determine its trajectory relative to the user."
    "Use this information to assess whether an object is moving towards the user or they are static. "
    "If moving, how quickly a potential collision might occur based on the object's speed and direction of movement."
)

FORMAT_FULL = (
    "Please organize your output into this format: "
    '{ "scene": quickly describe the current situation for blind user; '
    '  "key_objects": quickly and roughly locate the key objects for blind user; '
    '  "anomaly_checker": quickly diagnose if there is potential danger for a blind person; '
    '  "anomaly_label": output 1 if there is an emergency, output 0 if not; '
    '  "anomaly_index": object_id, danger_index, estimate a score from 0 to 1 about each objects that may cause danger; '
    '  "voice_guide": the main output to instant alert the blind person for emergency.}'
)

FORMAT_VOICE = (
    "Please organize your output into this format: "
    '{ "voice_guide": the main output to instantly alert the blind person for an emergency.}'
)

FORMAT_ANNOTATION = (
    "Please organize your output into this format: "
    '{ "anomaly_score": predict a score from 0 to 1 to evaluate the emergency level; '
    '  "reason": explain your annotation reason within 10 words.}'
)

CLASS_SWITCH_PROMPT = (
    "The user is switching the scene to {custom_scene} please generate a new list that contains "
    "the top 100 related objects, including especially road hazards and possible obstacles"
)

INTEREST_PROMPT = (
    "Please analyze the user command and extract the user required object, "
    'output into this format: {"add": object_name}.'
)

_SENSITIVITY_TAIL = "Current sensitivity: low."

ANNOTATION_MASK: FrozenSet[str] = frozenset(
    {"people", "human face", "car license plate", "license plate", "plate"}
)

NO_OBJECTS = "(no objects detected)"
DEFAULT_MAX_DETECTIONS = 30
SEGMENT_SEPARATOR = "\n"


class SensitivityLevel(str, enum.Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"

    @classmethod
    def parse(cls, text: str) -> "SensitivityLevel":
        key = text.strip().lower()
        if key == "normal":
            key = "medium"
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown sensitivity {text!r} (expected low, medium or high)") from None


class OutputMode(str, enum.Enum):
    FULL = "full"
    VOICE_ONLY = "voice"
    ANNOTATION = "annotation"

    @classmethod
    def parse(cls, text: str) -> "OutputMode":
        key = text.strip().lower()
        aliases = {"voice_only": "voice", "voiceonly": "voice", "voice-only": "voice"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown mode {text!r} (expected full, voice or annotation)") from None


FORMAT_DIRECTIVES = {
    OutputMode.FULL: FORMAT_FULL,
    OutputMode.VOICE_ONLY: FORMAT_VOICE,
    OutputMode.ANNOTATION: FORMAT_ANNOTATION,
}


@dataclass(frozen=True)
class AblationToggles:
    include_sensitivity: bool = True
    include_location: bool = True
    include_instruction: bool = True
    include_motion: bool = True

    def label(self) -> str:
        flags = (
            ("S", self.include_sensitivity),
            ("L", self.include_location),
            ("I", self.include_instruction),
            ("M", self.include_motion),
        )
        return "".join(k if on else "-" for k, on in flags)


@dataclass(frozen=True)
class ActiveClassSet:
    scene_name: str
    classes: Tuple[str, ...]
    mask: FrozenSet[str] = ANNOTATION_MASK

    def __post_init__(self) -> None:
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "mask", frozenset(self.mask))
        if len(set(self.classes)) != len(self.classes):
            raise ValueError(f"scene {self.scene_name!r}: duplicate class names")
        for c in self.classes:
            if not isinstance(c, str) or not c.strip():
                raise ValueError(f"scene {self.scene_name!r}: class names must be non-empty strings")

    @classmethod
    def build(cls, scene_name: str, classes: Iterable[str], mask: Iterable[str] = ANNOTATION_MASK) -> "ActiveClassSet":
        """Dedupe (first occurrence wins) and drop masked names before construction."""
        mask = frozenset(mask)
        kept: List[str] = []
        seen = set()
        for c in classes:
            c = c.strip()
            if not c or c in seen or is_masked(c, mask):
                continue
            seen.add(c)
            kept.append(c)
        return cls(scene_name, tuple(kept), mask)

    def with_class(self, name: str) -> "ActiveClassSet":
        return ActiveClassSet.build(self.scene_name, self.classes + (name,), self.mask)

    def visible_classes(self) -> Tuple[str, ...]:
        return tuple(c for c in self.classes if not is_masked(c, self.mask))


@dataclass(frozen=True)
class PromptBundle:
    system_text: str
    user_text: str
    config_fingerprint: str
    mode: OutputMode
    sensitivity: SensitivityLevel = SensitivityLevel.LOW
    toggles: AblationToggles = field(default_factory=AblationToggles)


def is_masked(class_name: str, mask: Iterable[str]) -> bool:
    # substring match so that e.g. "human face blurred" is also withheld
    lowered = class_name.lower()
    return any(m.lower() in lowered for m in mask)


def sensitivity_segment(level: SensitivityLevel) -> str:
    return SENSITIVITY_PROMPT[: -len(_SENSITIVITY_TAIL)] + f"Current sensitivity: {level.value}."


def _pct(x: float) -> str:
    return f"{x * 100:.0f}%"


def format_detection_line(class_name: str, region: Region, cx: float, cy: float, w: float, h: float, conf: float) -> str:
    return (
        f"{class_name} | {region.value} | center {_pct(cx)},{_pct(cy)} "
        f"| size {_pct(w)}x{_pct(h)} | conf {conf:.2f}"
    )


def format_detections(
    f: FrameRecord, regions: Sequence[Region], mask: Iterable[str] = ()
) -> str:
    """One line per detection, in input order, skipping masked class names."""
    if len(regions) != len(f.detections):
        raise ValueError(
            f"frame {f.frame_id}: {len(f.detections)} detections but {len(regions)} regions"
        )
    mask = tuple(mask)
    lines = [
        format_detection_line(d.class_name, r, d.center_x, d.center_y, d.width, d.height, d.confidence)
        for d, r in zip(f.detections, regions)
        if not is_masked(d.class_name, mask)
    ]
    return "\n".join(lines) if lines else NO_OBJECTS


def _visible_frame(f: FrameRecord, mask: Iterable[str], limit: Optional[int]) -> FrameRecord:
    """Drop masked detections, then keep the ``limit`` largest (input order preserved)."""
    kept = [d for d in f.detections if not is_masked(d.class_name, mask)]
    if limit is not None and len(kept) > limit:
        ranked = sorted(range(len(kept)), key=lambda i: (-kept[i].area_fraction, i))[:limit]
        kept = [kept[i] for i in sorted(ranked)]
    return FrameRecord(f.frame_id, f.timestamp_ms, tuple(kept), f.source_tag)


def _frame_block(f: FrameRecord, mask: FrozenSet[str], limit: Optional[int]) -> str:
    visible = _visible_frame(f, mask, limit)
    regions = [assign_region(d) for d in visible.detections]
    return format_detections(visible, regions, mask)


def config_fingerprint(
    sens: SensitivityLevel, toggles: AblationToggles, mode: OutputMode, scene: ActiveClassSet
) -> str:
    payload = {
        "sensitivity": sens.value,
        "toggles": [
            toggles.include_sensitivity,
            toggles.include_location,
            toggles.include_instruction,
            toggles.include_motion,
        ],
        "mode": mode.value,
        "scene": scene.scene_name,
        "classes": list(scene.classes),
        "mask": sorted(scene.mask),
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def system_segments(sens: SensitivityLevel, toggles: AblationToggles) -> List[str]:
    segments = []
    if toggles.include_instruction:
        segments.append(INSTRUCTION_PROMPT)
    if toggles.include_sensitivity:
        segments.append(sensitivity_segment(sens))
    if toggles.include_location:
        segments.append(LOCATION_PROMPT)
    if toggles.include_motion:
        segments.append(MOTION_PROMPT)
    return segments


def render_scene_prompt(
    prev: Optional[FrameRecord],
    cur: FrameRecord,
    sens: SensitivityLevel = SensitivityLevel.LOW,
    toggles: AblationToggles = AblationToggles(),
    mode: OutputMode = OutputMode.FULL,
    scene: Optional[ActiveClassSet] = None,
    max_detections: Optional[int] = DEFAULT_MAX_DETECTIONS,
) -> PromptBundle:
    if scene is None:
        scene = load_scene(DEFAULT_SCENE)
    if prev is not None and prev.frame_id >= cur.frame_id:
        raise ValueError(f"previous frame {prev.frame_id} does not precede frame {cur.frame_id}")

    user_parts = ["detection classes: " + ", ".join(scene.visible_classes())]
    if prev is not None and toggles.include_motion:
        user_parts.append("last frame:\n" + _frame_block(prev, scene.mask, max_detections))
    user_parts.append(
        "current frame (object_id is the line number, starting at 0):\n"
        + _frame_block(cur, scene.mask, max_detections)
    )
    user_parts.append(FORMAT_DIRECTIVES[mode])

    return PromptBundle(
        system_text=SEGMENT_SEPARATOR.join(system_segments(sens, toggles)),
        user_text="\n".join(user_parts),
        config_fingerprint=config_fingerprint(sens, toggles, mode, scene),
        mode=mode,
        sensitivity=sens,
        toggles=toggles,
    )


def render_class_switch_prompt(custom_scene: str) -> str:
    if not isinstance(custom_scene, str) or not custom_scene.strip():
        raise ValueError("scene name must be non-empty")
    return CLASS_SWITCH_PROMPT.format(custom_scene=custom_scene.strip())


def render_interest_prompt(user_command: str) -> str:
    if not isinstance(user_command, str) or not user_command.strip():
        raise ValueError("user command must be non-empty")
    return f"{INTEREST_PROMPT}\nUser command: {user_command.strip()}"


# -- scene class lists -------------------------------------------------------

DEFAULT_SCENE = "urban_walking"


def parse_class_file(text: str) -> List[str]:
    out = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            out.append(line)
    return out


def available_scenes() -> List[str]:
    root = resources.files("navguard") / "scenes"
    return sorted(
        p.name[: -len(".txt")]
        for p in root.iterdir()
        if p.name.endswith(".txt") and p.name != "mask.txt"
    )


def load_mask(path: Optional[Path] = None) -> FrozenSet[str]:
    if path is None:
        text = (resources.files("navguard") / "scenes" / "mask.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return frozenset(parse_class_file(text))


def load_scene(name_or_path: str | Path, mask: Optional[Iterable[str]] = None) -> ActiveClassSet:
    """Load a scene list by built-in name (``urban walking`` or ``urban_walking``) or file path."""
    path = Path(name_or_path)
    if path.suffix == ".txt" and path.exists():
        text = path.read_text(encoding="utf-8")
        name = path.stem
    else:
        name = str(name_or_path).strip().lower().replace(" ", "_")
        res = resources.files("navguard") / "scenes" / f"{name}.txt"
        if name == "mask" or not res.is_file():
            raise ValueError(f"unknown scene {name_or_path!r}; built-in scenes: {', '.join(available_scenes())}")
        text = res.read_text(encoding="utf-8")
    return ActiveClassSet.build(name, parse_class_file(text), load_mask() if mask is None else mask)
