"""Chat-completion dispatch, structured response parsing and token/cost accounting."""

from __future__ import annotations

import ast
import hashlib
import json
import logging
import math
import os
import re
import time
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import httpx

from .prompts import (
    CLASS_SWITCH_PROMPT,
    FORMAT_ANNOTATION,
    FORMAT_FULL,
    FORMAT_VOICE,
    INSTRUCTION_PROMPT,
    INTEREST_PROMPT,
    LOCATION_PROMPT,
    NO_OBJECTS,
    OutputMode,
    PromptBundle,
    SensitivityLevel,
)
from .spatial import Detection, FrameRecord, Region, assign_region

logger = logging.getLogger(__name__)

API_KEY_ENV = "NAVGUARD_API_KEY"
CHARS_PER_TOKEN = 4


# -- errors -------------------------------------------------------------------


class GatewayError(RuntimeError):
    def __init__(self, message: str, call_id: Optional[int] = None):
        super().__init__(message if call_id is None else f"call {call_id}: {message}")
        self.call_id = call_id


class LlmTimeout(GatewayError):
    pass


class TransportError(GatewayError):
    pass


class AuthError(GatewayError):
    pass


class ResponseParseError(ValueError):
    pass


class NoJsonFound(ResponseParseError):
    pass


class SchemaViolation(ResponseParseError):
    def __init__(self, key: str, detail: str = ""):
        super().__init__(f"schema violation at {key!r}" + (f": {detail}" if detail else ""))
        self.key = key


class RangeViolation(ResponseParseError):
    def __init__(self, key: str, value: Any):
        super().__init__(f"{key}={value!r} outside the allowed range")
        self.key = key
        self.value = value


# -- records ------------------------------------------------------------------


@dataclass(frozen=True)
class LlmVerdict:
    mode: OutputMode
    raw_text: str
    anomaly_score: Optional[float] = None
    anomaly_label: Optional[int] = None
    reason: Optional[str] = None
    voice_guide: Optional[str] = None
    scene: Optional[str] = None
    key_objects: Optional[str] = None
    anomaly_index: Optional[Tuple[Tuple[Union[int, str], float], ...]] = None

    @property
    def score(self) -> float:
        """Per-frame anomaly score in [0, 1] regardless of mode.

        Full mode uses the highest per-object danger index (the label when no
        objects are indexed); voice-only mode has no score, so any spoken
        alert counts as 1.0.
        """
        if self.mode is OutputMode.ANNOTATION:
            return float(self.anomaly_score)
        if self.mode is OutputMode.FULL:
            if self.anomaly_index:
                return max(d for _, d in self.anomaly_index)
            return float(self.anomaly_label)
        return 1.0 if self.voice_guide and self.voice_guide.strip() else 0.0


@dataclass(frozen=True)
class UsageRecord:
    call_id: int
    mode: str
    latency_ms: int
    prompt_tokens: int
    completion_tokens: int
    total_tokens: int

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be non-negative")
        if self.total_tokens != self.prompt_tokens + self.completion_tokens:
            raise ValueError("total_tokens must equal prompt_tokens + completion_tokens")


@dataclass(frozen=True)
class PriceTable:
    prompt_price_per_1k: float
    completion_price_per_1k: float
    calls_per_day: int
    label: str = ""

    def __post_init__(self) -> None:
        if self.prompt_price_per_1k < 0 or self.completion_price_per_1k < 0 or self.calls_per_day < 0:
            raise ValueError("prices and calls_per_day must be non-negative")


# USD per 1k tokens for gpt-3.5-turbo; 7200 calls/day is one call per second
# (every 30 frames at 30 FPS) over 2 hours of use.
DEFAULT_PRICES = PriceTable(0.0005, 0.0015, 7200, "gpt-3.5-turbo, 1 call/s, 2 h/day")


def load_prices(source: str) -> PriceTable:
    """``default`` or a key=value file with prompt_price_per_1k, completion_price_per_1k, calls_per_day."""
    if source == "default":
        return DEFAULT_PRICES
    from .config import read_kv_file

    kv = read_kv_file(source)
    try:
        return PriceTable(
            float(kv["prompt_price_per_1k"]),
            float(kv["completion_price_per_1k"]),
            int(kv["calls_per_day"]),
            kv.get("label", Path(source).stem),
        )
    except KeyError as exc:
        raise ValueError(f"{source}: missing price key {exc.args[0]!r}") from None


# -- JSON extraction & parsing ------------------------------------------------


def _balanced_end(text: str, start: int) -> int:
    """Index just past the brace closing ``text[start]``, or -1."""
    depth = 0
    in_str = False
    escape = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_str:
            if escape:
                escape = False
            elif ch == "\\":
                escape = True
            elif ch == '"':
                in_str = False
        elif ch == '"':
            in_str = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return i + 1
    return -1


def _loads_lenient(candidate: str) -> Any:
    try:
        return json.loads(candidate)
    except Exception:
        pass
    # models sometimes emit trailing commas or python-style quoting
    try:
        return json.loads(re.sub(r",\s*([\]}])", r"\1", candidate))
    except Exception:
        pass
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # odd escapes in model text are not our problem
            return ast.literal_eval(candidate)
    except Exception:
        return None


def extract_json_object(raw: str) -> Dict[str, Any]:
    """Return the first balanced ``{...}`` block of ``raw`` that decodes to a dict."""
    if not isinstance(raw, str):
        raise NoJsonFound(f"expected text, got {type(raw).__name__}")
    start = raw.find("{")
    while start != -1:
        end = _balanced_end(raw, start)
        if end == -1:
            # unbalanced from here on; a later '{' may still close
            start = raw.find("{", start + 1)
            continue
        obj = _loads_lenient(raw[start:end])
        if isinstance(obj, dict):
            return obj
        start = raw.find("{", start + 1)
    raise NoJsonFound("no JSON object found in response")


def _number(obj: Dict[str, Any], key: str) -> float:
    value = obj[key]
    if isinstance(value, str):
        try:
            value = float(value.strip())
        except ValueError:
            raise SchemaViolation(key, "not a number") from None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaViolation(key, "not a number")
    try:
        value = float(value)
    except OverflowError:
        raise RangeViolation(key, value) from None
    if not math.isfinite(value) or not 0.0 <= value <= 1.0:
        raise RangeViolation(key, value)
    return value


def _text(obj: Dict[str, Any], key: str) -> str:
    value = obj[key]
    if not isinstance(value, str):
        raise SchemaViolation(key, "not a string")
    return value


def _label(obj: Dict[str, Any], key: str) -> int:
    value = _number(obj, key)
    if value not in (0.0, 1.0):
        raise RangeViolation(key, obj[key])
    return int(value)


def _object_id(value: Any) -> Union[int, str]:
    if isinstance(value, bool):
        raise SchemaViolation("anomaly_index", "object_id must be an integer or string")
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str) and value.strip():
        v = value.strip()
        return int(v) if v.isdigit() else v
    raise SchemaViolation("anomaly_index", "object_id must be an integer or string")


def _anomaly_index(value: Any) -> Tuple[Tuple[Union[int, str], float], ...]:
    """Accept ``[[id, d], ...]``, ``[{"object_id":.., "danger_index":..}, ...]`` or ``{id: d}``."""
    pairs: List[Tuple[Any, Any]] = []
    if isinstance(value, dict):
        pairs = list(value.items())
    elif isinstance(value, list):
        for item in value:
            if isinstance(item, (list, tuple)) and len(item) == 2:
                pairs.append((item[0], item[1]))
            elif isinstance(item, dict) and "object_id" in item and "danger_index" in item:
                pairs.append((item["object_id"], item["danger_index"]))
            else:
                raise SchemaViolation("anomaly_index", f"unrecognised entry {item!r}")
    else:
        raise SchemaViolation("anomaly_index", "expected a list or mapping")
    out = []
    for oid, danger in pairs:
        d = _number({"danger_index": danger}, "danger_index")
        out.append((_object_id(oid), d))
    return tuple(out)


_REQUIRED = {
    OutputMode.ANNOTATION: ("anomaly_score", "reason"),
    OutputMode.VOICE_ONLY: ("voice_guide",),
    OutputMode.FULL: ("scene", "key_objects", "anomaly_label", "anomaly_index", "voice_guide"),
}


def parse_response(raw: str, mode: OutputMode) -> LlmVerdict:
    """Parse a model reply for ``mode``; never fills in defaults for missing keys."""
    obj = extract_json_object(raw)
    for key in _REQUIRED[mode]:
        if key not in obj:
            raise SchemaViolation(key, "missing")
    if mode is OutputMode.ANNOTATION:
        return LlmVerdict(
            mode, raw, anomaly_score=_number(obj, "anomaly_score"), reason=_text(obj, "reason")
        )
    if mode is OutputMode.VOICE_ONLY:
        return LlmVerdict(mode, raw, voice_guide=_text(obj, "voice_guide"))
    return LlmVerdict(
        mode,
        raw,
        scene=_text(obj, "scene"),
        key_objects=_text(obj, "key_objects"),
        anomaly_label=_label(obj, "anomaly_label"),
        anomaly_index=_anomaly_index(obj["anomaly_index"]),
        voice_guide=_text(obj, "voice_guide"),
    )


# -- backends -----------------------------------------------------------------


@dataclass
class ChatReply:
    text: str
    prompt_tokens: Optional[int] = None
    completion_tokens: Optional[int] = None


class HttpBackend:
    """OpenAI-compatible ``/chat/completions`` endpoint.

    Connection failures, 429 and 5xx responses are retried with exponential
    backoff; 401/403 fail immediately.  A timeout is not retried: by the time
    it fires the frame it describes is already stale.
    """

    synchronous = False

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: Optional[str] = None,
        retries: int = 3,
        backoff_s: float = 0.5,
        transport: Optional[httpx.BaseTransport] = None,
        sleep=time.sleep,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.retries = retries
        self.backoff_s = backoff_s
        self._transport = transport
        self._sleep = sleep

    def chat(self, system: str, user: str, timeout_ms: int, call_id: int = 0) -> ChatReply:
        messages = []
        if system:
            messages.append({"role": "system", "content": system})
        messages.append({"role": "user", "content": user})
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {"model": self.model, "messages": messages}

        last_error = "no attempt made"
        with httpx.Client(transport=self._transport, timeout=timeout_ms / 1000.0) as client:
            for attempt in range(self.retries + 1):
                if attempt:
                    self._sleep(self.backoff_s * 2 ** (attempt - 1))
                try:
                    resp = client.post(self.endpoint, json=body, headers=headers)
                except httpx.TimeoutException as exc:
                    raise LlmTimeout(f"no reply within {timeout_ms} ms ({exc})", call_id) from exc
                except httpx.TransportError as exc:
                    last_error = f"{type(exc).__name__}: {exc}"
                    logger.warning("call %d attempt %d failed: %s", call_id, attempt + 1, last_error)
                    continue
                if resp.status_code in (401, 403):
                    raise AuthError(f"HTTP {resp.status_code} from {self.endpoint}", call_id)
                if resp.status_code == 429 or resp.status_code >= 500:
                    last_error = f"HTTP {resp.status_code}"
                    logger.warning("call %d attempt %d failed: %s", call_id, attempt + 1, last_error)
                    continue
                if resp.status_code >= 400:
                    raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}", call_id)
                try:
                    data = resp.json()
                    text = data["choices"][0]["message"]["content"]
                except (ValueError, KeyError, IndexError, TypeError) as exc:
                    raise TransportError(f"malformed completion payload ({exc})", call_id) from exc
                usage = data.get("usage") or {}
                return ChatReply(text, usage.get("prompt_tokens"), usage.get("completion_tokens"))
        raise TransportError(f"gave up after {self.retries + 1} attempts: {last_error}", call_id)


def heuristic_tokens(text: str) -> int:
    return math.ceil(len(text) / CHARS_PER_TOKEN)


def complete(
    p: PromptBundle, backend, timeout_ms: int = 10_000, call_id: int = 0
) -> Tuple[str, UsageRecord]:
    """Send one bundle; returns the raw reply and its usage record."""
    t0 = time.perf_counter()
    reply = backend.chat(p.system_text, p.user_text, timeout_ms, call_id)
    latency_ms = int(round((time.perf_counter() - t0) * 1000))
    prompt_tokens = reply.prompt_tokens
    if prompt_tokens is None:
        prompt_tokens = heuristic_tokens(p.system_text + p.user_text)
    completion_tokens = reply.completion_tokens
    if completion_tokens is None:
        completion_tokens = heuristic_tokens(reply.text)
    usage = UsageRecord(
        call_id, p.mode.value, latency_ms, prompt_tokens, completion_tokens,
        prompt_tokens + completion_tokens,
    )
    return reply.text, usage


def ask(backend, prompt: str, timeout_ms: int = 10_000, call_id: int = 0) -> str:
    """Single user-message request (scene switching, interest targets)."""
    return backend.chat("", prompt, timeout_ms, call_id).text


# -- deterministic mock ---------------------------------------------------------

SENSITIVITY_GAIN = {SensitivityLevel.LOW: 1.0, SensitivityLevel.MEDIUM: 1.5, SensitivityLevel.HIGH: 2.0}
GROUND_WEIGHT = 0.6
SIDE_CAP = 0.4
ALERT_SCORE = 0.5


def mock_score(f: FrameRecord, sens: SensitivityLevel) -> float:
    ground = any(assign_region(d) is Region.GROUND for d in f.detections)
    side = max(
        (d.area_fraction for d in f.detections if assign_region(d) in (Region.LEFT, Region.RIGHT)),
        default=0.0,
    )
    s = min(SIDE_CAP, side) * SENSITIVITY_GAIN[sens]
    return min(1.0, max(0.0, (GROUND_WEIGHT if ground else 0.0) + s))


_LINE = re.compile(
    r"^(?P<cls>.+) \| (?P<region>Left|Right|Front|Ground) \| center (?P<cx>\d+)%,(?P<cy>\d+)% "
    r"\| size (?P<w>\d+)%x(?P<h>\d+)% \| conf (?P<conf>[0-9.]+)$"
)
_SENS = re.compile(r"Current sensitivity: (low|medium|high)\.")
_CURRENT_HEADER = "current frame"

PARK_CLASSES = (
    "bench", "tree", "walking path", "dog", "bicycle", "pond",
    "trash can", "lamp post", "playground", "fountain",
)


@dataclass(frozen=True)
class _SeenObject:
    cls: str
    region: Region
    area: float
    det: Detection


def _read_current_frame(user_text: str) -> List[_SeenObject]:
    lines = user_text.splitlines()
    start = next((i for i, ln in enumerate(lines) if ln.startswith(_CURRENT_HEADER)), None)
    if start is None:
        return []
    seen = []
    for ln in lines[start + 1:]:
        if ln == NO_OBJECTS:
            break
        m = _LINE.match(ln)
        if not m:
            break
        w, h = int(m["w"]) / 100, int(m["h"]) / 100
        det = Detection(m["cls"], float(m["conf"]), int(m["cx"]) / 100, int(m["cy"]) / 100, w, h)
        seen.append(_SeenObject(m["cls"], Region(m["region"]), w * h, det))
    return seen


def _unit_hash(*parts: str) -> float:
    digest = hashlib.sha256("\x1f".join(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


def _side(region: Region) -> str:
    return "on your left" if region is Region.LEFT else "on your right"


class MockBackend:
    """Offline stand-in that reads prompts the way the system expects a model to.

    With the full prompt it answers with ``mock_score`` of the current frame.
    Removing prompt segments degrades it deterministically: without the
    location segment region semantics are lost (size alone drives the score),
    without the instruction the answer is half noise, and without the
    sensitivity segment it assumes medium sensitivity.
    """

    synchronous = True

    def __init__(self, seed: int = 0, scene_lists: Optional[Dict[str, Sequence[str]]] = None):
        self.seed = seed
        self.scene_lists = {"park": PARK_CLASSES}
        if scene_lists:
            self.scene_lists.update(scene_lists)

    def chat(self, system: str, user: str, timeout_ms: int = 0, call_id: int = 0) -> ChatReply:
        if "please generate a new list that contains the top 100 related objects" in user:
            return ChatReply(self._class_list(user))
        if user.startswith(INTEREST_PROMPT):
            return ChatReply(self._interest(user))
        return ChatReply(self._assess(system, user))

    def _class_list(self, user: str) -> str:
        prefix = CLASS_SWITCH_PROMPT.split("{custom_scene}")[0]
        suffix = CLASS_SWITCH_PROMPT.split("{custom_scene}")[1]
        scene = user[len(prefix):].split(suffix)[0].strip().lower() if user.startswith(prefix) else ""
        classes = self.scene_lists.get(scene)
        if classes is None:
            classes = [f"{scene} obstacle", "person", "car", "bicycle", "curb", "pole", "hole", "stair"]
        return "\n".join(classes)

    def _interest(self, user: str) -> str:
        command = user.split("User command:", 1)[-1].strip().lower()
        filler = {"find", "the", "nearest", "closest", "a", "an", "watch", "for", "look", "locate", "me", "show", "where", "is"}
        words = [w for w in command.split() if w not in filler]
        target = " ".join(words) or command
        return json.dumps({"add": target})

    def _assess(self, system: str, user: str) -> str:
        objects = _read_current_frame(user)
        m = _SENS.search(system)
        sens = SensitivityLevel(m.group(1)) if m else SensitivityLevel.MEDIUM
        if LOCATION_PROMPT in system:
            score = mock_score(FrameRecord(0, 0, tuple(o.det for o in objects)), sens)
        else:
            biggest = max((o.area for o in objects), default=0.0)
            score = min(1.0, min(SIDE_CAP, biggest) * SENSITIVITY_GAIN[sens])
        if INSTRUCTION_PROMPT not in system:
            score = 0.5 * score + 0.5 * _unit_hash(str(self.seed), system, user)
        if FORMAT_ANNOTATION in user:
            return json.dumps({"anomaly_score": score, "reason": self._reason(objects, score)})
        if FORMAT_VOICE in user:
            return json.dumps({"voice_guide": self._voice(objects, score)})
        if FORMAT_FULL in user:
            return self._full(objects, score, sens, LOCATION_PROMPT in system)
        return "I can help with navigation. Please describe the scene."

    @staticmethod
    def _hazard(objects: List[_SeenObject]) -> Optional[_SeenObject]:
        ground = [o for o in objects if o.region is Region.GROUND]
        if ground:
            return max(ground, key=lambda o: o.area)
        sides = [o for o in objects if o.region in (Region.LEFT, Region.RIGHT)]
        return max(sides, key=lambda o: o.area) if sides else None

    def _reason(self, objects: List[_SeenObject], score: float) -> str:
        hazard = self._hazard(objects)
        if hazard is None or score < 0.1:
            return "No immediate danger."
        if hazard.region is Region.GROUND:
            return f"{hazard.cls.capitalize()} in path ahead."
        return f"{hazard.cls.capitalize()} {_side(hazard.region)}."

    def _voice(self, objects: List[_SeenObject], score: float) -> str:
        if score < ALERT_SCORE:
            return ""
        hazard = self._hazard(objects)
        if hazard is None:
            return "Caution, obstacle ahead."
        if hazard.region is Region.GROUND:
            return f"Stop, {hazard.cls} right in front of you."
        return f"Caution, {hazard.cls} {_side(hazard.region)}."

    def _full(self, objects: List[_SeenObject], score: float, sens: SensitivityLevel, located: bool) -> str:
        index = []
        top = None
        for i, o in enumerate(objects):
            if located:
                own = mock_score(FrameRecord(0, 0, (o.det,)), sens)
            else:
                own = min(1.0, min(SIDE_CAP, o.area) * SENSITIVITY_GAIN[sens])
            index.append([i, own])
            if top is None or own > index[top][1]:
                top = i
        if top is not None:
            index[top][1] = score  # frame-level danger sits on the riskiest object
        where = "; ".join(f"{o.cls} {o.region.value.lower()}" for o in objects) or "nothing detected"
        reply = {
            "scene": "Walking with objects around." if objects else "Clear path.",
            "key_objects": where,
            "anomaly_checker": "Potential danger." if score >= ALERT_SCORE else "No immediate danger.",
            "anomaly_label": 1 if score >= ALERT_SCORE else 0,
            "anomaly_index": index,
            "voice_guide": self._voice(objects, score),
        }
        return json.dumps(reply)


# -- scene switching / interest replies ----------------------------------------


class ClassListParseError(ValueError):
    pass


_BULLET = re.compile(r"^\s*(?:[-*•]+|\d+[.)])\s*")


def parse_class_list(raw: str) -> List[str]:
    """Class names from a list literal, one-per-line text, or a comma-separated line."""
    if not isinstance(raw, str) or not raw.strip():
        raise ClassListParseError("empty class list")
    text = raw.strip()
    fenced = re.search(r"```(?:\w+)?\s*(.*?)```", text, re.DOTALL)
    if fenced:
        text = fenced.group(1).strip()
    bracket = re.search(r"\[.*\]", text, re.DOTALL)
    if bracket:
        literal = _loads_lenient(bracket.group(0))
        if isinstance(literal, list) and literal and all(isinstance(x, str) for x in literal):
            items = literal
        else:
            raise ClassListParseError("list literal does not contain only strings")
    else:
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if len(lines) == 1:
            lines = lines[0].split(",")
        items = [_BULLET.sub("", ln).strip().strip("'\"").strip() for ln in lines]
    items = [i for i in (x.strip() for x in items) if i]
    if not items:
        raise ClassListParseError("no class names found")
    return items


def parse_interest(raw: str) -> str:
    obj = extract_json_object(raw)
    if "add" not in obj:
        raise SchemaViolation("add", "missing")
    target = _text(obj, "add").strip()
    if not target:
        raise SchemaViolation("add", "empty object name")
    return target


# -- cost accounting --------------------------------------------------------------


def estimate_cost(usage: Sequence[UsageRecord], prices: PriceTable = DEFAULT_PRICES) -> Tuple[float, float]:
    """Mean per-call charge and the implied daily charge."""
    if not usage:
        raise ValueError("usage must contain at least one record")
    modes = {u.mode for u in usage}
    if len(modes) > 1:
        raise ValueError(f"usage mixes modes {sorted(modes)}; estimate each mode separately")
    n = len(usage)
    mean_prompt = sum(u.prompt_tokens for u in usage) / n
    mean_completion = sum(u.completion_tokens for u in usage) / n
    per_call = (
        mean_prompt * prices.prompt_price_per_1k / 1000
        + mean_completion * prices.completion_price_per_1k / 1000
    )
    return per_call, per_call * prices.calls_per_day


def usage_to_json(u: UsageRecord) -> str:
    return json.dumps(asdict(u))


def append_usage(path: Union[str, Path], records: Iterable[UsageRecord]) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for r in records:
            fh.write(usage_to_json(r) + "\n")


def read_usage(path: Union[str, Path]) -> List[UsageRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(UsageRecord(**json.loads(line)))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{n}: bad usage record ({exc})") from None
    return out
