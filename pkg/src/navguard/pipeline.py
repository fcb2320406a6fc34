"""Two-rate real-time loop: detection every N frames, LLM assessment every M frames.

Stages:

* ingest -- a reader thread pulls frames from the source into a bounded
  queue; a full queue blocks the reader (frames are never dropped);
* detect/compensate + dispatch -- the caller's thread reuses the last fresh
  detections between detector frames, labels every frame with the rule
  baseline and, on LLM ticks, renders a prompt and dispatches it;
* LLM worker -- asynchronous backends run on a single worker thread, so at
  most one call is in flight per stream; a tick that finds the worker busy is
  skipped and logged.

Scores between verdicts follow a zero-order hold (0.0 before the first one).
"""

from __future__ import annotations

import enum
import json
import logging
import queue
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from .gateway import (
    ClassListParseError,
    GatewayError,
    LlmVerdict,
    ResponseParseError,
    UsageRecord,
    ask,
    complete,
    parse_class_list,
    parse_interest,
    parse_response,
)
from .prompts import (
    DEFAULT_MAX_DETECTIONS,
    DEFAULT_SCENE,
    AblationToggles,
    ActiveClassSet,
    OutputMode,
    SensitivityLevel,
    load_scene,
    render_class_switch_prompt,
    render_interest_prompt,
    render_scene_prompt,
)
from .spatial import DEFAULT_AREA_THRESHOLD, FrameRecord, InvalidDetection, classify_frame

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    detect_interval: int = 5
    llm_interval: int = 30
    area_threshold: float = DEFAULT_AREA_THRESHOLD
    sensitivity: SensitivityLevel = SensitivityLevel.LOW
    toggles: AblationToggles = field(default_factory=AblationToggles)
    mode: OutputMode = OutputMode.ANNOTATION
    scene: ActiveClassSet = field(default_factory=lambda: load_scene(DEFAULT_SCENE))
    source_fps: float = 30.0
    timeout_ms: int = 10_000
    max_detections: int = DEFAULT_MAX_DETECTIONS
    rule_fallback: bool = False

    def __post_init__(self) -> None:
        if self.detect_interval < 1 or self.llm_interval < 1:
            raise ValueError("detect_interval and llm_interval must be >= 1")
        if self.llm_interval % self.detect_interval:
            raise ValueError(
                f"llm_interval ({self.llm_interval}) must be a multiple of "
                f"detect_interval ({self.detect_interval})"
            )
        if not 0.0 < self.area_threshold < 1.0:
            raise ValueError("area_threshold must lie in (0, 1)")
        if self.source_fps <= 0 or self.timeout_ms <= 0:
            raise ValueError("source_fps and timeout_ms must be positive")


# -- throughput model -------------------------------------------------------------


@dataclass(frozen=True)
class LatencyProfile:
    label: str
    per_detection_ms: float
    base_fps: Optional[float] = None
    compensated_fps: Optional[float] = None  # measured reference, when known

    def __post_init__(self) -> None:
        if self.per_detection_ms <= 0:
            raise ValueError("per_detection_ms must be positive")
        if self.base_fps is not None:
            implied = 1000.0 / self.per_detection_ms
            if abs(self.base_fps - implied) > 0.10 * implied:
                raise ValueError(
                    f"{self.label}: base_fps {self.base_fps} inconsistent with "
                    f"{self.per_detection_ms} ms per detection"
                )


# Detector benchmarks: chipset/framework, latency, raw FPS and FPS with
# detection every 5 frames where it was measured.
PROFILES: Dict[str, LatencyProfile] = {
    p.label: p
    for p in (
        LatencyProfile("yolov8l-pytorch-v100", 45, 22.01, 102.56),
        LatencyProfile("yolov8x-pytorch-v100", 71, 14.22, 70.11),
        LatencyProfile("yolov8x-seg-pytorch-v100", 83, 12.06, 59.68),
        LatencyProfile("yolov8-world-pytorch-v100", 50, 20.12, 98.06),
        LatencyProfile("yolov8x-world-v2-pytorch-v100", 62, 16.74, 76.88),
        LatencyProfile("yolov8x-world-v2-coreml-m2-cpu", 199, 5.01),
        LatencyProfile("yolov8x-world-v2-coreml-m2-ane", 51, 19.60),
        LatencyProfile("yolov8x-world-v2-coreml-a16-cpu", 789, 1.26),
        LatencyProfile("yolov8x-world-v2-coreml-a16-ane", 61, 16.24),
    )
}

# per-frame cost of the non-detector work (capture, compensation, rule check),
# fixed from the 62 ms row: 1000 / 76.88 - 62 / 5
DEFAULT_OVERHEAD_MS = 0.6


def effective_fps(
    profile: LatencyProfile, detect_interval: int, overhead_ms_per_frame: float = DEFAULT_OVERHEAD_MS
) -> float:
    if detect_interval < 1:
        raise ValueError("detect_interval must be >= 1")
    if overhead_ms_per_frame <= 0:
        raise ValueError("overhead_ms_per_frame must be positive")
    return 1000.0 / (profile.per_detection_ms / detect_interval + overhead_ms_per_frame)


def fit_overhead_ms(profiles: Sequence[LatencyProfile], detect_interval: int = 5) -> float:
    """Least-squares per-frame overhead in the frame-period domain.

    Each measured compensated rate gives ``1000 / fps - latency / interval``;
    the mean of those residuals minimises the squared period error.
    """
    residuals = [
        1000.0 / p.compensated_fps - p.per_detection_ms / detect_interval
        for p in profiles
        if p.compensated_fps
    ]
    if not residuals:
        raise ValueError("no profile carries a compensated FPS measurement")
    return sum(residuals) / len(residuals)


# -- events ----------------------------------------------------------------------------


class EventKind(str, enum.Enum):
    DETECTION_RAN = "DetectionRan"
    DETECTION_COMPENSATED = "DetectionCompensated"
    LLM_DISPATCHED = "LlmDispatched"
    LLM_APPLIED = "LlmApplied"
    LLM_SKIPPED_BUSY = "LlmSkippedBusy"
    LLM_FAILED = "LlmFailed"
    ALERT_EMITTED = "AlertEmitted"
    CONFIG_CHANGED = "ConfigChanged"


@dataclass(frozen=True)
class PipelineEvent:
    frame_id: int
    kind: EventKind
    timestamp_ms: int
    payload: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"frame_id": self.frame_id, "timestamp_ms": self.timestamp_ms,
             "kind": self.kind.value, "payload": self.payload}
        )


@dataclass
class StreamResult:
    events: List[PipelineEvent] = field(default_factory=list)
    scores: List[Tuple[int, float]] = field(default_factory=list)
    labels: List[Tuple[int, bool]] = field(default_factory=list)
    usage: List[UsageRecord] = field(default_factory=list)
    incomplete: bool = False
    error: Optional[str] = None
    modeled_fps: Optional[float] = None
    measured_fps: Optional[float] = None

    def count(self, kind: EventKind) -> int:
        return sum(1 for e in self.events if e.kind is kind)

    def event_log(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.events)


_END = object()


class Pipeline:
    """One stream's worth of state.  Not reusable across streams.

    ``set_scene``/``set_sensitivity``/``set_mode``/``add_target`` may be called
    from another thread (the REPL); they stage a change that the loop logs at
    the next frame and uses from the next LLM tick on.
    """

    def __init__(
        self,
        cfg: PipelineConfig,
        backend,
        profile: Optional[LatencyProfile] = None,
        *,
        queue_size: int = 64,
        realtime: bool = False,
        on_event: Optional[Callable[[PipelineEvent], None]] = None,
        on_alert: Optional[Callable[[str], None]] = None,
        on_usage: Optional[Callable[[UsageRecord], None]] = None,
    ):
        self.cfg = cfg
        self.backend = backend
        self.profile = profile
        self.queue_size = queue_size
        self.realtime = realtime
        self._on_event = on_event
        self._on_alert = on_alert
        self._on_usage = on_usage

        self._lock = threading.Lock()
        self._scene = cfg.scene
        self._sensitivity = cfg.sensitivity
        self._mode = cfg.mode
        self._staged: List[Tuple[str, str]] = []
        self.frames_processed = 0

        self._result = StreamResult()
        self._score = 0.0
        self._detections: tuple = ()
        self._detect_frame: Optional[int] = None
        self._last_llm_frame: Optional[FrameRecord] = None
        self._call_id = 0
        self._pending: Optional[Tuple[int, OutputMode, Future]] = None
        self._llm_healthy = False
        self._prev_rule_anomaly = False
        self._frame: Optional[FrameRecord] = None
        self._stop = threading.Event()

    def stop(self) -> None:
        """Ask a running stream to finish after the current frame."""
        self._stop.set()

    # -- single-writer config channel ------------------------------------------------

    def snapshot(self) -> Tuple[ActiveClassSet, SensitivityLevel, OutputMode]:
        with self._lock:
            return self._scene, self._sensitivity, self._mode

    def set_scene(self, scene: ActiveClassSet) -> None:
        with self._lock:
            self._scene = scene
            self._staged.append(("scene", f"{scene.scene_name} ({len(scene.classes)} classes)"))

    def add_target(self, name: str) -> None:
        with self._lock:
            self._scene = self._scene.with_class(name)
            self._staged.append(("target", name))

    def set_sensitivity(self, level: SensitivityLevel) -> None:
        with self._lock:
            self._sensitivity = level
            self._staged.append(("sensitivity", level.value))

    def set_mode(self, mode: OutputMode) -> None:
        with self._lock:
            self._mode = mode
            self._staged.append(("mode", mode.value))

    # -- event helpers -----------------------------------------------------------------

    def _emit(self, kind: EventKind, **payload) -> None:
        f = self._frame
        ev = PipelineEvent(f.frame_id, kind, f.timestamp_ms, payload)
        self._result.events.append(ev)
        if self._on_event:
            self._on_event(ev)

    def _alert(self, text: str, source: str) -> None:
        self._emit(EventKind.ALERT_EMITTED, source=source, text=text)
        if self._on_alert:
            self._on_alert(text)

    # -- LLM handling --------------------------------------------------------------------

    def _finish_call(self, call_id: int, mode: OutputMode, fut: Future) -> None:
        try:
            raw, usage = fut.result()
            self._result.usage.append(usage)
            if self._on_usage:
                self._on_usage(usage)
            verdict = parse_response(raw, mode)
        except (GatewayError, ResponseParseError) as exc:
            self._llm_healthy = False
            self._emit(EventKind.LLM_FAILED, call_id=call_id, error=f"{type(exc).__name__}: {exc}")
            return
        self._apply(call_id, verdict)

    def _apply(self, call_id: int, verdict: LlmVerdict) -> None:
        self._llm_healthy = True
        self._score = verdict.score
        payload = {"call_id": call_id, "mode": verdict.mode.value, "score": self._score}
        if verdict.reason is not None:
            payload["reason"] = verdict.reason
        if verdict.anomaly_label is not None:
            payload["label"] = verdict.anomaly_label
        self._emit(EventKind.LLM_APPLIED, **payload)
        if verdict.voice_guide and verdict.voice_guide.strip():
            self._alert(verdict.voice_guide.strip(), "llm")

    def _tick(self, cur: FrameRecord, executor: Optional[ThreadPoolExecutor]) -> None:
        if self._pending is not None:
            self._emit(EventKind.LLM_SKIPPED_BUSY, pending_call_id=self._pending[0])
            return
        scene, sens, mode = self.snapshot()
        bundle = render_scene_prompt(
            self._last_llm_frame, cur, sens, self.cfg.toggles, mode, scene, self.cfg.max_detections
        )
        self._last_llm_frame = cur
        call_id = self._call_id
        self._call_id += 1
        self._emit(EventKind.LLM_DISPATCHED, call_id=call_id, fingerprint=bundle.config_fingerprint)
        if executor is None:
            fut: Future = Future()
            try:
                fut.set_result(complete(bundle, self.backend, self.cfg.timeout_ms, call_id))
            except GatewayError as exc:
                fut.set_exception(exc)
            self._finish_call(call_id, mode, fut)
        else:
            fut = executor.submit(complete, bundle, self.backend, self.cfg.timeout_ms, call_id)
            self._pending = (call_id, mode, fut)

    # -- main loop ---------------------------------------------------------------------

    def _process(self, pos: int, f: FrameRecord, executor: Optional[ThreadPoolExecutor]) -> None:
        self._frame = f
        with self._lock:
            staged, self._staged = self._staged, []
        for name, value in staged:
            self._emit(EventKind.CONFIG_CHANGED, field=name, value=value)

        if self._pending is not None and self._pending[2].done():
            call_id, mode, fut = self._pending
            self._pending = None
            self._finish_call(call_id, mode, fut)

        if pos % self.cfg.detect_interval == 0:
            self._detections = f.detections
            self._detect_frame = f.frame_id
            self._emit(EventKind.DETECTION_RAN, n_objects=len(f.detections))
        else:
            self._emit(EventKind.DETECTION_COMPENSATED, from_frame=self._detect_frame)
        cur = FrameRecord(f.frame_id, f.timestamp_ms, self._detections, f.source_tag)

        rule = classify_frame(cur, self.cfg.area_threshold)
        self._result.labels.append((f.frame_id, rule.is_anomaly))
        if (
            self.cfg.rule_fallback
            and not self._llm_healthy
            and rule.is_anomaly
            and not self._prev_rule_anomaly
        ):
            t = rule.triggers[0]
            self._alert(f"Caution, {cur.detections[t.index].class_name} {t.region.value.lower()}.", "rule")
        self._prev_rule_anomaly = rule.is_anomaly

        if pos % self.cfg.llm_interval == 0:
            self._tick(cur, executor)

        self._result.scores.append((f.frame_id, self._score))
        self.frames_processed += 1

    def run(self, frames: Iterable[FrameRecord]) -> StreamResult:
        q: "queue.Queue" = queue.Queue(maxsize=self.queue_size)
        stop = threading.Event()

        def put(item) -> bool:
            while not stop.is_set():
                try:
                    q.put(item, timeout=0.05)
                    return True
                except queue.Full:
                    continue
            return False

        def reader() -> None:
            try:
                for f in frames:
                    if not put(f):
                        return
            except Exception as exc:  # surfaced by the consumer
                put(exc)
                return
            put(_END)

        thread = threading.Thread(target=reader, name="navguard-ingest", daemon=True)
        synchronous = getattr(self.backend, "synchronous", False)
        executor = None if synchronous else ThreadPoolExecutor(1, thread_name_prefix="navguard-llm")
        if self.profile is not None:
            self._result.modeled_fps = effective_fps(self.profile, self.cfg.detect_interval)

        t0 = time.perf_counter()
        first_ts: Optional[int] = None
        pos = 0
        thread.start()
        try:
            while not self._stop.is_set():
                item = q.get()
                if item is _END:
                    break
                if isinstance(item, Exception):
                    self._fail(f"source: {type(item).__name__}: {item}")
                    break
                if self.realtime:
                    if first_ts is None:
                        first_ts = item.timestamp_ms
                    delay = (item.timestamp_ms - first_ts) / 1000.0 - (time.perf_counter() - t0)
                    if delay > 0 and self._stop.wait(delay):
                        break
                try:
                    self._process(pos, item, executor)
                except InvalidDetection as exc:
                    self._fail(f"source: frame {item.frame_id}: {exc}")
                    break
                pos += 1
            if self._pending is not None and self._frame is not None:
                call_id, mode, fut = self._pending
                self._pending = None
                fut.exception()  # wait for the in-flight call
                self._finish_call(call_id, mode, fut)
        finally:
            stop.set()
            if executor is not None:
                executor.shutdown(wait=False)
        elapsed = time.perf_counter() - t0
        if pos and elapsed > 0:
            self._result.measured_fps = pos / elapsed
        return self._result

    def _fail(self, message: str) -> None:
        logger.error("stream terminated: %s", message)
        self._result.incomplete = True
        self._result.error = message


def run_stream(
    frames: Iterable[FrameRecord],
    cfg: PipelineConfig,
    backend,
    profile: Optional[LatencyProfile] = None,
    **kwargs,
) -> StreamResult:
    return Pipeline(cfg, backend, profile, **kwargs).run(frames)


# -- scene switching & interest targets ------------------------------------------------------


def switch_scene(
    command: str, backend, current: ActiveClassSet, timeout_ms: int = 10_000
) -> ActiveClassSet:
    """Ask the backend for a new class list.  ``current`` is never modified;
    on any failure the caller keeps using it."""
    prompt = render_class_switch_prompt(command)
    raw = ask(backend, prompt, timeout_ms)
    classes = parse_class_list(raw)
    new = ActiveClassSet.build(command.strip(), classes, current.mask)
    if not new.classes:
        raise ClassListParseError("every returned class was masked or empty")
    return new


def request_target(command: str, backend, timeout_ms: int = 10_000) -> str:
    return parse_interest(ask(backend, render_interest_prompt(command), timeout_ms))
