"""Detection feed wire format, ingestion and the synthetic desk-scale corpus.

One frame per line, UTF-8 JSON::

    {"frame_id": 0, "timestamp_ms": 0, "source": "clip", "objects":
     [{"class": "car", "conf": 0.9, "cx": 0.1, "cy": 0.3, "w": 0.4, "h": 0.4}]}

Geometry is normalized to [0, 1].  The same format is accepted from a file or
from the standard output of a child detector process.
"""

from __future__ import annotations

import io
import json
import math
import random
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Iterator, List, Sequence, Tuple, Union

from .config import atomic_write_text
from .spatial import Detection, FrameRecord


class FeedError(ValueError):
    def __init__(self, line: int, field: str, message: str):
        super().__init__(f"line {line}: {field}: {message}")
        self.line = line
        self.field = field


_GEOMETRY = ("conf", "cx", "cy", "w", "h")


def _int_field(obj: dict, key: str, line: int) -> int:
    if key not in obj:
        raise FeedError(line, key, "missing")
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise FeedError(line, key, f"expected integer, got {v!r}")
    return v


def parse_feed_line(text: str, line: int) -> FrameRecord:
    try:
        obj = json.loads(text)
    except ValueError as exc:
        raise FeedError(line, "<record>", f"invalid JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise FeedError(line, "<record>", "expected a JSON object")
    frame_id = _int_field(obj, "frame_id", line)
    ts = _int_field(obj, "timestamp_ms", line)
    if ts < 0:
        raise FeedError(line, "timestamp_ms", "must be non-negative")
    source = obj.get("source", "")
    if not isinstance(source, str):
        raise FeedError(line, "source", "expected string")
    objects = obj.get("objects")
    if not isinstance(objects, list):
        raise FeedError(line, "objects", "expected a list")

    dets = []
    for i, o in enumerate(objects):
        where = f"objects[{i}]"
        if not isinstance(o, dict):
            raise FeedError(line, where, "expected an object")
        cls = o.get("class")
        if not isinstance(cls, str) or not cls.strip():
            raise FeedError(line, f"{where}.class", "expected non-empty string")
        values = []
        for key in _GEOMETRY:
            v = o.get(key)
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise FeedError(line, f"{where}.{key}", f"expected number, got {v!r}")
            if not math.isfinite(v) or not 0.0 <= v <= 1.0:
                raise FeedError(line, f"{where}.{key}", f"{v!r} outside [0, 1]")
            values.append(float(v))
        conf, cx, cy, w, h = values
        dets.append(Detection(cls, conf, cx, cy, w, h))
    return FrameRecord(frame_id, ts, tuple(dets), source)


def frame_to_json(f: FrameRecord) -> str:
    return json.dumps(
        {
            "frame_id": f.frame_id,
            "timestamp_ms": f.timestamp_ms,
            "source": f.source_tag,
            "objects": [
                {"class": d.class_name, "conf": d.confidence, "cx": d.center_x,
                 "cy": d.center_y, "w": d.width, "h": d.height}
                for d in f.detections
            ],
        }
    )


def _lines(source: Union[str, Path, IO[str], Iterable[str]]) -> Iterator[str]:
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            yield from fh
    else:
        yield from source


def ingest_feed(source: Union[str, Path, IO[str], Iterable[str]]) -> Iterator[FrameRecord]:
    """Yield validated frames in order; blank lines are skipped."""
    last_id = None
    last_ts = None
    for n, text in enumerate(_lines(source), 1):
        if not text.strip():
            continue
        f = parse_feed_line(text, n)
        if last_id is not None and f.frame_id <= last_id:
            raise FeedError(n, "frame_id", f"{f.frame_id} does not follow {last_id}")
        if last_ts is not None and f.timestamp_ms < last_ts:
            raise FeedError(n, "timestamp_ms", f"{f.timestamp_ms} earlier than {last_ts}")
        last_id, last_ts = f.frame_id, f.timestamp_ms
        yield f


def ingest_process(argv: Sequence[str]) -> Iterator[FrameRecord]:
    """Run an external detector and read its feed from standard output."""
    proc = subprocess.Popen(list(argv), stdout=subprocess.PIPE, text=True, encoding="utf-8")
    try:
        yield from ingest_feed(proc.stdout)
    finally:
        if proc.poll() is None:
            proc.terminate()
        code = proc.wait()
    if code != 0:
        raise RuntimeError(f"detector process {argv[0]!r} exited with status {code}")


# -- synthetic corpus ----------------------------------------------------------

SEGMENT_FRAMES = 30
CORPUS_FPS = 30

GROUND_CLASSES = ("puddle", "crack", "traffic cone", "curb", "hole", "trash can", "dog", "bicycle")
SIDE_CLASSES = ("car", "bus", "cyclist", "scooter", "pedestrian", "motorcycle")
FRONT_CLASSES = ("traffic light", "street sign", "tree", "lamp post", "pedestrian", "car", "bench")

# generation boxes keep a margin from every region boundary and from the 10%
# area threshold, so labels survive rounding and per-frame jitter
_FRONT_CX, _FRONT_CY = (0.32, 0.68), (0.08, 0.42)
_GROUND_CX, _GROUND_CY = (0.32, 0.68), (0.58, 0.92)
_LEFT_CX, _RIGHT_CX = (0.03, 0.20), (0.80, 0.97)
_SIDE_CY = (0.20, 0.80)
_JITTER = 0.01


@dataclass
class _Track:
    cls: str
    cx: float
    cy: float
    w: float
    h: float
    conf: float
    cx_box: Tuple[float, float]
    cy_box: Tuple[float, float]


def _side_box(rng: random.Random) -> Tuple[float, float]:
    return _LEFT_CX if rng.random() < 0.5 else _RIGHT_CX


def _track(rng: random.Random, cls: str, cx_box, cy_box, w: float, h: float) -> _Track:
    return _Track(
        cls, rng.uniform(*cx_box), rng.uniform(*cy_box), w, h,
        round(rng.uniform(0.35, 0.95), 2), cx_box, cy_box,
    )


def _background(rng: random.Random) -> List[_Track]:
    tracks = []
    for _ in range(rng.randint(1, 3)):
        tracks.append(_track(rng, rng.choice(FRONT_CLASSES), _FRONT_CX, _FRONT_CY,
                             rng.uniform(0.03, 0.2), rng.uniform(0.03, 0.2)))
    for _ in range(rng.randint(0, 2)):
        w = rng.uniform(0.05, 0.2)
        h = rng.uniform(0.05, min(0.3, 0.06 / w))  # area <= 0.06
        tracks.append(_track(rng, rng.choice(SIDE_CLASSES), _side_box(rng), _SIDE_CY, w, h))
    return tracks


def _hazard(rng: random.Random) -> _Track:
    if rng.random() < 0.5:
        return _track(rng, rng.choice(GROUND_CLASSES), _GROUND_CX, _GROUND_CY,
                      rng.uniform(0.05, 0.25), rng.uniform(0.05, 0.25))
    # area >= 0.35 * 0.4 = 0.14
    return _track(rng, rng.choice(SIDE_CLASSES), _side_box(rng), _SIDE_CY,
                  rng.uniform(0.35, 0.5), rng.uniform(0.4, 0.6))


def _clamp(x: float, box: Tuple[float, float]) -> float:
    return min(box[1], max(box[0], x))


def generate_corpus(
    seed: int, n_frames: int, anomaly_rate: float, source: str = "synthetic",
    segment: int = SEGMENT_FRAMES,
) -> Tuple[List[FrameRecord], List[Tuple[int, bool]]]:
    """Deterministic detection stream with ground-truth labels.

    Frames come in scene segments of ``segment`` frames.  Exactly
    ``floor(n_frames * anomaly_rate)`` frames carry a hazard (an object in the
    Ground region or a Left/Right object covering at least 14% of the image),
    filled segment by segment in a seeded random order; every other frame
    holds only Front objects and side objects of at most 6% area.
    """
    if not 0.0 <= anomaly_rate <= 1.0:
        raise ValueError(f"anomaly_rate must lie in [0, 1], got {anomaly_rate}")
    if n_frames < 0:
        raise ValueError("n_frames must be non-negative")
    rng = random.Random(seed)
    n_segments = math.ceil(n_frames / segment)
    bounds = [(s * segment, min(n_frames, (s + 1) * segment)) for s in range(n_segments)]

    target = math.floor(n_frames * anomaly_rate + 1e-9)
    anomalous = [False] * n_frames
    order = list(range(n_segments))
    rng.shuffle(order)
    remaining = target
    for s in order:
        if remaining == 0:
            break
        lo, hi = bounds[s]
        take = min(hi - lo, remaining)
        for i in range(lo, lo + take):
            anomalous[i] = True
        remaining -= take

    frames: List[FrameRecord] = []
    for lo, hi in bounds:
        tracks = _background(rng)
        hazard = _hazard(rng)
        for i in range(lo, hi):
            live = tracks + ([hazard] if anomalous[i] else [])
            dets = []
            for t in live:
                t.cx = _clamp(t.cx + rng.uniform(-_JITTER, _JITTER), t.cx_box)
                t.cy = _clamp(t.cy + rng.uniform(-_JITTER, _JITTER), t.cy_box)
                dets.append(Detection(t.cls, t.conf, round(t.cx, 4), round(t.cy, 4),
                                      round(t.w, 4), round(t.h, 4)))
            ts = int(round(i * 1000 / CORPUS_FPS))
            frames.append(FrameRecord(i, ts, tuple(dets), source))
    labels = [(f.frame_id, a) for f, a in zip(frames, anomalous)]
    return frames, labels


def labels_csv(labels: Iterable[Tuple[int, bool]]) -> str:
    buf = io.StringIO()
    buf.write("frame_id,label\n")
    for fid, lab in labels:
        buf.write(f"{fid},{int(lab)}\n")
    return buf.getvalue()


def read_labels_csv(path: Union[str, Path]) -> List[Tuple[int, bool]]:
    rows = Path(path).read_text(encoding="utf-8").splitlines()
    if not rows or rows[0] != "frame_id,label":
        raise ValueError(f"{path}: expected header 'frame_id,label'")
    out = []
    for row in rows[1:]:
        fid, lab = row.split(",")
        out.append((int(fid), lab == "1"))
    return out


def labels_path_for(feed_path: Union[str, Path]) -> Path:
    p = Path(feed_path)
    return p.with_name(p.stem + ".labels.csv")


def write_corpus(path: Union[str, Path], seed: int, n_frames: int, anomaly_rate: float,
                 source: str = "synthetic") -> Path:
    """Write the feed and its ``<stem>.labels.csv`` companion; returns the labels path."""
    frames, labels = generate_corpus(seed, n_frames, anomaly_rate, source)
    atomic_write_text(path, "".join(frame_to_json(f) + "\n" for f in frames))
    lpath = labels_path_for(path)
    atomic_write_text(lpath, labels_csv(labels))
    return lpath
