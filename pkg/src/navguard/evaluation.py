"""Agreement metrics between LLM anomaly scores and the rule baseline.

The rule baseline plays the role of ground truth, so every number here is an
agreement measure with the H-pattern rules, not accuracy against reality.

AUC and AP are accumulated in integer counts and divided once at the end, so
equal inputs always produce bit-identical floats.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

from .config import atomic_write_text
from .pipeline import PipelineConfig, StreamResult, run_stream
from .prompts import AblationToggles, SensitivityLevel
from .spatial import FrameRecord


class SingleClassError(ValueError):
    """Metric undefined because only one label class is present."""


@dataclass(frozen=True)
class ScoredFrame:
    frame_id: int
    score: float
    label: bool

    def __post_init__(self) -> None:
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"frame {self.frame_id}: score {self.score!r} outside [0, 1]")


RocPoint = Tuple[float, float, float]


@dataclass
class MetricsReport:
    auc: float
    ap: float
    roc_points: List[RocPoint]
    confusion: Tuple[int, int, int, int]
    threshold: float
    n: int

    def to_json(self) -> str:
        d = asdict(self)
        # JSON has no infinity; the sweep's opening point has threshold +inf
        d["roc_points"] = [[fpr, tpr, t if math.isfinite(t) else None] for fpr, tpr, t in self.roc_points]
        d["confusion"] = dict(zip(("tp", "fp", "tn", "fn"), self.confusion))
        return json.dumps(d, indent=2) + "\n"


def scored_frames(result: StreamResult) -> List[ScoredFrame]:
    return [
        ScoredFrame(fid, score, label)
        for (fid, score), (_, label) in zip(result.scores, result.labels)
    ]


def _sweep(data: Sequence[ScoredFrame]) -> Tuple[List[Tuple[float, int, int]], int, int]:
    """Cumulative (threshold, tp, fp) at each distinct score, descending."""
    pos = sum(1 for d in data if d.label)
    neg = len(data) - pos
    ordered = sorted(data, key=lambda d: d.score, reverse=True)
    steps = []
    tp = fp = 0
    i = 0
    while i < len(ordered):
        t = ordered[i].score
        while i < len(ordered) and ordered[i].score == t:
            if ordered[i].label:
                tp += 1
            else:
                fp += 1
            i += 1
        steps.append((t, tp, fp))
    return steps, pos, neg


def roc_auc(data: Sequence[ScoredFrame]) -> Tuple[List[RocPoint], float]:
    steps, pos, neg = _sweep(data)
    if pos == 0 or neg == 0:
        raise SingleClassError(f"ROC needs both classes (positives={pos}, negatives={neg})")
    points: List[RocPoint] = [(0.0, 0.0, math.inf)]
    twice_area = 0  # trapezoid area in count units, times two
    prev_tp = prev_fp = 0
    for t, tp, fp in steps:
        twice_area += (fp - prev_fp) * (tp + prev_tp)
        points.append((fp / neg, tp / pos, t))
        prev_tp, prev_fp = tp, fp
    return points, float(Fraction(twice_area, 2 * pos * neg))


def average_precision(data: Sequence[ScoredFrame]) -> float:
    """Sum over thresholds of (recall step) x precision, ties grouped."""
    steps, pos, _ = _sweep(data)
    if pos == 0:
        raise SingleClassError("average precision needs at least one positive")
    total = Fraction(0)
    prev_tp = 0
    for _, tp, fp in steps:
        if tp > prev_tp:
            total += Fraction(tp - prev_tp, pos) * Fraction(tp, tp + fp)
        prev_tp = tp
    return float(total)


def confusion_at(data: Iterable[ScoredFrame], threshold: float) -> Tuple[int, int, int, int]:
    """(tp, fp, tn, fn) with a frame predicted positive when score >= threshold."""
    tp = fp = tn = fn = 0
    for d in data:
        predicted = d.score >= threshold
        if predicted and d.label:
            tp += 1
        elif predicted:
            fp += 1
        elif d.label:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn


def metrics_report(data: Sequence[ScoredFrame], threshold: float = 0.5) -> MetricsReport:
    points, auc = roc_auc(data)
    return MetricsReport(auc, average_precision(data), points, confusion_at(data, threshold),
                         threshold, len(data))


# -- ablation -----------------------------------------------------------------------------

GridRow = Tuple[SensitivityLevel, AblationToggles]

# the three sensitivities with every segment, then low with one segment removed
DEFAULT_GRID: List[GridRow] = [
    (SensitivityLevel.LOW, AblationToggles()),
    (SensitivityLevel.MEDIUM, AblationToggles()),
    (SensitivityLevel.HIGH, AblationToggles()),
    (SensitivityLevel.LOW, AblationToggles(include_instruction=False)),
    (SensitivityLevel.LOW, AblationToggles(include_location=False)),
    (SensitivityLevel.LOW, AblationToggles(include_sensitivity=False)),
]


@dataclass
class AblationRow:
    sensitivity: str
    toggles: str
    ap: Optional[float]
    auc: Optional[float]
    error: Optional[str] = None


def row_label(sens: SensitivityLevel, toggles: AblationToggles) -> str:
    return f"{sens.value if toggles.include_sensitivity else '-'}/{toggles.label()}"


def run_ablation(
    corpus: Sequence[FrameRecord], grid: Sequence[GridRow], backend, base: Optional[PipelineConfig] = None
) -> List[AblationRow]:
    """One pipeline run per grid row; a failing row is recorded and the rest continue."""
    base = base or PipelineConfig()
    rows = []
    for sens, toggles in grid:
        try:
            cfg = replace(base, sensitivity=sens, toggles=toggles)
            result = run_stream(corpus, cfg, backend)
            if result.incomplete:
                raise RuntimeError(result.error)
            data = scored_frames(result)
            _, auc = roc_auc(data)
            rows.append(AblationRow(sens.value, toggles.label(), average_precision(data), auc))
        except Exception as exc:
            rows.append(AblationRow(sens.value, toggles.label(), None, None, f"{type(exc).__name__}: {exc}"))
    return rows


def ablation_json(rows: Sequence[AblationRow]) -> str:
    return json.dumps([asdict(r) for r in rows], indent=2) + "\n"


def parse_grid(text: str) -> List[GridRow]:
    """JSON list of {"sensitivity": .., "include_sensitivity": .., ...} objects."""
    rows = []
    for i, obj in enumerate(json.loads(text)):
        try:
            sens = SensitivityLevel.parse(obj.get("sensitivity", "low"))
            toggles = AblationToggles(
                **{k: bool(obj[k]) for k in (
                    "include_sensitivity", "include_location", "include_instruction", "include_motion"
                ) if k in obj}
            )
        except (AttributeError, ValueError) as exc:
            raise ValueError(f"grid row {i}: {exc}") from None
        rows.append((sens, toggles))
    return rows


# -- heatmap export -------------------------------------------------------------------------


def heatmap_csv(data: Sequence[ScoredFrame]) -> str:
    buf = io.StringIO()
    buf.write(",".join(["series"] + [str(d.frame_id) for d in data]) + "\n")
    if data:
        buf.write(",".join(["baseline"] + [str(int(d.label)) for d in data]) + "\n")
        buf.write(",".join(["llm"] + [f"{d.score:.6f}" for d in data]) + "\n")
    return buf.getvalue()


def export_heatmap(data: Sequence[ScoredFrame], path: Union[str, Path]) -> None:
    """Two rows (binary baseline, float LLM score) with one column per frame."""
    atomic_write_text(path, heatmap_csv(data))


def read_heatmap(path: Union[str, Path]) -> List[ScoredFrame]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    ids = [int(x) for x in lines[0].split(",")[1:]]
    if not ids:
        return []
    rows = {ln.split(",")[0]: ln.split(",")[1:] for ln in lines[1:]}
    return [
        ScoredFrame(fid, float(s), b == "1")
        for fid, b, s in zip(ids, rows["baseline"], rows["llm"])
    ]
