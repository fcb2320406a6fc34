"""Acceptance gate: one test per criterion, each reported as a PASS/FAIL line."""

import random
import time

import pytest

from golden_cases import CUR, GOLDEN_DIR, PREV, SCENE, combinations, golden_name, render
from oracles import ap_oracle, auc_oracle, frame_is_anomaly_oracle, region_oracle
from navguard.evaluation import (
    DEFAULT_GRID,
    ScoredFrame,
    average_precision,
    heatmap_csv,
    metrics_report,
    roc_auc,
    run_ablation,
    scored_frames,
    ablation_json,
)
from navguard.feed import generate_corpus
from navguard.gateway import MockBackend, ResponseParseError, UsageRecord, estimate_cost, parse_response
from navguard.pipeline import PROFILES, EventKind, LatencyProfile, PipelineConfig, effective_fps, fit_overhead_ms, run_stream
from navguard.prompts import OutputMode, SensitivityLevel, render_scene_prompt
from navguard.spatial import Detection, FrameRecord, Region, assign_region, classify_frame


def _det(cx, cy, w=0.1, h=0.1):
    return Detection("obj", 0.9, cx, cy, w, h)


@pytest.mark.criterion(1, "region partition")
def test_region_partition(criterion):
    t0 = time.perf_counter()
    for i in range(101):
        for j in range(101):
            cx, cy = i / 100, j / 100
            hits = region_oracle(cx, cy)
            assert len(hits) == 1
            assert assign_region(_det(cx, cy)).value == hits[0]
    elapsed = time.perf_counter() - t0
    ties = {(0.25, 0.3): Region.FRONT, (0.75, 0.3): Region.FRONT, (0.5, 0.5): Region.FRONT,
            (0.25, 0.51): Region.GROUND, (0.2499, 0.9): Region.LEFT, (0.7501, 0.1): Region.RIGHT}
    for (cx, cy), region in ties.items():
        assert assign_region(_det(cx, cy)) is region
    criterion["detail"] = f"(10201 points, {elapsed:.3f} s)"
    assert elapsed < 1.0


@pytest.mark.criterion(2, "baseline oracle equivalence")
def test_baseline_oracle(criterion):
    rng = random.Random(2024)
    t0 = time.perf_counter()
    agree = 0
    for k in range(1000):
        objs = [tuple(rng.random() for _ in range(4)) for _ in range(rng.randint(0, 12))]
        f = FrameRecord(k, k, tuple(_det(*o) for o in objs))
        agree += classify_frame(f).is_anomaly == frame_is_anomaly_oracle(objs)
    elapsed = time.perf_counter() - t0
    criterion["detail"] = f"({agree}/1000 agree, {elapsed:.3f} s)"
    assert agree == 1000 and elapsed < 5.0


@pytest.mark.criterion(3, "throughput model")
def test_throughput(criterion):
    gpu = [p for p in PROFILES.values() if p.compensated_fps]
    assert len(gpu) == 5
    overhead = fit_overhead_ms(gpu)
    errors = [abs(effective_fps(p, 5, overhead) - p.compensated_fps) / p.compensated_fps for p in gpu]
    base = effective_fps(LatencyProfile("62ms", 62), 1, overhead)
    criterion["detail"] = f"(overhead {overhead:.3f} ms, max err {max(errors):.1%}, 62 ms base {base:.2f} FPS)"
    assert max(errors) < 0.15
    assert abs(base - 16) / 16 < 0.15


@pytest.mark.criterion(4, "cadence counts")
def test_cadence(criterion):
    frames, _ = generate_corpus(4, 900, 0.2)
    r = run_stream(frames, PipelineConfig(), MockBackend())
    ran = r.count(EventKind.DETECTION_RAN)
    ticks = r.count(EventKind.LLM_DISPATCHED) + r.count(EventKind.LLM_SKIPPED_BUSY)
    criterion["detail"] = f"(DetectionRan {ran}, LLM ticks {ticks})"
    assert ran == 180 and ticks == 30


@pytest.mark.criterion(5, "cost reproduction")
def test_cost(criterion):
    def per_day(prompt, completion, mode):
        return estimate_cost([UsageRecord(0, mode, 0, prompt, completion, prompt + completion)])[1]

    voice, annot, full = per_day(573, 35, "voice"), per_day(573, 48, "annotation"), per_day(1195, 176, "full")
    criterion["detail"] = f"(voice {voice:.4f}, annotation {annot:.4f}; full {full:.2f} vs 13.53, mismatch left visible)"
    assert abs(voice - 2.44) / 2.44 < 0.01
    assert abs(annot - 2.58) / 2.58 < 0.01


ANCHORS = {
    "include_instruction": "voice assistant for a visually impaired user",
    "include_sensitivity": "Current sensitivity:",
    "include_location": "left 25% or right 25%",
    "include_motion": "speed and direction",
}


@pytest.mark.criterion(6, "prompt fidelity")
def test_prompt_fidelity(criterion):
    n = 0
    for sens, toggles, mode in combinations():
        expected = (GOLDEN_DIR / golden_name(sens, toggles, mode)).read_bytes()
        assert render(sens, toggles, mode).encode("utf-8") == expected
        system = render_scene_prompt(PREV, CUR, sens, toggles, mode, SCENE).system_text
        for flag, anchor in ANCHORS.items():
            if getattr(toggles, flag):
                assert anchor in system
        n += 1
    criterion["detail"] = f"({n} golden files)"
    assert n == 144


VALID = [
    '{"anomaly_score": 0.85, "reason": "Car and people nearby."}',
    '{"voice_guide": "stop"}',
    '{"scene": "s", "key_objects": "k", "anomaly_label": 1, "anomaly_index": [[0, 0.5]], "voice_guide": "v"}',
]


def _fuzz_strings(rng, count):
    pieces = ['{', '}', '[', ']', '"', ':', ',', ' ', '\\', '0', '1', '.', '5', '-', 'e',
              'anomaly_score', 'reason', 'voice_guide', 'anomaly_index', 'true', 'null', 'NaN', '```', "'"]
    for _ in range(count):
        kind = rng.random()
        if kind < 0.2:
            template = rng.choice(VALID)
            chars = list(template)
            for _ in range(rng.randint(0, 3)):
                op = rng.random()
                pos = rng.randrange(len(chars) + 1)
                if op < 0.5 and pos < len(chars):
                    del chars[pos]
                else:
                    chars.insert(pos, rng.choice(pieces))
            yield "".join(chars)
        elif kind < 0.4:
            yield "".join(rng.choice(pieces) for _ in range(rng.randint(0, 30)))
        elif kind < 0.7:
            yield bytes(rng.getrandbits(8) for _ in range(rng.randint(0, 40))).decode("latin-1")
        else:
            yield "".join(chr(rng.randint(0, 0x2FFF)) for _ in range(rng.randint(0, 40)))


@pytest.mark.criterion(7, "parser robustness")
def test_parser_robustness(criterion):
    rng = random.Random(7)
    modes = list(OutputMode)
    crashes = parsed = 0
    for i, raw in enumerate(_fuzz_strings(rng, 100_000)):
        try:
            parse_response(raw, modes[i % 3])
            parsed += 1
        except ResponseParseError:
            pass
        except Exception:
            crashes += 1
    v1 = parse_response('{"anomaly_score": 0.85, "reason": "Car and people nearby."}', OutputMode.ANNOTATION)
    v2 = parse_response('Sure! ```json {"anomaly_score": 1.0, "reason": "Bike in close proximity"} ```',
                        OutputMode.ANNOTATION)
    criterion["detail"] = f"(100000 strings, {crashes} crashes, {parsed} parsed)"
    assert crashes == 0
    assert (v1.anomaly_score, v1.reason) == (0.85, "Car and people nearby.")
    assert (v2.anomaly_score, v2.reason) == (1.0, "Bike in close proximity")


@pytest.mark.criterion(8, "metrics oracles")
def test_metrics_oracles(criterion):
    rng = random.Random(8)
    for _ in range(50):
        n = rng.randint(2, 200)
        labels = [rng.random() < 0.35 for _ in range(n)]
        labels[0], labels[1] = True, False
        scores = [round(rng.random(), rng.choice([1, 2, 6])) for _ in range(n)]
        data = [ScoredFrame(i, s, l) for i, (s, l) in enumerate(zip(scores, labels))]
        auc = roc_auc(data)[1]
        assert auc == auc_oracle(scores, labels)
        assert average_precision(data) == ap_oracle(scores, labels)
        # strictly monotone transform that maps [0, 1] into itself
        transformed = [ScoredFrame(d.frame_id, d.score ** 3 / 2 + 0.25, d.label) for d in data]
        if len({t.score for t in transformed}) == len(set(scores)):
            assert roc_auc(transformed)[1] == auc
    criterion["detail"] = "(50 fixtures, exact equality)"


def _mock_run(seed=1):
    frames, _ = generate_corpus(seed, 600, 0.2)
    result = run_stream(frames, PipelineConfig(sensitivity=SensitivityLevel.LOW), MockBackend(seed=seed))
    data = scored_frames(result)
    report = metrics_report(data)
    rows = run_ablation(frames, DEFAULT_GRID, MockBackend(seed=seed))
    return result, report, data, rows


@pytest.fixture(scope="module")
def mock_runs():
    return _mock_run(), _mock_run()


@pytest.mark.criterion(9, "end-to-end mock run")
def test_end_to_end(criterion, mock_runs):
    result, report, _, rows = mock_runs[0]
    assert not result.incomplete
    by = {(r.sensitivity, r.toggles): r for r in rows}
    low, med, high = by[("low", "SLIM")], by[("medium", "SLIM")], by[("high", "SLIM")]
    removed = [by[("low", "SL-M")], by[("low", "S-IM")], by[("low", "-LIM")]]
    criterion["detail"] = (f"(AUC {report.auc:.4f}; AP/AUC low {low.ap:.3f}/{low.auc:.3f}, "
                           f"medium {med.ap:.3f}/{med.auc:.3f}, high {high.ap:.3f}/{high.auc:.3f}, "
                           f"removed min {min(r.ap for r in removed):.3f}/{min(r.auc for r in removed):.3f})")
    assert report.auc >= 0.95
    for metric in ("ap", "auc"):
        assert getattr(low, metric) >= getattr(med, metric) >= getattr(high, metric)
        for r in removed:
            assert getattr(low, metric) >= getattr(r, metric)


@pytest.mark.criterion(10, "determinism")
def test_determinism(criterion, mock_runs):
    (r1, rep1, d1, rows1), (r2, rep2, d2, rows2) = mock_runs
    assert r1.event_log() == r2.event_log()
    assert rep1.to_json() == rep2.to_json()
    assert heatmap_csv(d1) == heatmap_csv(d2)
    assert ablation_json(rows1) == ablation_json(rows2)
    criterion["detail"] = f"({len(r1.events)} events, logs/reports/heatmaps byte-identical)"


@pytest.mark.criterion(10, "determinism")
def test_determinism_cli_files(criterion, tmp_path):
    from navguard.cli import main

    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        feed = d / "corpus.ndjson"
        assert main(["gen-corpus", "--seed", "1", "--n", "600", "--rate", "0.2", "--out", str(feed)]) == 0
        assert main(["evaluate", "--feed", str(feed), "--seed", "1", "--sensitivity", "low",
                     "--out", str(d / "report.json"), "--heatmap", str(d / "heat.csv"),
                     "--events", str(d / "events.ndjson")]) == 0
        assert main(["ablate", "--feed", str(feed), "--seed", "1", "--out", str(d / "ablation.json")]) == 0
        outputs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
    assert outputs[0] == outputs[1]
    criterion["detail"] = f"({len(outputs[0])} CLI output files byte-identical across runs)"
