import io
import json
import subprocess
import sys

import pytest

from navguard.cli import main, repl_loop
from navguard.feed import frame_to_json, generate_corpus, read_labels_csv
from navguard.gateway import MockBackend, UsageRecord, append_usage
from navguard.pipeline import EventKind, Pipeline, PipelineConfig
from navguard.prompts import ActiveClassSet


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = main(list(argv), out, err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    feed = d / "seed1.ndjson"
    code, _, _ = run("gen-corpus", "--seed", "1", "--n", "600", "--rate", "0.2", "--out", str(feed))
    assert code == 0
    return feed


def test_gen_corpus_writes_labels(corpus):
    labels = read_labels_csv(corpus.with_name("seed1.labels.csv"))
    assert sum(lab for _, lab in labels) == 120


def test_annotate_matches_ground_truth(corpus, tmp_path):
    out = tmp_path / "labels.csv"
    code, text, _ = run("annotate", "--feed", str(corpus), "--out", str(out))
    assert code == 0 and "600 frames, 120 anomalous" in text
    assert out.read_bytes() == corpus.with_name("seed1.labels.csv").read_bytes()


def test_simulate_fps():
    code, text, _ = run("simulate-fps", "--latency-ms", "62", "--interval", "5")
    assert code == 0
    assert abs(float(text.splitlines()[0]) - 76.9) < 0.05
    code, text, _ = run("simulate-fps", "--profile", "yolov8l-pytorch-v100")
    assert code == 0 and text.splitlines()[0] == "104.17"


def test_cost_voice_log(tmp_path):
    log = tmp_path / "voice.log"
    append_usage(log, [UsageRecord(i, "voice", 407, 573, 35, 608) for i in range(5)])
    code, text, _ = run("cost", "--usage", str(log), "--prices", "default")
    assert code == 0
    assert "2.44 USD/day" in text


def test_evaluate_and_heatmap(corpus, tmp_path):
    report, heat, events = tmp_path / "r.json", tmp_path / "h.csv", tmp_path / "e.ndjson"
    code, text, _ = run("evaluate", "--feed", str(corpus), "--seed", "1", "--out", str(report),
                        "--heatmap", str(heat), "--events", str(events))
    assert code == 0, text
    obj = json.loads(report.read_text())
    assert obj["auc"] >= 0.95 and obj["n"] == 600
    assert len(heat.read_text().splitlines()) == 3
    assert events.read_text().count('"kind": "LlmDispatched"') == 20


def test_replay_writes_outputs(corpus, tmp_path):
    events, scores, usage = tmp_path / "e", tmp_path / "s.csv", tmp_path / "u.log"
    code, text, _ = run("replay", "--feed", str(corpus), "--events", str(events), "--scores", str(scores),
                        "--usage-log", str(usage), "--profile", "yolov8x-world-v2-pytorch-v100",
                        "--mode", "voice")
    assert code == 0
    assert "600 frames, 20 LLM calls" in text and "modeled throughput: 76.92 FPS" in text
    assert "[ALERT]" in text
    assert scores.read_text().startswith("frame_id,score,rule_label\n")
    assert len(usage.read_text().splitlines()) == 20


def test_ablate(corpus, tmp_path):
    out = tmp_path / "a.json"
    code, text, _ = run("ablate", "--feed", str(corpus), "--out", str(out))
    assert code == 0
    assert len(json.loads(out.read_text())) == 6


def test_config_file_precedence(corpus, tmp_path):
    conf = tmp_path / "nav.cfg"
    conf.write_text("# comment\nmode = voice\nllm_interval = 60\n")
    events = tmp_path / "e"
    code, _, _ = run("replay", "--feed", str(corpus), "--config", str(conf), "--events", str(events))
    assert code == 0
    assert events.read_text().count("LlmDispatched") == 10
    code, text, _ = run("replay", "--feed", str(corpus), "--config", str(conf), "--llm-interval", "30",
                        "--events", str(events))
    assert code == 0 and "20 LLM calls" in text


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["bogus"],
        ["annotate", "--out", "x.csv"],
        ["annotate", "--feed", "/nonexistent.ndjson", "--out", "x.csv"],
        ["simulate-fps"],
        ["simulate-fps", "--latency-ms", "-3"],
        ["simulate-fps", "--profile", "nope"],
        ["simulate-fps", "--latency-ms", "abc"],
        ["gen-corpus", "--rate", "2", "--out", "x"],
        ["cost", "--usage", "/nonexistent.log"],
        ["replay", "--feed", "FEED", "--llm-interval", "12"],
        ["replay", "--feed", "FEED", "--sensitivity", "extreme"],
        ["replay", "--feed", "FEED", "--backend", "live"],
        ["replay", "--feed", "FEED", "--api-key", "secret"],
        ["evaluate", "--feed", "FEED", "--out", "/nonexistent/dir/r.json"],
    ],
)
def test_validation_errors_exit_1(argv, corpus):
    argv = [str(corpus) if a == "FEED" else a for a in argv]
    code, out, err = run(*argv)
    assert code == 1
    assert err.startswith("navguard") and err.count("\n") <= 2


def test_runtime_failure_exit_2_names_stage(tmp_path):
    frames, _ = generate_corpus(1, 40, 0.0)
    lines = [frame_to_json(f) for f in frames]
    lines.append('{"frame_id": 40, "timestamp_ms": 0, "objects": []}')  # timestamp goes backwards
    feed = tmp_path / "bad.ndjson"
    feed.write_text("\n".join(lines) + "\n")
    code, _, err = run("annotate", "--feed", str(feed), "--out", str(tmp_path / "l.csv"))
    assert code == 2 and "ingest" in err and "line 41" in err
    assert not (tmp_path / "l.csv").exists()


def test_ablate_failed_rows_exit_2(tmp_path):
    frames, _ = generate_corpus(1, 30, 0.0)
    feed = tmp_path / "flat.ndjson"
    feed.write_text("".join(frame_to_json(f) + "\n" for f in frames))
    out = tmp_path / "a.json"
    code, _, err = run("ablate", "--feed", str(feed), "--out", str(out))
    assert code == 2 and "ablate" in err
    assert all(r["error"] for r in json.loads(out.read_text()))


def test_live_backend_unreachable_exit_2(corpus, tmp_path, monkeypatch):
    monkeypatch.setenv("NAVGUARD_API_KEY", "k")
    conf = tmp_path / "live.cfg"
    conf.write_text("backend = live\nendpoint = http://127.0.0.1:9/v1/chat/completions\nmodel = m\nretries = 0\n")
    code, out, err = run("evaluate", "--feed", str(corpus), "--config", str(conf), "--out", str(tmp_path / "r.json"),
                         "--timeout-ms", "500")
    # every call fails, scores stay 0.0 and the report is still produced
    assert code == 0
    assert json.loads((tmp_path / "r.json").read_text())["auc"] == 0.5


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "navguard", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("navguard ")


# -- REPL ----------------------------------------------------------------------------------


class Recorder(MockBackend):
    def __init__(self):
        super().__init__()
        self.prompts = []

    def chat(self, system, user, timeout_ms=0, call_id=0):
        self.prompts.append((system, user))
        return super().chat(system, user, timeout_ms, call_id)


def test_repl_commands_change_next_prompt():
    backend = Recorder()
    pipe = Pipeline(PipelineConfig(scene=ActiveClassSet.build("street", ["car"])), backend)
    out = io.StringIO()
    script = "status\nscene park\nfind bench\nfind stroller\nsensitivity high\nmode voice\nstatus\ndance\nquit\nstatus\n"
    repl_loop(pipe, MockBackend(), io.StringIO(script), out)
    lines = out.getvalue().splitlines()
    assert lines[0].startswith("scene=street classes=1 sensitivity=low mode=annotation")
    assert "scene switched to park (10 classes)" in lines
    assert "added target 'stroller'" in lines
    assert "scene=park classes=11 sensitivity=high mode=voice" in out.getvalue()
    assert "commands:" in out.getvalue()  # unknown command prints help
    assert out.getvalue().count("scene=") == 2  # nothing after quit

    frames, _ = generate_corpus(1, 30, 0.2)
    r = pipe.run(frames)
    system, user = backend.prompts[0]
    assert "bench" in user.splitlines()[0] and "stroller" in user.splitlines()[0]
    assert system.split("\n")[1].endswith("Current sensitivity: high.")
    changed = [e.payload["field"] for e in r.events if e.kind is EventKind.CONFIG_CHANGED]
    assert changed == ["scene", "target", "target", "sensitivity", "mode"]


def test_repl_error_keeps_session():
    pipe = Pipeline(PipelineConfig(), MockBackend())
    out = io.StringIO()
    repl_loop(pipe, MockBackend(scene_lists={"void": ["human face"]}),
              io.StringIO("scene void\nsensitivity loud\nstatus\n"), out)
    text = out.getvalue()
    assert text.count("error:") == 2
    assert "scene=urban_walking" in text


def test_cmd_repl_end_to_end(corpus, tmp_path, monkeypatch):
    monkeypatch.setattr(sys, "stdin", io.StringIO("sensitivity medium\nstatus\nquit\n"))
    events = tmp_path / "e"
    code, text, _ = run("repl", "--feed", str(corpus), "--no-realtime", "--events", str(events))
    assert code == 0
    assert "sensitivity medium" in text and "stream stopped after" in text
