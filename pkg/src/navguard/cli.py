"""Command-line entry point.

Exit status: 0 success, 1 invalid arguments or configuration, 2 runtime
failure (the message names the failing stage).
"""

from __future__ import annotations

import argparse
import contextlib
import os
import shlex
import sys
import threading
from pathlib import Path
from typing import IO, Dict, List, Optional, Sequence

from . import __version__
from .config import atomic_write_text, parse_bool, read_kv_file
from .evaluation import (
    DEFAULT_GRID,
    ablation_json,
    export_heatmap,
    metrics_report,
    parse_grid,
    run_ablation,
    scored_frames,
)
from .feed import ingest_feed, ingest_process, labels_csv, write_corpus
from .gateway import (
    API_KEY_ENV,
    HttpBackend,
    MockBackend,
    estimate_cost,
    load_prices,
    read_usage,
    usage_to_json,
)
from .pipeline import (
    DEFAULT_OVERHEAD_MS,
    PROFILES,
    LatencyProfile,
    Pipeline,
    PipelineConfig,
    effective_fps,
    request_target,
    switch_scene,
)
from .prompts import AblationToggles, OutputMode, SensitivityLevel, load_scene
from .spatial import annotate_stream

ALERT_PREFIX = "[ALERT]"


class UsageError(Exception):
    """Bad flags, config values or missing inputs: exit status 1."""


class StageError(Exception):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"{stage}: {type(exc).__name__}: {exc}")
        self.stage = stage


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except (UsageError, StageError):
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2; flag errors are status 1 here
        raise UsageError(message)


# -- configuration --------------------------------------------------------------------

_TOGGLE_KEYS = ("include_sensitivity", "include_location", "include_instruction", "include_motion")


def _settings(args) -> Dict[str, str]:
    """Built-in defaults < config file < flags."""
    merged: Dict[str, str] = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            merged.update(read_kv_file(path))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    for key in ("detect_interval", "llm_interval", "area_threshold", "sensitivity", "mode",
                "scene", "backend", "seed", "timeout_ms", "rule_fallback"):
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = str(value)
    return merged


def build_config(s: Dict[str, str]) -> PipelineConfig:
    try:
        toggles = AblationToggles(**{k: parse_bool(s[k]) for k in _TOGGLE_KEYS if k in s})
        kwargs = dict(
            toggles=toggles,
            sensitivity=SensitivityLevel.parse(s.get("sensitivity", "low")),
            mode=OutputMode.parse(s.get("mode", "annotation")),
            scene=load_scene(s.get("scene", "urban_walking")),
        )
        for key, conv in (("detect_interval", int), ("llm_interval", int), ("area_threshold", float),
                          ("source_fps", float), ("timeout_ms", int), ("max_detections", int)):
            if key in s:
                kwargs[key] = conv(s[key])
        if "rule_fallback" in s:
            kwargs["rule_fallback"] = parse_bool(s["rule_fallback"])
        return PipelineConfig(**kwargs)
    except ValueError as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def build_backends(s: Dict[str, str]) -> Dict[str, object]:
    """``{"scene": ..., "assist": ...}``: scene assessment and switch/interest prompts."""
    kind = s.get("backend", "mock")
    if kind == "mock":
        try:
            b = MockBackend(seed=int(s.get("seed", "0")))
        except ValueError:
            raise UsageError(f"seed must be an integer, got {s.get('seed')!r}") from None
        return {"scene": b, "assist": b}
    if kind != "live":
        raise UsageError(f"backend must be 'mock' or 'live', got {kind!r}")
    if "endpoint" not in s or "model" not in s:
        raise UsageError("live backend needs 'endpoint' and 'model' in the config file")
    api_key = os.environ.get(API_KEY_ENV) or s.get("api_key")
    retries = int(s.get("retries", "3"))
    scene = HttpBackend(s["endpoint"], s["model"], api_key, retries=retries)
    assist = scene
    if "switch_model" in s:
        assist = HttpBackend(s["endpoint"], s["switch_model"], api_key, retries=retries)
    return {"scene": scene, "assist": assist}


def _frames(args) -> List:
    if getattr(args, "detector_cmd", None):
        return list(ingest_process(shlex.split(args.detector_cmd)))
    return list(ingest_feed(args.feed))


def _check_feed(args) -> None:
    if getattr(args, "detector_cmd", None):
        return
    if not args.feed:
        raise UsageError("--feed (or --detector-cmd) is required")
    if not Path(args.feed).is_file():
        raise UsageError(f"feed not found: {args.feed}")


def _check_out(path: Optional[str]) -> None:
    if path is not None and not Path(path).resolve().parent.is_dir():
        raise UsageError(f"output directory does not exist: {Path(path).parent}")


# -- commands ------------------------------------------------------------------------------


def cmd_gen_corpus(args, out: IO[str]) -> int:
    if args.n < 0:
        raise UsageError("--n must be non-negative")
    if not 0.0 <= args.rate <= 1.0:
        raise UsageError("--rate must lie in [0, 1]")
    _check_out(args.out)
    with stage("generate"):
        lpath = write_corpus(args.out, args.seed, args.n, args.rate, source=f"synthetic-seed{args.seed}")
    print(f"wrote {args.out} and {lpath}", file=out)
    return 0


def cmd_annotate(args, out: IO[str]) -> int:
    _check_feed(args)
    _check_out(args.out)
    if not 0.0 < args.area_threshold < 1.0:
        raise UsageError("--area-threshold must lie in (0, 1)")
    with stage("ingest"):
        frames = _frames(args)
    with stage("annotate"):
        labels = annotate_stream(frames, args.area_threshold)
    with stage("write"):
        atomic_write_text(args.out, labels_csv(labels))
    n_pos = sum(1 for _, lab in labels if lab)
    print(f"{len(labels)} frames, {n_pos} anomalous -> {args.out}", file=out)
    return 0


def _run(args, out: IO[str], cfg: PipelineConfig, backends, realtime: bool = False):
    usage_fh = open(args.usage_log, "a", encoding="utf-8") if getattr(args, "usage_log", None) else None

    def on_usage(u):
        if usage_fh:
            usage_fh.write(usage_to_json(u) + "\n")
            usage_fh.flush()

    try:
        pipe = Pipeline(cfg, backends["scene"], PROFILES.get(getattr(args, "profile", None) or ""),
                        realtime=realtime, on_alert=lambda t: print(f"{ALERT_PREFIX} {t}", file=out),
                        on_usage=on_usage)
        with stage("ingest"):
            frames = _frames(args)
        with stage("pipeline"):
            result = pipe.run(frames)
    finally:
        if usage_fh:
            usage_fh.close()
    if result.incomplete:
        if getattr(args, "events", None):
            atomic_write_text(args.events, result.event_log())
        raise StageError("pipeline", RuntimeError(f"stream incomplete ({result.error})"))
    return result


def cmd_replay(args, out: IO[str]) -> int:
    _check_feed(args)
    for p in (args.events, args.scores, args.usage_log):
        _check_out(p)
    s = _settings(args)
    cfg = build_config(s)
    backends = build_backends(s)
    result = _run(args, out, cfg, backends, realtime=args.realtime)
    with stage("write"):
        if args.events:
            atomic_write_text(args.events, result.event_log())
        if args.scores:
            atomic_write_text(args.scores, "frame_id,score,rule_label\n" + "".join(
                f"{fid},{score!r},{int(lab)}\n" for (fid, score), (_, lab) in zip(result.scores, result.labels)
            ))
    print(f"{len(result.scores)} frames, {len(result.usage)} LLM calls", file=out)
    if result.modeled_fps is not None:
        print(f"modeled throughput: {result.modeled_fps:.2f} FPS", file=out)
    return 0


def cmd_evaluate(args, out: IO[str]) -> int:
    _check_feed(args)
    for p in (args.out, args.heatmap, args.events):
        _check_out(p)
    if not 0.0 <= args.threshold <= 1.0:
        raise UsageError("--threshold must lie in [0, 1]")
    s = _settings(args)
    cfg = build_config(s)
    backends = build_backends(s)
    result = _run(args, out, cfg, backends)
    with stage("evaluate"):
        data = scored_frames(result)
        report = metrics_report(data, args.threshold)
    with stage("write"):
        atomic_write_text(args.out, report.to_json())
        if args.heatmap:
            export_heatmap(data, args.heatmap)
        if args.events:
            atomic_write_text(args.events, result.event_log())
    tp, fp, tn, fn = report.confusion
    print(f"AUC {report.auc:.4f}  AP {report.ap:.4f}  n={report.n}  "
          f"tp={tp} fp={fp} tn={tn} fn={fn} @ {report.threshold}", file=out)
    return 0


def cmd_ablate(args, out: IO[str]) -> int:
    _check_feed(args)
    _check_out(args.out)
    if args.grid == "default":
        grid = DEFAULT_GRID
    else:
        try:
            grid = parse_grid(Path(args.grid).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise UsageError(f"bad grid {args.grid}: {exc}") from None
    s = _settings(args)
    cfg = build_config(s)
    backends = build_backends(s)
    with stage("ingest"):
        frames = _frames(args)
    with stage("ablate"):
        rows = run_ablation(frames, grid, backends["scene"], cfg)
    with stage("write"):
        atomic_write_text(args.out, ablation_json(rows))
    for r in rows:
        if r.error:
            print(f"{r.sensitivity:>6} {r.toggles}  error: {r.error}", file=out)
        else:
            print(f"{r.sensitivity:>6} {r.toggles}  AP {100 * r.ap:6.2f}  AUC {100 * r.auc:6.2f}", file=out)
    failed = [r for r in rows if r.error]
    if failed:
        raise StageError("ablate", RuntimeError(f"{len(failed)} of {len(rows)} rows failed"))
    return 0


def cmd_cost(args, out: IO[str]) -> int:
    if not Path(args.usage).is_file():
        raise UsageError(f"usage log not found: {args.usage}")
    try:
        prices = load_prices(args.prices)
    except (OSError, ValueError) as exc:
        raise UsageError(f"bad price table: {exc}") from None
    with stage("read-usage"):
        usage = read_usage(args.usage)
    by_mode: Dict[str, list] = {}
    for u in usage:
        by_mode.setdefault(u.mode, []).append(u)
    if not by_mode:
        raise UsageError(f"{args.usage} holds no usage records")
    with stage("cost"):
        for mode, records in by_mode.items():
            per_call, per_day = estimate_cost(records, prices)
            print(f"{mode}: {len(records)} calls, {per_call:.6f} USD/call, {per_day:.2f} USD/day "
                  f"({prices.label})", file=out)
    return 0


def cmd_simulate_fps(args, out: IO[str]) -> int:
    if args.profile:
        if args.profile not in PROFILES:
            raise UsageError(f"unknown profile {args.profile!r}; choose from {', '.join(PROFILES)}")
        profile = PROFILES[args.profile]
    elif args.latency_ms is not None:
        if args.latency_ms <= 0:
            raise UsageError("--latency-ms must be positive")
        profile = LatencyProfile("custom", args.latency_ms)
    else:
        raise UsageError("give --latency-ms or --profile")
    if args.interval < 1 or args.overhead_ms <= 0:
        raise UsageError("--interval must be >= 1 and --overhead-ms positive")
    fps = effective_fps(profile, args.interval, args.overhead_ms)
    base = effective_fps(profile, 1, args.overhead_ms)
    print(f"{fps:.2f}", file=out)
    print(f"({profile.label}: {profile.per_detection_ms} ms/detection, every {args.interval} frames; "
          f"{base:.2f} FPS without compensation)", file=out)
    return 0


# -- REPL ---------------------------------------------------------------------------------

REPL_HELP = """commands:
  scene <name>                    switch detection classes to a new scene
  find <object>                   add a target object to the active classes
  sensitivity low|medium|high     change the reporting sensitivity
  mode full|voice|annotation      change the output format
  status                          show the active configuration
  quit                            stop the stream and exit"""


def repl_loop(pipe: Pipeline, assist_backend, stdin: IO[str], out: IO[str], timeout_ms: int = 10_000) -> None:
    """Read commands until ``quit`` or end of input.  Changes reach the stream via
    the pipeline's staging methods and apply from the next LLM tick."""
    for line in stdin:
        parts = line.strip().split(maxsplit=1)
        if not parts:
            continue
        cmd, arg = parts[0].lower(), (parts[1].strip() if len(parts) > 1 else "")
        try:
            if cmd in ("quit", "exit"):
                break
            elif cmd == "status":
                scene, sens, mode = pipe.snapshot()
                print(f"scene={scene.scene_name} classes={len(scene.classes)} sensitivity={sens.value} "
                      f"mode={mode.value} frames={pipe.frames_processed}", file=out)
            elif cmd == "scene" and arg:
                current, _, _ = pipe.snapshot()
                pipe.set_scene(switch_scene(arg, assist_backend, current, timeout_ms))
                print(f"scene switched to {arg} ({len(pipe.snapshot()[0].classes)} classes)", file=out)
            elif cmd == "find" and arg:
                target = request_target(f"find {arg}", assist_backend, timeout_ms)
                pipe.add_target(target)
                print(f"added target {target!r}", file=out)
            elif cmd == "sensitivity" and arg:
                pipe.set_sensitivity(SensitivityLevel.parse(arg))
                print(f"sensitivity {pipe.snapshot()[1].value}", file=out)
            elif cmd == "mode" and arg:
                pipe.set_mode(OutputMode.parse(arg))
                print(f"mode {pipe.snapshot()[2].value}", file=out)
            else:
                print(REPL_HELP, file=out)
        except Exception as exc:  # keep the session alive; previous settings stay in force
            print(f"error: {exc}", file=out)
        out.flush()


def cmd_repl(args, out: IO[str], stdin: Optional[IO[str]] = None) -> int:
    _check_feed(args)
    _check_out(args.events)
    s = _settings(args)
    cfg = build_config(s)
    backends = build_backends(s)
    pipe = Pipeline(cfg, backends["scene"], realtime=not args.no_realtime,
                    on_alert=lambda t: print(f"{ALERT_PREFIX} {t}", file=out))
    with stage("ingest"):
        frames = _frames(args)
    holder = {}
    worker = threading.Thread(target=lambda: holder.setdefault("result", pipe.run(frames)), daemon=True)
    worker.start()
    print("navguard repl; type 'help' for commands", file=out)
    repl_loop(pipe, backends["assist"], stdin or sys.stdin, out, cfg.timeout_ms)
    pipe.stop()
    worker.join()
    result = holder["result"]
    if args.events:
        with stage("write"):
            atomic_write_text(args.events, result.event_log())
    print(f"stream stopped after {len(result.scores)} frames", file=out)
    return 0


# -- argument parsing ----------------------------------------------------------------------


def _pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--feed", help="detection feed (newline-delimited JSON)")
    p.add_argument("--detector-cmd", help="run this command and read its feed from stdout")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--backend", choices=("mock", "live"))
    p.add_argument("--seed", type=int, help="mock backend seed")
    p.add_argument("--sensitivity")
    p.add_argument("--mode")
    p.add_argument("--scene")
    p.add_argument("--detect-interval", dest="detect_interval", type=int)
    p.add_argument("--llm-interval", dest="llm_interval", type=int)
    p.add_argument("--area-threshold", dest="area_threshold", type=float)
    p.add_argument("--timeout-ms", dest="timeout_ms", type=int)
    p.add_argument("--rule-fallback", dest="rule_fallback", action="store_const", const="true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="navguard", description="Navigation anomaly detection with H-pattern rules and LLM prompts.")
    parser.add_argument("--version", action="version", version=f"navguard {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("replay", help="run the real-time pipeline over a feed")
    _pipeline_flags(p)
    p.add_argument("--profile", help="latency profile for the throughput estimate")
    p.add_argument("--events", help="write the event log here")
    p.add_argument("--scores", help="write per-frame scores (CSV) here")
    p.add_argument("--usage-log", help="append one usage record per LLM call")
    p.add_argument("--realtime", action="store_true", help="pace frames by their timestamps")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("annotate", help="label frames with the rule baseline")
    p.add_argument("--feed")
    p.add_argument("--detector-cmd")
    p.add_argument("--out", required=True)
    p.add_argument("--area-threshold", type=float, default=0.10)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("evaluate", help="score LLM output against the rule baseline")
    _pipeline_flags(p)
    p.add_argument("--out", required=True, help="metrics report (JSON)")
    p.add_argument("--heatmap", help="two-row heatmap CSV")
    p.add_argument("--events", help="write the event log here")
    p.add_argument("--usage-log")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="AP/AUC for a grid of prompt configurations")
    _pipeline_flags(p)
    p.add_argument("--grid", default="default", help="'default' or a JSON grid file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("cost", help="daily charge from a usage log")
    p.add_argument("--usage", required=True)
    p.add_argument("--prices", default="default", help="'default' or a key = value price file")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("simulate-fps", help="throughput with frame compensation")
    p.add_argument("--latency-ms", type=float)
    p.add_argument("--profile")
    p.add_argument("--interval", type=int, default=5)
    p.add_argument("--overhead-ms", type=float, default=DEFAULT_OVERHEAD_MS)
    p.set_defaults(func=cmd_simulate_fps)

    p = sub.add_parser("gen-corpus", help="write a seeded synthetic detection feed")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--n", type=int, default=600)
    p.add_argument("--rate", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("repl", help="interactive control of a replaying stream")
    _pipeline_flags(p)
    p.add_argument("--events")
    p.add_argument("--no-realtime", action="store_true", help="replay as fast as possible")
    p.set_defaults(func=cmd_repl)
    return parser


def main(argv: Optional[Sequence[str]] = None, out: Optional[IO[str]] = None, err: Optional[IO[str]] = None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("missing command; see --help")
        return args.func(args, out)
    except UsageError as exc:
        print(f"navguard: error: {exc}", file=err)
        return 1
    except StageError as exc:
        print(f"navguard: failed in {exc}", file=err)
        return 2


if __name__ == "__main__":
    sys.exit(main())
