"""Command-line experiment runner.

    moelab --mode gradcheck --out runs/gc
    moelab --mode ablate-clip --config clip.json --seed 0 --out runs/clip
    moelab --mode metrics-serve --metrics-addr 127.0.0.1:5555 --out runs/metrics

Exit status: 0 success, 1 runtime failure, 2 configuration error (the message
names the offending key path), 3 numerical abort (the final expert health
report is written to ``error.json``).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import random
import sys
import time
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch

from . import experiments as ex
from .model import CorpusSampler, ModelConfig, NumericalAbort, TrainConfig, TrainState, init_model, read_corpus, save_checkpoint, train_step
from .telemetry import LocalEmitter, MetricsClient, MetricsServer, parse_addr

log = logging.getLogger("moelab")

MODES = ("train", "rl", "ablate-clip", "ablate-gate", "ablate-layout", "gradcheck", "metrics-serve", "report")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class TelemetryConfig:
    ranks: int = 1
    barrier_timeout: Optional[float] = None
    duration: Optional[float] = None  # metrics-serve: stop after this many seconds


@dataclass
class RunConfig:
    mode: str = "train"
    seed: int = 0
    out: str = "runs/default"
    corpus: Optional[str] = None
    metrics_addr: Optional[str] = None
    model: ModelConfig = field(default_factory=ex.toy_moe_config)
    train: TrainConfig = field(default_factory=TrainConfig)
    clip: ex.ClipAblationConfig = field(default_factory=ex.ClipAblationConfig)
    paired: ex.PairedAblationConfig = field(default_factory=ex.PairedAblationConfig)
    rl: ex.RLStudyConfig = field(default_factory=ex.RLStudyConfig)
    telemetry: TelemetryConfig = field(default_factory=TelemetryConfig)
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError("mode", f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.corpus is not None and not Path(self.corpus).exists():
            raise ConfigError("corpus", f"file {self.corpus!r} does not exist")
        if self.metrics_addr is not None:
            try:
                parse_addr(self.metrics_addr)
            except ValueError as exc:
                raise ConfigError("metrics_addr", str(exc)) from None


# ---------------------------------------------------------------------------
# Strict dataclass loading
# ---------------------------------------------------------------------------


def _check_type(value: Any, tp: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if tp is Any:
        return value
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        for option in args:
            if option is type(None):
                continue
            try:
                return _check_type(value, option, path)
            except ConfigError:
                continue
        raise ConfigError(path, f"value {value!r} does not match {tp}")
    if dataclasses.is_dataclass(tp):
        return build(tp, value, path)
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        inner = args[0] if args else Any
        items = [_check_type(v, inner, f"{path}[{i}]") for i, v in enumerate(value)]
        return tuple(items) if origin is tuple else items
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


def build(cls, data: Any, path: str = ""):
    """Instantiate dataclass ``cls`` from a JSON object, rejecting unknown
    keys and wrong types with a dotted key path."""
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(path or "<root>", f"expected an object for {cls.__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(sub, "unknown key")
        kwargs[key] = _check_type(value, hints[key], sub)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        if path:
            raise ConfigError(f"{path}.{exc.path}", str(exc).split(": ", 1)[-1]) from None
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(path or "<root>", str(exc)) from None


def to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {k: to_jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):
        return obj.value
    return obj


def load_config(path: Optional[str], overrides: dict) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError("--config", f"file {path!r} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("--config", f"invalid JSON: {exc}") from None
    data.update({k: v for k, v in overrides.items() if v is not None})
    return build(RunConfig, data)


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def write_csv(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_manifest(out: Path, cfg: RunConfig, arms: Optional[dict] = None) -> None:
    manifest = {"mode": cfg.mode, "seed": cfg.seed, "config": to_jsonable(cfg)}
    if arms is not None:
        manifest["arms"] = to_jsonable(arms)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _emitter_factory(cfg: RunConfig, out: Path):
    def make(name: str):
        if cfg.metrics_addr:
            return MetricsClient(cfg.metrics_addr, rank=0)
        return LocalEmitter(out / f"metrics_{name}.jsonl")

    return make


# ---------------------------------------------------------------------------
# Modes
# ---------------------------------------------------------------------------


def _corpus(cfg: RunConfig, size: int = 200_000) -> bytes:
    if cfg.corpus:
        return read_corpus(cfg.corpus)
    return ex.make_adversarial_corpus(size, seed=cfg.seed)


def mode_train(cfg: RunConfig, out: Path) -> dict:
    write_manifest(out, cfg)
    corpus = _corpus(cfg)
    model = init_model(cfg.model, cfg.seed)
    emitter = _emitter_factory(cfg, out)("train")
    state = TrainState(model, cfg.train, cfg.seed, emitter=emitter)
    sampler = CorpusSampler(corpus, cfg.train.seq_len, cfg.train.batch_size, cfg.seed)
    rows = []
    try:
        for step in range(cfg.train.steps):
            m = train_step(sampler.next(), state)
            rows.append([step, m["loss"], m["lm_loss"], m["mtp_loss"], m["ep_loss"], m["grad_norm"]])
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_{step + 1}.npz", model, step + 1)
    finally:
        emitter.close()
        write_csv(out / "loss.csv", ["step", "loss", "lm_loss", "mtp_loss", "ep_loss", "grad_norm"], rows)
    save_checkpoint(out / "checkpoint_final.npz", model, cfg.train.steps)
    return {"final_loss": rows[-1][1] if rows else None, "steps": len(rows)}


def mode_ablate_clip(cfg: RunConfig, out: Path) -> dict:
    clip = cfg.clip
    arms = {a: {"arm": a, "tau_act": clip.tau_act if a == "activation" else None,
                "weight_clip_every": clip.weight_clip_every if a == "weight" else None} for a in clip.arms}
    write_manifest(out, cfg, arms)
    results = ex.clip_ablation(clip, cfg.seed, _emitter_factory(cfg, out), log.info)
    summary = {}
    for name, r in results.items():
        layers = sorted(r.max_to_median)
        header = ["step", "loss"] + [f"layer{i}_max_to_median" for i in layers]
        header += [f"layer{i}_expert_norm_max" for i in layers]
        rows = []
        for s in range(len(r.losses)):
            rows.append([s, r.losses[s]] + [r.max_to_median[i][s] for i in layers]
                        + [r.expert_norm_max[i][s] for i in layers])
        write_csv(out / f"series_{name}.csv", header, rows)
        final = layers[-1]
        summary[name] = {
            "final_layer": final,
            "max_to_median_final": r.max_to_median[final][-1],
            "clip_events": r.clip_events,
        }
    return summary


def mode_paired(cfg: RunConfig, out: Path, which: str) -> dict:
    corpus = _corpus(cfg, cfg.paired.corpus_size)
    fn = ex.gate_ablation if which == "gate" else ex.layout_ablation
    results = fn(cfg.paired, cfg.seed, corpus, _emitter_factory(cfg, out), log.info)
    write_manifest(out, cfg, {k: v["config"] for k, v in results.items()})
    names = list(results)
    rows = zip(range(cfg.paired.train.steps), *(results[n]["losses"] for n in names))
    write_csv(out / "loss_curves.csv", ["step"] + names, rows)
    return {n: {"final_loss": results[n]["losses"][-1]} for n in names}


def mode_rl(cfg: RunConfig, out: Path) -> dict:
    write_manifest(out, cfg)
    mm = ex.mismatch_study(cfg.rl, log.info)
    tr = ex.truncation_study(cfg.rl, log.info)
    summary = {}
    for name, runs in {**{f"mismatch_{k}": v for k, v in mm.items()},
                       **{f"truncation_{k}": v for k, v in tr.items()}}.items():
        rows = []
        for run in runs:
            for h in run["history"]:
                rows.append([run["seed"], h["iteration"], h["mean_reward"], h["actor_grad_norm"],
                             h["retained_fraction"], h["token_outside_fraction"], h["truncation_rate"],
                             h["routing_confidence"], h["sigma"]])
        write_csv(out / f"series_{name}.csv", ["seed", "iteration", "mean_reward", "actor_grad_norm",
                                                "retained_fraction", "token_outside_fraction",
                                                "truncation_rate", "routing_confidence", "sigma"], rows)
        summary[name] = {
            "final_accuracy": [r["final_accuracy"] for r in runs],
            **({"grad_norm_variance": [r["grad_norm_variance"] for r in runs]} if "grad_norm_variance" in runs[0] else {}),
        }
    return summary


def mode_gradcheck(cfg: RunConfig, out: Path) -> tuple[dict, int]:
    write_manifest(out, cfg)
    reports = ex.gradient_suite(cfg.seed)
    rows = [[name, r.passed, r.max_rel_error, r.message] for name, r in reports.items()]
    write_csv(out / "gradcheck.csv", ["op", "passed", "max_rel_error", "message"], rows)
    summary = {name: {"passed": r.passed, "max_rel_error": r.max_rel_error} for name, r in reports.items()}
    return summary, 0 if all(r.passed for r in reports.values()) else 1


def mode_metrics_serve(cfg: RunConfig, out: Path) -> dict:
    host, port = parse_addr(cfg.metrics_addr or "127.0.0.1:0")
    server = MetricsServer(range(cfg.telemetry.ranks), out / "metrics.jsonl", host, port,
                           cfg.telemetry.barrier_timeout)
    server.start()
    print(json.dumps({"listening": "%s:%d" % server.address}), flush=True)
    try:
        if cfg.telemetry.duration is not None:
            time.sleep(cfg.telemetry.duration)
        else:
            while True:
                time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return {"accepted": server.aggregator.accepted, "records": len(server.aggregator.records)}


def mode_report(cfg: RunConfig, out: Path) -> dict:
    """Collect every ``summary.json`` under the output directory."""
    found = {}
    for p in sorted(out.rglob("summary.json")):
        if p.parent == out:
            continue
        found[str(p.parent.relative_to(out))] = json.loads(p.read_text())
    (out / "report.json").write_text(json.dumps(found, indent=2, sort_keys=True))
    return {"runs": len(found)}


def run(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    seed_everything(cfg.seed)
    status = 0
    try:
        if cfg.mode == "train":
            summary = mode_train(cfg, out)
        elif cfg.mode == "ablate-clip":
            summary = mode_ablate_clip(cfg, out)
        elif cfg.mode == "ablate-gate":
            summary = mode_paired(cfg, out, "gate")
        elif cfg.mode == "ablate-layout":
            summary = mode_paired(cfg, out, "layout")
        elif cfg.mode == "rl":
            summary = mode_rl(cfg, out)
        elif cfg.mode == "gradcheck":
            summary, status = mode_gradcheck(cfg, out)
        elif cfg.mode == "metrics-serve":
            summary = mode_metrics_serve(cfg, out)
        else:
            summary = mode_report(cfg, out)
    except NumericalAbort as exc:
        record = {"error": "numerical_abort", "message": str(exc), "step": exc.step, "layer": exc.layer,
                  "health": to_jsonable(exc.health) if exc.health is not None else None}
        (out / "error.json").write_text(json.dumps(record, indent=2))
        print(json.dumps(record), file=sys.stderr)
        return 3
    (out / "summary.json").write_text(json.dumps(to_jsonable(summary), indent=2, sort_keys=True))
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moelab", description=__doc__.split("\n")[0])
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--metrics-addr", help="HOST:PORT of a metrics server")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--corpus", help="UTF-8 text corpus (byte-tokenized)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config, {"mode": args.mode, "seed": args.seed, "out": args.out,
                                         "metrics_addr": args.metrics_addr, "corpus": args.corpus})
    except ConfigError as exc:
        print(json.dumps({"error": "config", "key": exc.path, "message": str(exc)}), file=sys.stderr)
        return 2
    try:
        return run(cfg)
    except Exception as exc:  # machine-readable record for any other failure
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        record = {"error": type(exc).__name__, "message": str(exc)}
        (Path(cfg.out) / "error.json").write_text(json.dumps(record, indent=2))
        print(json.dumps(record), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
