"""Command-line entry points: ``train``, ``score`` and ``export-frequency``.

Run configs are JSON documents with four sections::

    {
      "model":  {"d_model": 32, "n_layers": 2, "n_heads": 2, "d_ff": 128},
      "task":   {"kind": "parity", "vocab_size": 8, "seq_len": 8},
      "train":  {"epochs": 10, "learning_rate": 0.01,
                 "adapters": {"lora_sites": ["q_proj", "v_proj"], "lora_rank": 8}},
      "output": {"dir": "runs"}
    }

Unknown keys are rejected.  Model vocabulary, length and head are taken from
the task, and the model seed is the run seed.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from .adapters import AdapterConfig, AdapterConfigError
from .allocator import FrequencyMatrix, ScheduleError, frequency_csv
from .autodiff import NumericError
from .saliency import BASES, PROXIES, compute_scores, write_scores_csv
from .seeding import Seeds
from .tasks import SyntheticTask, TaskError, make_task
from .training import TrainConfig, TrainingAborted, build_model, train
from .transformer import ConfigError, ModelConfig

SECTIONS = ("model", "task", "train", "output")
DERIVED_MODEL_KEYS = ("vocab_size", "max_seq_len", "head", "n_classes", "seed", "precision")


class RunConfigError(ValueError):
    pass


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig
    task: SyntheticTask
    train: TrainConfig
    output_dir: str

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / f"seed-{self.train.seed}"

    def to_dict(self) -> dict:
        model = {k: v for k, v in dataclasses.asdict(self.model).items() if k not in DERIVED_MODEL_KEYS}
        train = dataclasses.asdict(self.train)
        train["adapters"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in train["adapters"].items()}
        return {"model": model, "task": dataclasses.asdict(self.task), "train": train,
                "output": {"dir": self.output_dir}}


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _reject_unknown(section: str, given: dict, allowed: set[str]) -> None:
    if not isinstance(given, dict):
        raise RunConfigError(f"{section}: expected a mapping")
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise RunConfigError(f"{section}: unknown key(s) {', '.join(repr(k) for k in unknown)}")


def parse_run_config(doc: dict, overrides: dict | None = None) -> RunConfig:
    """Validate a config document and materialise every default."""
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    _reject_unknown("config", doc, set(SECTIONS))
    model_d = dict(doc.get("model", {}))
    task_d = dict(doc.get("task", {}))
    train_d = dict(doc.get("train", {}))
    out_d = dict(doc.get("output", {}))
    _reject_unknown("model", model_d, _field_names(ModelConfig) - set(DERIVED_MODEL_KEYS))
    _reject_unknown("task", task_d, _field_names(SyntheticTask))
    _reject_unknown("train", train_d, _field_names(TrainConfig))
    _reject_unknown("train.adapters", train_d.get("adapters", {}), _field_names(AdapterConfig))
    _reject_unknown("output", out_d, {"dir"})

    for key in ("seed", "proxy", "basis", "fraction", "searches_per_epoch"):
        if key in overrides:
            train_d[key] = overrides[key]
    try:
        train_cfg = TrainConfig(**train_d)
        task_d.setdefault("seed", train_cfg.seed)
        task = SyntheticTask(**task_d)
        model_cfg = ModelConfig(**model_d, vocab_size=task.vocab_size, max_seq_len=task.model_seq_len,
                                head=task.head, n_classes=task.n_classes, seed=train_cfg.seed,
                                precision=train_cfg.precision)
    except (TypeError, ValueError) as exc:
        raise RunConfigError(str(exc)) from exc
    out = overrides.get("out") or out_d.get("dir") or os.environ.get("HETEROLORA_OUT") or "runs"
    return RunConfig(model_cfg, task, train_cfg, str(out))


def load_run_config(path: str | Path, overrides: dict | None = None) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise RunConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise RunConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_run_config(doc, overrides)


def write_effective_config(cfg: RunConfig, path: Path) -> None:
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, vars(args))
    run_dir = cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    write_effective_config(cfg, run_dir / "effective_config.json")
    model = build_model(cfg.model, cfg.train)
    metrics = train(model, make_task(cfg.task), cfg.train, out_dir=run_dir)
    print(f"{run_dir}: final eval accuracy {metrics.final_accuracy:.4f}, "
          f"{metrics.trainable_params} trainable parameters, {metrics.wall_clock:.1f}s")
    return 0


def cmd_score(args) -> int:
    cfg = load_run_config(args.config, vars(args))
    proxy, basis = cfg.train.proxy, cfg.train.basis
    run_dir = cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg.model, cfg.train)
    data = None
    if proxy in ("snip", "gradnorm"):
        task = make_task(cfg.task)
        stream = task.batch_stream(cfg.train.batch_size, Seeds(cfg.train.seed).rng("proxy-data"))
        data = [next(stream) for _ in range(cfg.train.batch_budget)]
    scores = compute_scores(model, proxy, data, basis)
    path = run_dir / f"scores_{proxy}_{basis}.csv"
    write_scores_csv(scores, path)
    print(path)
    return 0


def cmd_export_frequency(args) -> int:
    run_dir = Path(args.run_dir)
    src = run_dir / "frequency.json"
    if not src.exists():
        print(f"error: {src} not found", file=sys.stderr)
        return 1
    matrix = FrequencyMatrix.from_dict(json.loads(src.read_text()))
    try:
        text = frequency_csv(matrix)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    dest = Path(args.out) if args.out else run_dir / "frequency.csv"
    dest.write_text(text)
    print(dest)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="heterolora", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="JSON run config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--proxy", choices=PROXIES)
        sp.add_argument("--basis", choices=BASES)
        sp.add_argument("--fraction", type=float)
        sp.add_argument("--searches-per-epoch", type=int, dest="searches_per_epoch")
        sp.add_argument("--out", help="output root (default: config, then $HETEROLORA_OUT, then ./runs)")

    common(sub.add_parser("train", help="fine-tune with HeteroLoRA allocation"))
    common(sub.add_parser("score", help="write saliency scores at initialisation"))
    ef = sub.add_parser("export-frequency", help="write the enablement-frequency CSV of a run")
    ef.add_argument("run_dir")
    ef.add_argument("--out", help="destination CSV (default: <run_dir>/frequency.csv)")
    return p


COMMANDS = {"train": cmd_train, "score": cmd_score, "export-frequency": cmd_export_frequency}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (RunConfigError, ConfigError, TaskError, AdapterConfigError, ScheduleError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (TrainingAborted, NumericError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
