"""Deterministic fine-tuning loop with HeteroLoRA allocation hooks."""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .adapters import AdapterConfig, inject
from .allocator import Allocator, DynamicSchedule, FrequencyMatrix, StaticSchedule, frequency_csv
from .autodiff import NumericError, Tensor
from .saliency import BASES, PROXIES
from .seeding import Seeds, set_global_seed
from .tasks import Batch, TaskData
from .transformer import ModelConfig, Transformer, count_parameters, save_checkpoint

SCHEDULES = ("static", "dynamic")


class TrainingAborted(RuntimeError):
    pass


class AdamW:
    """Adam with bias correction and decoupled weight decay.

    State is keyed by parameter name and carries its own step count, so a
    module that sits disabled for a while resumes with its moments intact.
    """

    def __init__(self, lr: float = 1e-3, weight_decay: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.state: dict[str, dict] = {}

    def step(self, params: Mapping[str, Tensor]) -> int:
        """Update every parameter that holds a gradient; returns coordinates touched."""
        bad = [k for k, p in params.items() if p.grad is not None and not np.isfinite(p.grad).all()]
        if bad:
            raise NumericError(f"non-finite gradient in {bad}")
        touched = 0
        for name, p in params.items():
            if p.grad is None:
                continue
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
            adamw_update(p.data, p.grad, st, self.lr, self.weight_decay, self.betas, self.eps)
            touched += p.data.size
        return touched


def adamw_update(param: np.ndarray, grad: np.ndarray, state: dict, lr: float, weight_decay: float,
                 betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """In-place AdamW step on ``param``; ``state`` holds ``m``, ``v`` and ``t``."""
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    m, v = state["m"], state["v"]
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * grad * grad
    mhat = m / (1 - b1 ** t)
    vhat = v / (1 - b2 ** t)
    if weight_decay:
        param *= 1 - lr * weight_decay
    param -= lr * mhat / (np.sqrt(vhat) + eps)


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 10
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    precision: str = "float64"
    adapters: AdapterConfig = field(default_factory=AdapterConfig)
    proxy: str = "gradnorm"
    basis: str = "decomposed"
    fraction: float = 0.25
    mode: str = "combined"
    schedule: str = "dynamic"
    searches_per_epoch: int = 5
    batch_budget: int = 32
    train_head: bool = True

    def __post_init__(self):
        if isinstance(self.adapters, Mapping):
            self.adapters = AdapterConfig(**self.adapters)
        for name in ("batch_size", "epochs", "searches_per_epoch", "batch_budget"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0 < self.fraction <= 1:
            raise ValueError("fraction must lie in (0, 1]")
        if self.proxy not in PROXIES:
            raise ValueError(f"proxy must be one of {PROXIES}")
        if self.basis not in BASES:
            raise ValueError(f"basis must be one of {BASES}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.mode not in ("combined", "separated"):
            raise ValueError("mode must be combined or separated")


@dataclass
class RunMetrics:
    train_loss: list[float] = field(default_factory=list)
    eval_accuracy: list[float] = field(default_factory=list)
    eval_loss: list[float] = field(default_factory=list)
    plans: list[dict] = field(default_factory=list)
    trainable_counts: list[int] = field(default_factory=list)
    trainable_params: int = 0
    frequency: FrequencyMatrix | None = None
    wall_clock: float = 0.0

    @property
    def final_accuracy(self) -> float:
        return self.eval_accuracy[-1]


def seed_summary(values: Sequence[float]) -> dict[str, float]:
    """Median and mean across seeds, labelled."""
    return {"median": float(statistics.median(values)), "mean": float(statistics.fmean(values))}


def build_model(model_config: ModelConfig, config: TrainConfig | None = None) -> Transformer:
    """Seeded base model with the configured adapters installed (base frozen)."""
    if config is None:
        return Transformer(model_config)
    model = Transformer(replace(model_config, precision=config.precision))
    cfg = config.adapters
    if cfg.lora_sites or cfg.shortcut_kinds:
        inject(model, cfg)
    model.freeze_base(train_head=config.train_head)
    return model


def evaluate(model: Transformer, batches: Sequence[Batch]) -> tuple[float, float]:
    """Accuracy and mean per-example loss; never mutates the model."""
    batches = list(batches)
    if not batches:
        raise ValueError("evaluate: empty eval stream")
    correct = total = 0
    loss_sum = 0.0
    with ad.no_grad():
        for b in batches:
            logits = model.forward(b.tokens).data
            if b.positions is not None:
                logits = logits[:, b.positions]
                targets = b.targets[:, b.positions]
            else:
                targets = b.targets
            correct += int((logits.argmax(axis=-1) == targets).sum())
            total += targets.size
            z = logits - logits.max(axis=-1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            loss_sum += float(-np.take_along_axis(logp, targets[..., None], axis=-1).sum())
    return correct / total, loss_sum / total


def make_schedule(config: TrainConfig, task: TaskData, seeds: Seeds):
    data = task.batch_stream(config.batch_size, seeds.rng("proxy-data"))
    alloc = Allocator(config.proxy, config.fraction, config.mode, config.basis, config.batch_budget,
                      data=data, rng=seeds.rng("tie-break"))
    if config.schedule == "static":
        return StaticSchedule(alloc)
    return DynamicSchedule(alloc, config.searches_per_epoch)


def _metrics_line(fh, record: dict) -> None:
    if fh is not None:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def train(model: Transformer, task: TaskData, config: TrainConfig,
          schedule: Callable | None = None, out_dir: str | Path | None = None) -> RunMetrics:
    """Fine-tune ``model`` on ``task``.

    ``schedule(model, epoch, step, steps_per_epoch)`` runs before every
    optimizer step and may return a new plan; it defaults to the configured
    allocator, or to none when the model carries no adapters.  When ``out_dir`` is given the
    run writes ``metrics.jsonl``, ``checkpoint.npz``, ``frequency.json`` and
    ``frequency.csv`` there.
    """
    seeds = set_global_seed(config.seed)
    if schedule is None and model.adapters:
        schedule = make_schedule(config, task, seeds)
    order_rng = seeds.rng("data-order")
    opt = AdamW(config.learning_rate, config.weight_decay)
    metrics = RunMetrics()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    fh = open(out / "metrics.jsonl", "w") if out is not None else None
    last_good = model.state_dict()
    t0 = time.perf_counter()
    try:
        for epoch in range(config.epochs):
            batches = task.train_batches(config.batch_size, order_rng)
            losses = []
            for step, batch in enumerate(batches):
                plan = schedule(model, epoch, step, len(batches)) if schedule else None
                if plan is not None:
                    n = count_parameters(model, trainable_only=True)
                    metrics.trainable_counts.append(n)
                    summary = {**plan.summary(), "epoch": epoch, "step": step, "trainable_params": n}
                    metrics.plans.append(summary)
                    _metrics_line(fh, {"type": "search", **summary})
                model.zero_grad()
                loss = model.loss(batch.tokens, batch.targets, batch.positions)
                if not np.isfinite(loss.data):
                    model.load_state_dict(last_good)
                    if out is not None:
                        save_checkpoint(model, out / "checkpoint.npz", {"aborted_epoch": epoch})
                    raise TrainingAborted(f"non-finite loss at epoch {epoch} step {step}")
                loss.backward()
                opt.step(model.active_parameters())
                losses.append(float(loss.data))
            model.zero_grad()
            acc, eval_loss = evaluate(model, task.eval_batches(config.batch_size))
            metrics.train_loss.append(float(np.mean(losses)))
            metrics.eval_accuracy.append(acc)
            metrics.eval_loss.append(eval_loss)
            _metrics_line(fh, {"type": "epoch", "epoch": epoch, "train_loss": metrics.train_loss[-1],
                               "eval_accuracy": acc, "eval_loss": eval_loss})
            last_good = model.state_dict()
    finally:
        if fh is not None:
            fh.close()
    metrics.wall_clock = time.perf_counter() - t0
    metrics.trainable_params = count_parameters(model, trainable_only=True)
    alloc = getattr(schedule, "allocator", None)
    metrics.frequency = alloc.frequency if alloc is not None else None
    if out is not None:
        save_checkpoint(model, out / "checkpoint.npz", {"train_config": asdict(config)})
        if metrics.frequency is not None:
            (out / "frequency.json").write_text(json.dumps(metrics.frequency.to_dict(), sort_keys=True) + "\n")
            (out / "frequency.csv").write_text(frequency_csv(metrics.frequency, model.adapters))
    return metrics
