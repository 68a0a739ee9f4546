"""Episodic training: Adam, the epoch loop, checkpoints, multi-seed runs.

One optimizer step per episode, cross-entropy over the two logits. Epoch
wall time is measured around the episode loop only, so ingestion and
checkpointing never pollute the timing numbers. Gradients that go
non-finite abort the run with the offending parameter named; the Gaussian
head trained with plain ReLU is expected to trip this, and silently
skipping the step would hide exactly that failure mode.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import (load_idx, load_image_tree, normalize, resize_dataset,
                   split_by_class, split_by_group, split_from_files,
                   synth_blobs)
from .episodes import TRAIN_DOMAIN, episode_at, validate_classes
from .model import build_model, save_model


class GradientNaNError(RuntimeError):
    """A gradient went NaN/inf; training aborted."""

    def __init__(self, parameter: str, step: int):
        self.parameter = parameter
        self.step = step
        super().__init__(
            f"non-finite gradient in parameter {parameter!r} at step {step}"
        )


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for p in params:
            state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        return state

    def arrays(self) -> dict:
        out = {"adam.t": np.asarray(float(self.t))}
        for name in self.m:
            out[f"adam.m/{name}"] = self.m[name].copy()
            out[f"adam.v/{name}"] = self.v[name].copy()
        return out


def adam_step(params, state: AdamState) -> None:
    """Standard bias-corrected Adam update, applied in place."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p in params:
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise GradientNaNError(p.name, state.t)
        m = state.m[p.name]
        v = state.v[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# data assembly


def build_splits(cfg: RunConfig):
    """Load, resize, normalize, and split the configured dataset.

    Returns (train split, test split, normalization stats). Statistics are
    fitted dataset-wide before splitting, and are what a cross-dataset
    evaluation must reuse.
    """
    size = (cfg.image_size, cfg.image_size)
    if cfg.dataset == "synth":
        ds = synth_blobs(cfg.synth_classes, cfg.synth_per_class,
                         geometry=(cfg.channels, *size),
                         spread=cfg.synth_spread, seed=cfg.synth_seed)
    elif cfg.dataset == "image_tree":
        ds = load_image_tree(cfg.data_root, resize=size, channels=cfg.channels)
    else:
        ds = resize_dataset(load_idx(cfg.idx_images, cfg.idx_labels), size)

    ds, stats = normalize(ds, scope=cfg.norm_scope)

    if cfg.split == "group":
        train, test = split_by_group(ds, cfg.train_groups, cfg.split_seed)
    elif cfg.split == "file":
        train, test = split_from_files(ds, cfg.split_train_file,
                                       cfg.split_test_file)
    else:
        train, test = split_by_class(ds, cfg.train_fraction, cfg.split_seed)
    return train, test, stats


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class TrainReport:
    seed: int
    config: dict
    epochs: list          # [{"epoch": int, "loss": float, "acc": float}]
    epoch_seconds: list   # wall time per epoch, episode loop only
    supports_embedded: int
    episodes_total: int
    checkpoint_path: str | None = None

    @property
    def final_loss(self) -> float:
        return self.epochs[-1]["loss"]

    @property
    def final_acc(self) -> float:
        return self.epochs[-1]["acc"]

    def to_json(self) -> str:
        doc = {
            "schema_version": 1,
            "kind": "train",
            "seed": self.seed,
            "config": self.config,
            "epochs": self.epochs,
            "supports_embedded": self.supports_embedded,
            "episodes_total": self.episodes_total,
            "checkpoint": self.checkpoint_path,
            "timing": {"epoch_seconds": self.epoch_seconds},
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        lines = ["epoch,loss,acc,seconds"]
        for row, secs in zip(self.epochs, self.epoch_seconds):
            lines.append(f"{row['epoch']},{row['loss']!r},{row['acc']!r},{secs!r}")
        return "\n".join(lines) + "\n"


def train_run(cfg: RunConfig, seed: int, out_dir=None, splits=None,
              max_episodes: int | None = None):
    """Train one model. Returns (TrainReport, Model).

    ``splits`` lets callers reuse an already-ingested dataset (multi-seed
    runs, benchmarks). ``max_episodes`` caps the total episode count,
    cutting the last epoch short; it exists for bounded stability probes.
    """
    cfg.validate()
    if splits is None:
        splits = build_splits(cfg)
    train_split, _, stats = splits
    mode = cfg.head_kind.episode_mode
    validate_classes(train_split, cfg.shots)

    model = build_model(cfg, seed, norm_stats=stats)
    params = model.parameters()
    adam = AdamState.for_params(params, lr=cfg.lr, beta1=cfg.beta1,
                                beta2=cfg.beta2, eps=cfg.adam_eps)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    epochs = []
    epoch_seconds = []
    episodes_total = 0

    for epoch in range(cfg.epochs):
        n = cfg.episodes_per_epoch
        if max_episodes is not None:
            n = min(n, max_episodes - episodes_total)
            if n <= 0:
                break
        losses = np.empty(n)
        correct = 0
        t0 = time.perf_counter()
        for i in range(n):
            ep = episode_at(train_split, mode, cfg.shots, seed, epoch, i,
                            TRAIN_DOMAIN)
            loss, logits = model.episode_loss(ep, training=True)
            for p in params:
                p.zero_grad()
            loss.backward()
            adam_step(params, adam)
            losses[i] = loss.item()
            correct += int(np.argmax(logits.data) == ep.label)
        epoch_seconds.append(time.perf_counter() - t0)
        episodes_total += n
        epochs.append({"epoch": epoch + 1,
                       "loss": float(losses.mean()),
                       "acc": correct / n})
        if out_dir is not None and cfg.checkpoint_every_epoch:
            save_model(out_dir / f"model_epoch{epoch + 1:03d}.owfs", model,
                       adam.arrays())

    # One query per episode rides along in each embedded batch; the rest of
    # the counter is support forward passes.
    supports_embedded = model.embedder.images_embedded - episodes_total
    report = TrainReport(
        seed=seed,
        config=cfg.to_dict(),
        epochs=epochs,
        epoch_seconds=epoch_seconds,
        supports_embedded=supports_embedded,
        episodes_total=episodes_total,
    )
    if out_dir is not None:
        path = out_dir / "model.owfs"
        save_model(path, model, adam.arrays())
        report.checkpoint_path = path.name
        (out_dir / "report.json").write_text(report.to_json())
        (out_dir / "report.csv").write_text(report.to_csv())
    return report, model


# ---------------------------------------------------------------------------
# multi-seed orchestration


@dataclass
class MultiSeedReport:
    per_seed: list      # [{"seed", "final_loss", "final_train_acc", "test_acc"}]
    aggregate: dict     # {"<metric>_mean", "<metric>_std"}
    failures: list      # [{"seed", "error"}]

    @property
    def partial(self) -> bool:
        return bool(self.failures)

    def to_json(self) -> str:
        doc = {
            "schema_version": 1,
            "kind": "multi_seed",
            "per_seed": self.per_seed,
            "aggregate": self.aggregate,
            "failures": self.failures,
            "partial": self.partial,
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def multi_seed(cfg: RunConfig, out_dir=None, splits=None) -> MultiSeedReport:
    """Run every seed in cfg.seeds; aggregate mean/std per metric.

    Seed order does not affect the aggregate. A failing seed is recorded
    and the remaining seeds still run.
    """
    from .evaluate import evaluate  # local import; evaluate builds on Model

    cfg.validate()
    if splits is None:
        splits = build_splits(cfg)
    _, test_split, _ = splits
    out_dir = Path(out_dir) if out_dir is not None else None

    rows = []
    failures = []
    for seed in sorted(cfg.seeds):
        seed_dir = out_dir / f"seed_{seed}" if out_dir is not None else None
        try:
            report, model = train_run(cfg, seed, out_dir=seed_dir, splits=splits)
            ev = evaluate(model, test_split)
            rows.append({
                "seed": seed,
                "final_loss": report.final_loss,
                "final_train_acc": report.final_acc,
                "test_acc": ev.accuracy,
            })
            if seed_dir is not None:
                (seed_dir / "eval.json").write_text(ev.to_json())
        except Exception as exc:  # noqa: BLE001 - seed isolation is the point
            failures.append({"seed": seed, "error": f"{type(exc).__name__}: {exc}"})

    aggregate = {}
    for metric in ("final_loss", "final_train_acc", "test_acc"):
        values = np.array([r[metric] for r in rows])
        if len(values):
            aggregate[f"{metric}_mean"] = float(values.mean())
            aggregate[f"{metric}_std"] = float(values.std())
    result = MultiSeedReport(per_seed=rows, aggregate=aggregate,
                             failures=failures)
    if out_dir is not None:
        (out_dir / "multi_seed.json").write_text(result.to_json())
    return result
