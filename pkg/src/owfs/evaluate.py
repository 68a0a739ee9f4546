"""Evaluation: episode accuracy, cross-dataset runs, and the timing bench.

Evaluation episodes live in their own seed domain, are index-addressable,
and never mutate the model (batch-norm running statistics are read, not
updated), so any worker count produces the identical report.

The bench trains short runs for each head variant on the same dataset and
reports mean seconds per epoch over the last measured epochs, with the
warmup epoch discarded and the one-way/two-way ratios tabulated.
"""

from __future__ import annotations

import json
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .data import RawDataset, SplitDataset, apply_norm, as_split, resize_dataset
from .episodes import EVAL_DOMAIN, episode_at, validate_classes
from .model import Model
from .train import build_splits, train_run


class BenchError(RuntimeError):
    pass


def effective_workers(requested: int) -> int:
    cap = os.environ.get("OWFS_THREADS")
    if cap:
        return max(1, min(requested, int(cap)))
    return max(1, requested)


def binomial_ci(p: float, n: int, z: float = 1.96) -> tuple:
    half = z * np.sqrt(max(p * (1.0 - p), 0.0) / n)
    return (float(max(0.0, p - half)), float(min(1.0, p + half)))


@dataclass
class EvalReport:
    episodes: int
    correct: int
    accuracy: float
    ci_low: float
    ci_high: float
    acc_positive: float | None
    acc_negative: float | None
    mean_pos_prob: float
    seed: int
    shots: int
    dataset: str
    config: dict

    def to_json(self) -> str:
        doc = {"schema_version": 1, "kind": "eval"}
        doc.update(self.__dict__)
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        header = ("episodes,accuracy,ci_low,ci_high,acc_positive,"
                  "acc_negative,mean_pos_prob")
        row = (f"{self.episodes},{self.accuracy!r},{self.ci_low!r},"
               f"{self.ci_high!r},{self.acc_positive!r},"
               f"{self.acc_negative!r},{self.mean_pos_prob!r}")
        return header + "\n" + row + "\n"


def _softmax2(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max())
    return e / e.sum()


def evaluate(model: Model, split: SplitDataset, *, episodes: int = None,
             seed: int = None, shots: int = None, workers: int = None,
             transductive: bool = None) -> EvalReport:
    """Accuracy of ``model`` over deterministic episodes from ``split``."""
    cfg = model.cfg
    episodes = cfg.eval_episodes if episodes is None else episodes
    seed = cfg.eval_seed if seed is None else seed
    shots = cfg.shots if shots is None else shots
    workers = effective_workers(cfg.workers if workers is None else workers)
    transductive = cfg.bn_transductive if transductive is None else transductive
    mode = cfg.head_kind.episode_mode
    if split.geometry != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ValueError(
            f"geometry mismatch: model expects "
            f"{(cfg.channels, cfg.image_size, cfg.image_size)}, dataset has "
            f"{split.geometry}"
        )
    validate_classes(split, shots)

    preds = np.empty(episodes, dtype=int)
    labels = np.empty(episodes, dtype=int)
    pos_probs = np.empty(episodes)

    def run_one(i: int) -> None:
        ep = episode_at(split, mode, shots, seed, 0, i, EVAL_DOMAIN)
        logits = model.episode_logits(ep, training=False,
                                      transductive=transductive)
        preds[i] = int(np.argmax(logits.data))
        labels[i] = ep.label
        pos_probs[i] = _softmax2(logits.data)[0]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_one, range(episodes)))
    else:
        for i in range(episodes):
            run_one(i)

    hits = preds == labels
    correct = int(hits.sum())
    accuracy = correct / episodes
    lo, hi = binomial_ci(accuracy, episodes)

    def label_acc(lbl: int):
        mask = labels == lbl
        return float(hits[mask].mean()) if mask.any() else None

    return EvalReport(
        episodes=episodes,
        correct=correct,
        accuracy=accuracy,
        ci_low=lo,
        ci_high=hi,
        acc_positive=label_acc(0),
        acc_negative=label_acc(1),
        mean_pos_prob=float(pos_probs.mean()),
        seed=seed,
        shots=shots,
        dataset=f"{split.name}/{split.split}",
        config=cfg.to_dict(),
    )


def cross_evaluate(model: Model, raw: RawDataset, **kw) -> EvalReport:
    """Evaluate on an unmatched dataset: resize to the model's geometry and
    reuse the training normalization statistics (never refit)."""
    if model.norm_stats is None:
        raise ValueError("model carries no normalization statistics; "
                         "was it trained through train_run?")
    cfg = model.cfg
    resized = resize_dataset(raw, (cfg.image_size, cfg.image_size))
    normed = apply_norm(resized, model.norm_stats)
    return evaluate(model, as_split(normed, split="crosseval"), **kw)


# ---------------------------------------------------------------------------
# timing bench


@dataclass
class BenchReport:
    rows: list    # [{"head", "seconds_per_epoch", "episodes_per_epoch", ...}]
    ratios: list  # [{"pair", "ratio"}]
    hardware: str

    def to_json(self) -> str:
        doc = {"schema_version": 1, "kind": "bench", "rows": self.rows,
               "ratios": self.ratios, "hardware": self.hardware}
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        lines = ["head,seconds_per_epoch,episodes_per_epoch"]
        for r in self.rows:
            lines.append(f"{r['head']},{r['seconds_per_epoch']!r},"
                         f"{r['episodes_per_epoch']}")
        return "\n".join(lines) + "\n"

    def ratios_csv(self) -> str:
        lines = ["pair,ratio"]
        for r in self.ratios:
            lines.append(f"{r['pair']},{r['ratio']!r}")
        return "\n".join(lines) + "\n"


RATIO_PAIRS = (
    ("one_way_proto", "two_way_proto"),
    ("one_way_normal", "two_way_normal"),
)

MIN_EPOCH_SECONDS = 0.01


def bench(cfg: RunConfig, heads: list, *, epochs: int = 4,
          warmup_epochs: int = 1, seed: int = 0) -> BenchReport:
    """Seconds/epoch for each head under identical data and episode counts.

    Single-threaded by construction (the trainer is); the first
    ``warmup_epochs`` epochs are discarded and the remaining ones averaged.
    """
    if epochs - warmup_epochs < 1:
        raise BenchError("need at least one measured epoch after warmup")
    splits = build_splits(cfg)
    rows = []
    for head in heads:
        variant = cfg.replace(head=head, epochs=epochs, workers=1)
        variant.validate()
        report, _ = train_run(variant, seed, splits=splits)
        measured = report.epoch_seconds[warmup_epochs:]
        if min(measured) < MIN_EPOCH_SECONDS:
            raise BenchError(
                f"epoch duration {min(measured):.4f}s is too short to time "
                f"reliably; raise episodes_per_epoch"
            )
        rows.append({
            "head": head,
            "seconds_per_epoch": float(np.mean(measured)),
            "episodes_per_epoch": cfg.episodes_per_epoch,
            "epochs_measured": len(measured),
        })

    by_head = {r["head"]: r["seconds_per_epoch"] for r in rows}
    ratios = []
    for one, two in RATIO_PAIRS:
        if one in by_head and two in by_head:
            ratios.append({"pair": f"{one}/{two}",
                           "ratio": by_head[one] / by_head[two]})
    hardware = f"{platform.system()} {platform.machine()}, python {platform.python_version()}"
    return BenchReport(rows=rows, ratios=ratios, hardware=hardware)


def bench_repeat(cfg: RunConfig, head: str, *, epochs: int = 4,
                 warmup_epochs: int = 1, seed: int = 0, times: int = 2) -> list:
    """Repeated single-head timings (noise measurement)."""
    out = []
    for _ in range(times):
        report = bench(cfg, [head], epochs=epochs,
                       warmup_epochs=warmup_epochs, seed=seed)
        out.append(report.rows[0]["seconds_per_epoch"])
    return out
