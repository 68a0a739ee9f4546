"""Episode construction for episodic training and evaluation.

One episode holds K support examples of a uniformly drawn positive class,
one query, and the ground-truth label. The query is a held-out example of
the positive class with probability exactly 0.5, otherwise a uniform
example of a uniform other class. Two-way episodes additionally draw K
negative supports example-uniformly (without replacement) from the pooled
remainder of the dataset, so negative supports may repeat classes.

Reproducibility: episode ``i`` of epoch ``e`` under root seed ``s`` in
domain ``d`` (0 = training, 1 = evaluation) uses a PCG64 generator seeded
with ``SeedSequence([s, d, e, i])``. Episodes are therefore addressable by
index, identical across runs, and independent of evaluation order, which
makes parallel evaluation exactly equivalent to serial.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .data import SplitDataset

MODES = ("one_way", "two_way")

TRAIN_DOMAIN = 0
EVAL_DOMAIN = 1


class EpisodeError(ValueError):
    pass


@dataclass
class Episode:
    pos_supports: np.ndarray            # [K,C,H,W]
    neg_supports: Optional[np.ndarray]  # [K,C,H,W], None in one-way mode
    query: np.ndarray                   # [C,H,W]
    label: int                          # 0 positive, 1 negative/null
    pos_class: str
    query_class: str


def episode_rng(seed: int, epoch: int, index: int,
                domain: int = TRAIN_DOMAIN) -> np.random.Generator:
    """The documented counter scheme; see the module docstring."""
    ss = np.random.SeedSequence([seed, domain, epoch, index])
    return np.random.Generator(np.random.PCG64(ss))


def sample_episode(ds: SplitDataset, mode: str, shots: int,
                   rng: np.random.Generator) -> Episode:
    """Draw one episode. Draw order is fixed: positive class, support
    permutation, query coin, query, then negative supports."""
    if mode not in MODES:
        raise EpisodeError(f"mode must be one of {MODES}, got {mode!r}")
    if shots < 1:
        raise EpisodeError(f"shots must be >= 1, got {shots}")
    n_classes = len(ds.classes)
    if mode == "two_way" and n_classes < 2:
        raise EpisodeError("two_way mode needs at least 2 classes")

    pos_idx = int(rng.integers(n_classes))
    pos = ds.classes[pos_idx]
    n = len(pos.images)
    if n < shots + 1:
        raise EpisodeError(
            f"class {pos.class_id} has {n} examples; need >= {shots + 1} "
            f"for {shots}-shot episodes"
        )
    perm = rng.permutation(n)
    support_idx = perm[:shots]
    pos_supports = pos.images[support_idx]

    positive_query = bool(rng.random() < 0.5)
    if positive_query:
        query_idx = perm[shots + int(rng.integers(n - shots))]
        query = pos.images[query_idx]
        query_class = pos.class_id
        label = 0
    else:
        if n_classes < 2:
            raise EpisodeError("negative queries need at least 2 classes")
        other = int(rng.integers(n_classes - 1))
        if other >= pos_idx:
            other += 1
        rec = ds.classes[other]
        query = rec.images[int(rng.integers(len(rec.images)))]
        query_class = rec.class_id
        label = 1

    neg_supports = None
    if mode == "two_way":
        sizes = np.array([len(c.images) for i, c in enumerate(ds.classes)
                          if i != pos_idx])
        others = [c for i, c in enumerate(ds.classes) if i != pos_idx]
        total = int(sizes.sum())
        if total < shots:
            raise EpisodeError(
                f"only {total} non-positive examples available; need {shots}"
            )
        flat = rng.choice(total, size=shots, replace=False)
        bounds = np.cumsum(sizes)
        neg = []
        for f in flat:
            ci = int(np.searchsorted(bounds, f, side="right"))
            within = int(f - (bounds[ci - 1] if ci > 0 else 0))
            neg.append(others[ci].images[within])
        neg_supports = np.stack(neg)

    return Episode(
        pos_supports=pos_supports,
        neg_supports=neg_supports,
        query=query,
        label=label,
        pos_class=pos.class_id,
        query_class=query_class,
    )


def episode_at(ds: SplitDataset, mode: str, shots: int, seed: int,
               epoch: int, index: int,
               domain: int = TRAIN_DOMAIN) -> Episode:
    """The index-addressable form of the stream."""
    return sample_episode(ds, mode, shots, episode_rng(seed, epoch, index, domain))


def episode_stream(ds: SplitDataset, mode: str, shots: int, count: int,
                   seed: int, epoch: int = 0,
                   domain: int = TRAIN_DOMAIN) -> Iterator[Episode]:
    """A deterministic sequence of ``count`` episodes."""
    for i in range(count):
        yield episode_at(ds, mode, shots, seed, epoch, i, domain)


def validate_classes(ds: SplitDataset, shots: int) -> None:
    """Check every class can play the positive role at this shot count."""
    for c in ds.classes:
        if len(c.images) < shots + 1:
            raise EpisodeError(
                f"class {c.class_id} has {len(c.images)} examples; need "
                f">= {shots + 1} for {shots}-shot episodes"
            )
