"""A trained (or trainable) model: embedder + head wiring + data transform.

The model owns everything an episode needs to become two logits: the
embedding network, the head kind with its knobs, the null class (for the
one-way normal head), and the normalization statistics of the dataset it
was trained on (so unmatched datasets can be run through the identical
transform).

Within an episode the supports and the query are embedded as one batch, in
the fixed order [positive supports, negative supports, query]; in training
mode batch normalization therefore draws its statistics from the episode
itself.
"""

from __future__ import annotations

import numpy as np

from . import checkpoint as ckpt
from . import heads as H
from . import tensor as T
from .config import RunConfig, parse_config_text
from .data import NormStats
from .embed import Embedder, build_embedder
from .episodes import Episode
from .tensor import Tensor


class Model:
    def __init__(self, cfg: RunConfig, embedder: Embedder,
                 null: H.NullClass | None, norm_stats: NormStats | None = None):
        self.cfg = cfg
        self.embedder = embedder
        self.null = null
        self.norm_stats = norm_stats

    @property
    def head_kind(self) -> H.HeadKind:
        return self.cfg.head_kind

    def parameters(self) -> list:
        params = list(self.embedder.parameters())
        if self.null is not None:
            params.extend(self.null.parameters())
        return sorted(params, key=lambda p: p.name)

    def episode_logits(self, ep: Episode, training: bool,
                       transductive: bool = False) -> Tensor:
        k = ep.pos_supports.shape[0]
        parts = [ep.pos_supports]
        n_neg = 0
        if ep.neg_supports is not None:
            parts.append(ep.neg_supports)
            n_neg = ep.neg_supports.shape[0]
        parts.append(ep.query[None])
        batch = np.concatenate(parts)
        emb = self.embedder.embed(Tensor(batch), training=training,
                                  transductive=transductive)
        total = batch.shape[0]
        pos = T.slice_rows(emb, 0, k)
        neg = T.slice_rows(emb, k, k + n_neg) if n_neg else None
        q = T.reshape(T.slice_rows(emb, total - 1, total),
                      (self.embedder.output_dim,))
        return H.episode_logits(
            self.head_kind, pos, neg, q,
            null=self.null,
            sigma_floor=self.cfg.sigma_floor,
            k_min=self.cfg.k_min,
            matching_metric=self.cfg.matching_metric,
            temperature=self.cfg.temperature,
        )

    def episode_loss(self, ep: Episode, training: bool = True):
        logits = self.episode_logits(ep, training=training)
        return H.cross_entropy(logits, ep.label), logits

    def arrays(self) -> dict:
        """Model state as named arrays for the checkpoint container."""
        out = {f"model/{k}": v for k, v in self.embedder.state_dict().items()}
        if self.null is not None and self.null.trainable:
            out["model/head.null_rho"] = self.null.rho.data.copy()
        if self.norm_stats is not None:
            out["model/norm.mean"] = np.asarray(self.norm_stats.mean, dtype=float)
            out["model/norm.std"] = np.asarray(self.norm_stats.std, dtype=float)
        return out

    def load_arrays(self, arrays: dict) -> None:
        state = {k[len("model/"):]: v for k, v in arrays.items()
                 if k.startswith("model/") and not k.startswith("model/norm.")
                 and k != "model/head.null_rho"}
        self.embedder.load_state_dict(state)
        if self.null is not None and self.null.trainable:
            self.null.rho.data = arrays["model/head.null_rho"].copy()
        if "model/norm.mean" in arrays:
            self.norm_stats = NormStats(
                mean=arrays["model/norm.mean"].copy(),
                std=arrays["model/norm.std"].copy(),
                scope=self.cfg.norm_scope,
            )


def build_model(cfg: RunConfig, seed: int,
                norm_stats: NormStats | None = None) -> Model:
    embedder = build_embedder(cfg.embedder_config(), seed=seed)
    null = None
    if cfg.head_kind is H.HeadKind.ONE_WAY_NORMAL:
        null = H.NullClass(embedder.output_dim,
                           trainable=cfg.null_sigma == "trainable")
    return Model(cfg, embedder, null, norm_stats)


def save_model(path, model: Model, opt_arrays: dict | None = None) -> None:
    arrays = model.arrays()
    if opt_arrays:
        arrays.update({f"opt/{k}": v for k, v in opt_arrays.items()})
    ckpt.save_checkpoint(path, arrays, model.cfg.to_text())


def load_model(path):
    """Rebuild a model from a checkpoint. Returns (model, opt arrays)."""
    arrays, config_text = ckpt.load_checkpoint(path)
    cfg = parse_config_text(config_text)
    model = build_model(cfg, seed=0)
    model.load_arrays(arrays)
    opt = {k[len("opt/"):]: v for k, v in arrays.items() if k.startswith("opt/")}
    return model, opt
