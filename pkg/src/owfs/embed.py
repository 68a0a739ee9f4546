"""Convolutional embedding network with two block orderings.

A block is Conv(3x3, same padding) -> BatchNorm -> activation -> MaxPool in
the ``standard`` layout, or Conv -> activation -> MaxPool -> BatchNorm in
the ``reordered`` layout. With the reordered layout the output of the final
block (and hence the flattened embedding) is batch-normalized, which keeps
the latent space centered at zero with unit variance per dimension; the
null-class heads rely on exactly that.

Pooling uses floor semantics, so 28x28 inputs shrink 28 -> 14 -> 7 -> 3 -> 1
across the default four blocks and the embedding dimension equals the final
channel count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


ACTIVATIONS = ("relu", "leaky_relu")
ORDERS = ("standard", "reordered")


class ConfigError(ValueError):
    """Invalid model or run configuration; the message names the field."""


@dataclass
class EmbedderConfig:
    in_channels: int = 1
    in_size: tuple = (28, 28)
    num_blocks: int = 4
    channels: int = 64
    kernel: int = 3
    activation: str = "relu"
    leaky_alpha: float = 0.01
    order: str = "reordered"
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def validate(self) -> None:
        if self.num_blocks < 1:
            raise ConfigError(f"num_blocks: must be >= 1, got {self.num_blocks}")
        if self.channels < 1:
            raise ConfigError(f"channels: must be >= 1, got {self.channels}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels: must be >= 1, got {self.in_channels}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel: must be odd and >= 1, got {self.kernel}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation: expected one of {ACTIVATIONS}, "
                              f"got {self.activation!r}")
        if self.order not in ORDERS:
            raise ConfigError(f"order: expected one of {ORDERS}, got {self.order!r}")
        if not (0.0 < self.bn_momentum <= 1.0):
            raise ConfigError(f"bn_momentum: must be in (0, 1], got {self.bn_momentum}")
        if self.bn_eps <= 0:
            raise ConfigError(f"bn_eps: must be positive, got {self.bn_eps}")
        h, w = self.in_size
        for i in range(self.num_blocks):
            h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise ConfigError(
                    f"in_size: {self.in_size} collapses to zero after "
                    f"{i + 1} of {self.num_blocks} pooling rounds"
                )

    def out_geometry(self) -> tuple:
        h, w = self.in_size
        for _ in range(self.num_blocks):
            h, w = h // 2, w // 2
        return (self.channels, h, w)


class BatchNorm:
    """Per-channel batch normalization with running statistics.

    Training mode normalizes with the current batch's mean and population
    variance and updates the running averages; eval mode normalizes with
    the stored running statistics and never mutates them.
    """

    def __init__(self, channels: int, eps: float, momentum: float, prefix: str):
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(f"{prefix}.gamma", np.ones(channels))
        self.beta = Parameter(f"{prefix}.beta", np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x: Tensor, batch_stats: bool, update_running: bool) -> Tensor:
        if batch_stats:
            out, mu, var = T.batchnorm2d_train(
                x, self.gamma.tensor, self.beta.tensor, self.eps
            )
            if update_running:
                m = self.momentum
                self.running_mean = (1 - m) * self.running_mean + m * mu
                self.running_var = (1 - m) * self.running_var + m * var
            return out
        return T.batchnorm2d_eval(
            x, self.gamma.tensor, self.beta.tensor,
            self.running_mean, self.running_var, self.eps,
        )

    def parameters(self) -> list:
        return [self.beta, self.gamma]


class ConvBlock:
    def __init__(self, cfg: EmbedderConfig, in_channels: int, index: int,
                 rng: np.random.Generator):
        prefix = f"blocks.{index:02d}"
        k = cfg.kernel
        fan_in = in_channels * k * k
        bound = np.sqrt(6.0 / fan_in)  # He-uniform
        self.weight = Parameter(
            f"{prefix}.conv.weight",
            rng.uniform(-bound, bound, size=(cfg.channels, in_channels, k, k)),
        )
        self.bias = Parameter(f"{prefix}.conv.bias", np.zeros(cfg.channels))
        self.bn = BatchNorm(cfg.channels, cfg.bn_eps, cfg.bn_momentum,
                            prefix=f"{prefix}.bn")
        self.activation = cfg.activation
        self.leaky_alpha = cfg.leaky_alpha
        self.order = cfg.order

    def _act(self, x: Tensor) -> Tensor:
        if self.activation == "relu":
            return T.relu(x)
        return T.leaky_relu(x, self.leaky_alpha)

    def forward(self, x: Tensor, batch_stats: bool, update_running: bool) -> Tensor:
        x = T.conv2d(x, self.weight.tensor, bias=self.bias.tensor, padding="same")
        if self.order == "standard":
            x = self.bn.forward(x, batch_stats, update_running)
            x = self._act(x)
            return T.maxpool2d(x)
        x = self._act(x)
        x = T.maxpool2d(x)
        return self.bn.forward(x, batch_stats, update_running)

    def parameters(self) -> list:
        return [self.weight, self.bias] + self.bn.parameters()


class Embedder:
    """Maps image batches [B,C,H,W] to embeddings [B,D]."""

    def __init__(self, cfg: EmbedderConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.blocks = []
        in_ch = cfg.in_channels
        for i in range(cfg.num_blocks):
            self.blocks.append(ConvBlock(cfg, in_ch, i, rng))
            in_ch = cfg.channels
        c, h, w = cfg.out_geometry()
        self.output_dim = c * h * w
        self.images_embedded = 0

    def embed(self, x, training: bool, transductive: bool = False) -> Tensor:
        """Embed a batch. ``training`` selects batch statistics in BN and
        updates the running averages; ``transductive`` evaluates with batch
        statistics without touching the running averages."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        expect = (self.cfg.in_channels, *self.cfg.in_size)
        if x.data.ndim != 4 or x.shape[1:] != expect:
            raise ConfigError(
                f"input: expected [B,{expect[0]},{expect[1]},{expect[2]}], "
                f"got {x.shape}"
            )
        batch_stats = training or transductive
        for block in self.blocks:
            x = block.forward(x, batch_stats, update_running=training)
        self.images_embedded += x.shape[0]
        return T.reshape(x, (x.shape[0], self.output_dim))

    def parameters(self) -> list:
        params = []
        for b in self.blocks:
            params.extend(b.parameters())
        return sorted(params, key=lambda p: p.name)

    def state_dict(self) -> dict:
        state = {}
        for i, b in enumerate(self.blocks):
            for p in b.parameters():
                state[p.name] = p.data.copy()
            state[f"blocks.{i:02d}.bn.running_mean"] = b.bn.running_mean.copy()
            state[f"blocks.{i:02d}.bn.running_var"] = b.bn.running_var.copy()
        return state

    def load_state_dict(self, state: dict) -> None:
        for i, b in enumerate(self.blocks):
            for p in b.parameters():
                src = state[p.name]
                if src.shape != p.data.shape:
                    raise ConfigError(
                        f"{p.name}: checkpoint shape {src.shape} does not "
                        f"match model shape {p.data.shape}"
                    )
                p.data = src.copy()
            b.bn.running_mean = state[f"blocks.{i:02d}.bn.running_mean"].copy()
            b.bn.running_var = state[f"blocks.{i:02d}.bn.running_var"].copy()


def build_embedder(cfg: EmbedderConfig, seed: int = 0) -> Embedder:
    """Construct an embedder with He-uniform conv weights, zero biases,
    gamma=1, beta=0. Bit-identical for identical (cfg, seed)."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    return Embedder(cfg, rng)
