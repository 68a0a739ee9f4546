"""Run configuration: every knob of an experiment in one flat record.

Configs round-trip through a line-oriented ``key = value`` text format
('#' starts a comment). The resolved text is echoed into every output
directory and embedded in checkpoints and reports, so any artifact can be
reproduced from itself.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from .embed import ConfigError, EmbedderConfig
from .heads import HeadKind

HEAD_KINDS = tuple(k.value for k in HeadKind)
DATASETS = ("synth", "image_tree", "idx")
SPLITS = ("group", "class", "file")


@dataclass
class RunConfig:
    # model
    head: str = "one_way_proto"
    order: str = "reordered"
    activation: str = "default"  # relu for proto/matching, leaky for normal
    leaky_alpha: float = 0.01
    blocks: int = 4
    filters: int = 64
    kernel: int = 3
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    bn_transductive: bool = False
    # episodes
    shots: int = 5
    episodes_per_epoch: int = 2000
    epochs: int = 10
    # heads
    null_sigma: str = "fixed"  # or "trainable"
    sigma_floor: float = 1e-3
    k_min: int = 2
    matching_metric: str = "sqeuclid"
    temperature: float = 1.0
    # optimizer
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # data
    dataset: str = "synth"
    data_root: str = ""
    idx_images: str = ""
    idx_labels: str = ""
    synth_classes: int = 20
    synth_per_class: int = 20
    synth_spread: float = 0.25
    synth_seed: int = 0
    image_size: int = 28
    channels: int = 1
    split: str = "class"
    train_groups: int = 30
    train_fraction: float = 0.6
    split_seed: int = 0
    split_train_file: str = ""
    split_test_file: str = ""
    norm_scope: str = "global"
    # runs
    seeds: list = field(default_factory=lambda: [0])
    eval_episodes: int = 2000
    eval_seed: int = 1000
    workers: int = 1
    checkpoint_every_epoch: bool = False

    # -- derived -----------------------------------------------------------

    @property
    def head_kind(self) -> HeadKind:
        return HeadKind(self.head)

    @property
    def resolved_activation(self) -> str:
        if self.activation != "default":
            return self.activation
        return "leaky_relu" if self.head_kind.normal else "relu"

    def embedder_config(self) -> EmbedderConfig:
        return EmbedderConfig(
            in_channels=self.channels,
            in_size=(self.image_size, self.image_size),
            num_blocks=self.blocks,
            channels=self.filters,
            kernel=self.kernel,
            activation=self.resolved_activation,
            leaky_alpha=self.leaky_alpha,
            order=self.order,
            bn_eps=self.bn_eps,
            bn_momentum=self.bn_momentum,
        )

    # -- validation ----------------------------------------------------------

    def validate(self) -> None:
        if self.head not in HEAD_KINDS:
            raise ConfigError(f"head: expected one of {HEAD_KINDS}, "
                              f"got {self.head!r}")
        if self.activation not in ("default", "relu", "leaky_relu"):
            raise ConfigError(f"activation: got {self.activation!r}")
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset: expected one of {DATASETS}, "
                              f"got {self.dataset!r}")
        if self.split not in SPLITS:
            raise ConfigError(f"split: expected one of {SPLITS}, "
                              f"got {self.split!r}")
        if self.null_sigma not in ("fixed", "trainable"):
            raise ConfigError(f"null_sigma: got {self.null_sigma!r}")
        if self.matching_metric not in ("sqeuclid", "cosine"):
            raise ConfigError(f"matching_metric: got {self.matching_metric!r}")
        if self.norm_scope not in ("global", "per-image"):
            raise ConfigError(f"norm_scope: got {self.norm_scope!r}")
        if self.shots < 1:
            raise ConfigError(f"shots: must be >= 1, got {self.shots}")
        if self.head_kind.normal and self.shots < self.k_min:
            raise ConfigError(
                f"shots: Gaussian heads need >= {self.k_min} supports to fit "
                f"a standard deviation, got {self.shots}"
            )
        for name in ("episodes_per_epoch", "epochs", "eval_episodes",
                     "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        if self.lr < 0 or self.temperature <= 0 or self.sigma_floor <= 0:
            raise ConfigError("lr must be >= 0; temperature and sigma_floor "
                              "must be > 0")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed required")
        if any(s < 0 for s in self.seeds) or self.eval_seed < 0:
            raise ConfigError("seeds: must be non-negative")
        if self.dataset == "image_tree" and not self.data_root:
            raise ConfigError("data_root: required for dataset = image_tree")
        if self.dataset == "idx" and not (self.idx_images and self.idx_labels):
            raise ConfigError("idx_images/idx_labels: required for dataset = idx")
        if self.split == "file" and not (self.split_train_file
                                         and self.split_test_file):
            raise ConfigError("split_train_file/split_test_file: required "
                              "for split = file")
        self.embedder_config().validate()

    # -- key = value text ----------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **kw) -> "RunConfig":
        d = asdict(self)
        d.update(kw)
        return RunConfig(**d)


def _coerce(name: str, kind, raw: str):
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is list:
            return [int(x) for x in raw.split(",") if x.strip()]
        return raw
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from exc


def _field_types() -> dict:
    types = {}
    for f in fields(RunConfig):
        types[f.name] = list if f.name == "seeds" else type(f.default)
    return types


VALID_KEYS = tuple(f.name for f in fields(RunConfig))


def parse_assignments(pairs, base: RunConfig = None) -> RunConfig:
    """Apply ``key = value`` assignments on top of ``base`` (or defaults)."""
    cfg = base if base is not None else RunConfig()
    types = _field_types()
    updates = {}
    for name, raw in pairs:
        if name not in VALID_KEYS:
            raise ConfigError(
                f"unknown key {name!r}; valid keys: {', '.join(VALID_KEYS)}"
            )
        updates[name] = _coerce(name, types[name], raw)
    return cfg.replace(**updates)


def parse_config_text(text: str, base: RunConfig = None) -> RunConfig:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', "
                              f"got {line.strip()!r}")
        key, _, value = stripped.partition("=")
        pairs.append((key.strip(), value))
    return parse_assignments(pairs, base)


def load_config_file(path, base: RunConfig = None) -> RunConfig:
    from pathlib import Path
    return parse_config_text(Path(path).read_text(encoding="utf-8"), base)
