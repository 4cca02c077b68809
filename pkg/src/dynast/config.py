"""Model/training configuration and the line-oriented config file format."""

from __future__ import annotations

from dataclasses import dataclass, field, fields


class ValidationError(ValueError):
    """Bad configuration or user input; maps to CLI exit code 1."""


@dataclass
class ModelConfig:
    """Architecture hyper-parameters.

    Per-scale lists are ordered coarse -> fine and must double in resolution.
    Internally scale index i counts from the finest (i=0, patch side 2^i) up
    to the coarsest (i = num_scales-1).
    """

    num_scales: int = 3
    resolutions: tuple[int, ...] = (8, 16, 32)
    channels: tuple[int, ...] = (64, 48, 32)
    embed_channels: tuple[int, ...] = (32, 24, 16)
    pos_channels: int = 16
    top_k: int = 4
    smoothness: float = 100.0
    dense_blocks: int = 2
    inner_blocks: int = 1
    semantic_channels: int = 1
    image_channels: int = 3
    # loss weights
    match_loss_weight: float = 100.0
    adv_loss_weight: float = 0.0
    style_loss_weight: float = 3.0
    perceptual_weights: tuple[float, ...] = (1 / 32, 1 / 16, 1 / 8, 1 / 4)
    # ablation flags
    disable_pruning: bool = False
    replace_inner_with_inter: bool = False
    max_matching_resolution: int = 0  # 0 = match at every scale
    # interpretation knobs
    literal_embed_range: bool = False  # drop the finest patch embed from aggregation
    topk_on_pruned: bool = False  # candidate selection reads the pruned map
    share_prune_heads: bool = False
    prune_dense_blocks: bool = False
    prune_bias_init: float = 0.5

    def __post_init__(self):
        self.resolutions = tuple(int(r) for r in self.resolutions)
        self.channels = tuple(int(c) for c in self.channels)
        self.embed_channels = tuple(int(c) for c in self.embed_channels)
        self.perceptual_weights = tuple(float(w) for w in self.perceptual_weights)
        self.validate()

    def validate(self):
        m = self.num_scales
        if m < 1:
            raise ValidationError(f"num_scales must be >= 1, got {m}")
        for name in ("resolutions", "channels", "embed_channels"):
            vals = getattr(self, name)
            if len(vals) != m:
                raise ValidationError(f"{name} needs {m} entries, got {len(vals)}")
        for a, b in zip(self.resolutions, self.resolutions[1:]):
            if b != 2 * a:
                raise ValidationError(
                    f"resolutions must double coarse->fine, got {self.resolutions}"
                )
        if self.top_k < 1:
            raise ValidationError(f"top_k must be >= 1, got {self.top_k}")
        if self.smoothness <= 0:
            raise ValidationError(f"smoothness must be positive, got {self.smoothness}")
        if self.dense_blocks < 1 or self.inner_blocks < 0:
            raise ValidationError("need >=1 dense block and >=0 inner blocks")

    # per-scale accessors in paper order: scale 0 = finest, M-1 = coarsest
    def resolution(self, scale: int) -> int:
        return self.resolutions[self.num_scales - 1 - scale]

    def width(self, scale: int) -> int:
        return self.channels[self.num_scales - 1 - scale]

    def embed_width(self, scale: int) -> int:
        return self.embed_channels[self.num_scales - 1 - scale]

    @property
    def finest_resolution(self) -> int:
        return self.resolutions[-1]

    def matching_enabled(self, scale: int) -> bool:
        if self.max_matching_resolution <= 0:
            return True
        return self.resolution(scale) <= self.max_matching_resolution

    def blocks_at(self, scale: int) -> int:
        if scale == self.num_scales - 1:
            return self.dense_blocks
        return 1 + self.inner_blocks


@dataclass
class TrainSettings:
    seed: int = 0
    learning_rate: float = 1e-3
    batch_size: int = 4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    extractor_seed: int = 12345


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSettings = field(default_factory=TrainSettings)


def paper_scale_config() -> ModelConfig:
    """The full-scale published operating point (not trainable at desk scale)."""
    return ModelConfig(
        num_scales=4,
        resolutions=(32, 64, 128, 256),
        channels=(512, 256, 128, 64),
        embed_channels=(256, 128, 64, 32),
        smoothness=100.0,
        top_k=4,
        match_loss_weight=100.0,
        adv_loss_weight=10.0,
    )


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _parse_value(raw: str, kind, key: str):
    raw = raw.strip()
    if kind is bool:
        if raw.lower() not in _BOOL_WORDS:
            raise ValidationError(f"config key {key}: expected boolean, got {raw!r}")
        return _BOOL_WORDS[raw.lower()]
    if kind is int:
        try:
            return int(raw)
        except ValueError:
            raise ValidationError(f"config key {key}: expected int, got {raw!r}") from None
    if kind is float:
        try:
            return float(raw)
        except ValueError:
            raise ValidationError(f"config key {key}: expected float, got {raw!r}") from None
    # tuple-valued fields: comma separated
    parts = [p for p in raw.split(",") if p.strip()]
    elem = float if "perceptual" in key else int
    try:
        return tuple(elem(p) for p in parts)
    except ValueError:
        raise ValidationError(f"config key {key}: bad list {raw!r}") from None


def _field_kinds(cls) -> dict:
    kinds = {}
    for f in fields(cls):
        if f.type in ("int", int):
            kinds[f.name] = int
        elif f.type in ("float", float):
            kinds[f.name] = float
        elif f.type in ("bool", bool):
            kinds[f.name] = bool
        else:
            kinds[f.name] = tuple
    return kinds


_MODEL_KINDS = _field_kinds(ModelConfig)
_TRAIN_KINDS = _field_kinds(TrainSettings)


def parse_config(text: str) -> Config:
    """Parse `key = value` lines; blank lines and '#' comments allowed."""
    model_kwargs: dict = {}
    train_kwargs: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValidationError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key in _MODEL_KINDS:
            model_kwargs[key] = _parse_value(raw, _MODEL_KINDS[key], key)
        elif key in _TRAIN_KINDS:
            train_kwargs[key] = _parse_value(raw, _TRAIN_KINDS[key], key)
        else:
            raise ValidationError(f"config line {lineno}: unknown key {key!r}")
    try:
        model = ModelConfig(**model_kwargs)
    except ValidationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from None
    return Config(model=model, train=TrainSettings(**train_kwargs))


def load_config(path) -> Config:
    try:
        with open(path, "r", encoding="ascii") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from None


def serialize_config(cfg: Config) -> str:
    """Stable key=value text; round-trips through parse_config."""
    lines = []
    for section in (cfg.model, cfg.train):
        for f in fields(section):
            val = getattr(section, f.name)
            if isinstance(val, tuple):
                rendered = ",".join(repr(v) if isinstance(v, float) else str(v) for v in val)
            elif isinstance(val, bool):
                rendered = "true" if val else "false"
            elif isinstance(val, float):
                rendered = repr(val)
            else:
                rendered = str(val)
            lines.append(f"{f.name} = {rendered}")
    return "\n".join(lines) + "\n"
