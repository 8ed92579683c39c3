"""Training configuration, presets and the ``key = value`` config file format.

Config files are flat: every key names a field of the training, model, loss
or augmentation settings. Unknown keys are errors. ``#`` starts a comment.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from saim.imageio import AugmentConfig
from saim.model import ModelConfig
from saim.objective import LossConfig, LossKind

ORDERS = ("stochastic", "raster")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    base_lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.05
    batch_size: int = 16
    warmup_steps: int = 20
    total_steps: int = 300
    seed: int = 0
    order: str = "stochastic"
    # "synthetic" or a path to a raw batch file
    data: str = "synthetic"
    n_images: int = 800
    data_seed: int = 0
    checkpoint_every: int = 100
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError("need 0 <= warmup_steps <= total_steps")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if self.order not in ORDERS:
            raise ConfigError(f"order must be one of {ORDERS}")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["model"] = dataclasses.asdict(self.model)
        d["loss"] = {
            "kind": self.loss.kind.value,
            "smoothing": None if self.loss.smoothing is None else list(self.loss.smoothing),
        }
        aug = dataclasses.asdict(self.augment)
        aug["mean"], aug["std"] = list(aug["mean"]), list(aug["std"])
        d["augment"] = aug
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = ModelConfig(**d.pop("model"))
        lraw = d.pop("loss")
        smoothing = None if lraw["smoothing"] is None else tuple(lraw["smoothing"])
        loss = LossConfig(LossKind(lraw["kind"]), smoothing)
        araw = dict(d.pop("augment"))
        araw["mean"], araw["std"] = tuple(araw["mean"]), tuple(araw["std"])
        return cls(model=model, loss=loss, augment=AugmentConfig(**araw), **d)


def toy_config(**overrides) -> TrainConfig:
    """Desk-scale preset: 32x32 synthetic images, 64 tokens, D=64, M=2."""
    base = dict(base_lr=1e-3, batch_size=16, warmup_steps=20, total_steps=300)
    base.update(overrides)
    return TrainConfig(**base)


def vit_base_config() -> TrainConfig:
    """ViT-B pretraining hyperparameters, for reference; not runnable at desk scale.

    Epoch counts are converted at 1.28M images / 2048 per batch = 625 steps.
    """
    steps_per_epoch = 625
    return TrainConfig(
        base_lr=2e-4,
        beta1=0.9,
        beta2=0.95,
        weight_decay=0.05,
        batch_size=2048,
        warmup_steps=30 * steps_per_epoch,
        total_steps=300 * steps_per_epoch,
        data="imagenet-1k",
        model=ModelConfig(
            image_size=224, patch_size=16, in_chans=3, embed_dim=768, depth=12, n_heads=12
        ),
        loss=LossConfig(LossKind.MSE_NORM_PIXEL, (9, 1.0)),
    )


# -- flat key = value files ---------------------------------------------------

_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"model", "loss", "augment"}
_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
_AUG_KEYS = {f.name for f in dataclasses.fields(AugmentConfig)}
_LOSS_KEYS = {"loss", "kernel_size", "sigma"}


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _coerce(value: str, like):
    if isinstance(like, bool):
        return _parse_bool(value)
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(float(v) for v in value.replace(",", " ").split())
    return value


def _optional_int(value: str) -> int | None:
    return None if value.lower() in ("none", "") else int(value)


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    d = (base or toy_config()).to_dict()
    model, aug, loss = d["model"], d["augment"], d["loss"]
    smoothing = loss["smoothing"]
    ksize = 0 if smoothing is None else smoothing[0]
    sigma = 1.0 if smoothing is None else smoothing[1]
    defaults_model = ModelConfig()
    defaults_aug = AugmentConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key in _TRAIN_KEYS:
                d[key] = _coerce(value, getattr(TrainConfig(), key))
            elif key in ("head_hidden_dim", "decoder_depth"):
                model[key] = _optional_int(value)
            elif key in _MODEL_KEYS:
                model[key] = _coerce(value, getattr(defaults_model, key))
            elif key in _AUG_KEYS:
                aug[key] = list(_coerce(value, getattr(defaults_aug, key))) if key in (
                    "mean",
                    "std",
                ) else _coerce(value, getattr(defaults_aug, key))
            elif key == "loss":
                loss["kind"] = LossKind(value).value
            elif key == "kernel_size":
                ksize = int(value)
            elif key == "sigma":
                sigma = float(value)
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {e}") from e
    loss["smoothing"] = None if ksize == 0 else [ksize, sigma]
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), base)


def dump_config(cfg: TrainConfig) -> str:
    """Serialize to the flat file format; ``parse_config`` inverts it."""
    d = cfg.to_dict()
    lines = []
    for k in sorted(_TRAIN_KEYS):
        lines.append(f"{k} = {d[k]}")
    for k, v in sorted(d["model"].items()):
        lines.append(f"{k} = {'none' if v is None else v}")
    for k, v in sorted(d["augment"].items()):
        lines.append(f"{k} = {' '.join(repr(x) for x in v) if isinstance(v, list) else v}")
    lines.append(f"loss = {d['loss']['kind']}")
    sm = d["loss"]["smoothing"]
    lines.append(f"kernel_size = {0 if sm is None else sm[0]}")
    lines.append(f"sigma = {1.0 if sm is None else sm[1]}")
    return "\n".join(lines) + "\n"
