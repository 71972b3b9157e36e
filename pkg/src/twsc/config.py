"""Experiment configuration: typed defaults, a flat key=value file
format, validation, and a stable hash used to stamp checkpoints.

The file format is one ``key = value`` pair per line, ``#`` comments,
blank lines allowed. List values are comma separated. Unknown keys and
malformed lines are rejected with the offending line number so config
drift fails loudly instead of silently training the wrong thing.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass

from .errors import ConfigParseError, ValidationError

CHANNEL_KINDS = ("awgn", "rayleigh")
SYSTEM_KINDS = ("twsc", "jscc", "gansc")
LOSS_MODES = ("standard_hinge", "paper_literal")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a training or evaluation run needs to be reproducible.

    The learning-rate schedule is inverse-time decay,
    ``learning_rate / (1 + lr_decay * step)``, applied per optimizer
    step. ``symbol_count`` is the number of complex channel symbols per
    image and must match what the network architecture produces.
    """

    system_kind: str = "twsc"
    channel_kind: str = "awgn"
    seed: int = 0
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 1e-3
    lr_decay: float = 1e-4
    symbol_count: int = 256
    noise_dim: int = 2
    loss_mode: str = "standard_hinge"
    train_snr_range_db: tuple[float, float] = (0.0, 20.0)
    eval_snr_list_db: tuple[float, ...] = (0.0, 5.0, 10.0, 15.0, 20.0)
    # Artifact plumbing, not physics: train_subset=0 means the full
    # training split; epoch_eval_images=0 disables per-epoch metrics.
    train_subset: int = 0
    epoch_eval_images: int = 1000
    epoch_eval_snr_db: float = 10.0

    def validate(self) -> None:
        if self.system_kind not in SYSTEM_KINDS:
            raise ValidationError(
                f"system_kind must be one of {SYSTEM_KINDS}, got {self.system_kind!r}")
        if self.channel_kind not in CHANNEL_KINDS:
            raise ValidationError(
                f"channel_kind must be one of {CHANNEL_KINDS}, got {self.channel_kind!r}")
        if self.loss_mode not in LOSS_MODES:
            raise ValidationError(
                f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if not self.learning_rate > 0:
            raise ValidationError(
                f"learning_rate must be positive, got {self.learning_rate}")
        if self.lr_decay < 0:
            raise ValidationError(f"lr_decay must be >= 0, got {self.lr_decay}")
        for field, minimum in (("epochs", 1), ("batch_size", 1),
                               ("symbol_count", 1), ("noise_dim", 1)):
            value = getattr(self, field)
            if not isinstance(value, int) or value < minimum:
                raise ValidationError(
                    f"{field} must be an integer >= {minimum}, got {value}")
        if self.train_subset < 0:
            raise ValidationError(
                f"train_subset must be >= 0, got {self.train_subset}")
        if self.epoch_eval_images < 0:
            raise ValidationError(
                f"epoch_eval_images must be >= 0, got {self.epoch_eval_images}")
        lo, hi = self.train_snr_range_db
        if not (lo <= hi):
            raise ValidationError(
                f"train_snr_range_db must be (low, high) with low <= high, got {lo}, {hi}")
        if len(self.eval_snr_list_db) == 0:
            raise ValidationError("eval_snr_list_db must not be empty")

    def replace(self, **changes) -> "ExperimentConfig":
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["train_snr_range_db"] = list(self.train_snr_range_db)
        out["eval_snr_list_db"] = list(self.eval_snr_list_db)
        return out


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}

_FLOAT_LIST_FIELDS = {"eval_snr_list_db", "train_snr_range_db"}
_INT_FIELDS = {"seed", "epochs", "batch_size", "symbol_count", "noise_dim",
               "train_subset", "epoch_eval_images"}
_FLOAT_FIELDS = {"learning_rate", "lr_decay", "epoch_eval_snr_db"}
_STR_FIELDS = {"system_kind", "channel_kind", "loss_mode"}


def _coerce(key: str, raw: str, lineno: int):
    try:
        if key in _INT_FIELDS:
            return int(raw)
        if key in _FLOAT_FIELDS:
            return float(raw)
        if key in _FLOAT_LIST_FIELDS:
            return tuple(float(part) for part in raw.split(",") if part.strip())
        return raw
    except ValueError as exc:
        raise ConfigParseError(
            f"line {lineno}: cannot parse value {raw!r} for key {key!r}: {exc}") from exc


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigParseError(
                f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _FIELD_TYPES:
            raise ConfigParseError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigParseError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, raw, lineno)
    cfg = dataclasses.replace(base or ExperimentConfig(), **values)
    cfg.validate()
    return cfg


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read(), base=base)


def format_config(cfg: ExperimentConfig) -> str:
    """Render a config as the flat file format, one key per line."""
    lines = []
    for field in dataclasses.fields(ExperimentConfig):
        value = getattr(cfg, field.name)
        if field.name in _FLOAT_LIST_FIELDS:
            rendered = ",".join(repr(v) for v in value)
        else:
            rendered = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{field.name} = {rendered}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    """Stable short hash of the full config, stamped into checkpoints."""
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
