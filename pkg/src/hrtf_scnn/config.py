"""Run configuration: defaults, JSON file loading and field-level validation."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

from .data import SynthConfig
from .optim import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    threads: Optional[int] = None
    # dataset
    n_subjects: int = 94
    proportions: List[float] = field(default_factory=lambda: [77, 10, 7])
    dense_points: int = 480
    n_known: int = 120
    n_bins: int = 93
    f_min: float = 172.0
    f_max: float = 16000.0
    gt_order: int = 16
    s0: float = 3.0
    cutoff_min: float = 2.0
    freq_corr: float = 0.08
    envelope_mean: float = -15.0
    envelope_amp: float = 4.0
    envelope_corr: float = 0.3
    # model
    n_map_in: int = 7
    n_conv: int = 16
    n_map_out: int = 16
    width: Optional[int] = None
    bias: bool = True
    relu_last_block: bool = True
    cond_threshold: float = 1e6
    # training
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 14
    max_epochs: int = 700
    patience: int = 50
    loss_region: str = "dense"
    # evaluation
    baseline_order: int = 8
    slice_phi: float = math.pi
    slice_tolerance: float = 0.1
    slice_subject: Optional[int] = None

    def validate(self) -> "RunConfig":
        errors = []

        def need(ok, name, msg):
            if not ok:
                errors.append(f"{name}: {msg}")

        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            kind = _kind(f)
            if value is None:
                need(f.name in _OPTIONAL, f.name, "must not be null")
                continue
            if kind is bool:
                need(isinstance(value, bool), f.name, "must be true or false")
            elif kind is int:
                need(isinstance(value, int) and not isinstance(value, bool), f.name, "must be an integer")
            elif kind is float:
                ok = isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)
                need(ok, f.name, "must be a finite number")
            elif kind is str:
                need(isinstance(value, str), f.name, "must be a string")
        if errors:
            raise ConfigError("invalid config: " + "; ".join(errors))

        need(self.n_subjects >= 3, "n_subjects", "need at least 3 subjects")
        need(isinstance(self.proportions, list) and len(self.proportions) == 3
             and all(isinstance(p, (int, float)) and p > 0 for p in self.proportions),
             "proportions", "must be three positive numbers")
        need(self.dense_points >= 1, "dense_points", "must be >= 1")
        need(1 <= self.n_known <= self.dense_points, "n_known", f"must be in [1, dense_points={self.dense_points}]")
        need(self.n_bins >= 1, "n_bins", "must be >= 1")
        need(0 < self.f_min < self.f_max or self.n_bins == 1, "f_min", "must satisfy 0 < f_min < f_max")
        for name in ("gt_order", "n_map_in", "n_conv", "n_map_out", "baseline_order"):
            need(getattr(self, name) >= 0, name, "must be >= 0")
        need((self.gt_order + 1) ** 2 <= self.dense_points, "gt_order", "dense grid too small for this order")
        need((self.n_map_in + 1) ** 2 <= self.n_known, "n_map_in", f"needs {(self.n_map_in + 1) ** 2} known directions")
        need((self.n_conv + 1) ** 2 <= self.dense_points, "n_conv", "dense grid too small for this order")
        need((self.n_map_out + 1) ** 2 <= self.dense_points, "n_map_out", "dense grid too small for this order")
        need(self.width is None or self.width == self.n_bins, "width",
             f"identity skips need width == n_bins ({self.n_bins})")
        need(self.s0 >= 0 and self.envelope_amp >= 0, "s0", "amplitudes must be >= 0")
        need(self.cutoff_min > 0, "cutoff_min", "must be > 0")
        need(self.freq_corr >= 0 and self.envelope_corr >= 0, "freq_corr", "correlation widths must be >= 0")
        need(self.cond_threshold >= 1, "cond_threshold", "must be >= 1")
        need(self.threads is None or self.threads >= 1, "threads", "must be >= 1")
        need(self.loss_region in ("dense", "unknown"), "loss_region", "must be 'dense' or 'unknown'")
        need(self.slice_tolerance > 0, "slice_tolerance", "must be > 0")
        if errors:
            raise ConfigError("invalid config: " + "; ".join(errors))
        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError(f"invalid config: {exc}") from None
        return self

    def synth_config(self) -> SynthConfig:
        return SynthConfig(self.gt_order, self.s0, self.cutoff_min, self.freq_corr,
                           self.envelope_mean, self.envelope_amp, self.envelope_corr)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.beta1, self.beta2, self.epsilon,
                           self.batch_size, self.max_epochs, self.patience, self.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


_OPTIONAL = {"threads", "width", "slice_subject"}
_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _kind(f):
    t = str(f.type)
    for name, kind in (("bool", bool), ("int", int), ("float", float), ("str", str)):
        if name in t and "List" not in t:
            return kind
    return None


def _coerce(name: str, text: str):
    """Parse a ``--set`` value according to the field's declared type."""
    f = _FIELDS[name]
    kind = _kind(f)
    if text.lower() in ("null", "none") and name in _OPTIONAL:
        return None
    try:
        if kind is bool:
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
        return json.loads(text)
    except ValueError:
        raise ConfigError(f"invalid config: {name}: cannot parse {text!r}") from None


def load_config(path=None, overrides=None) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then ``overrides`` (a dict)."""
    values = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        values.update(data)
    values.update(overrides or {})
    unknown = sorted(set(values) - set(_FIELDS))
    if unknown:
        raise ConfigError("invalid config: unknown field(s) " + ", ".join(unknown))
    return RunConfig(**values).validate()


def parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ConfigError(f"override {pair!r} must look like KEY=VALUE")
        if key not in _FIELDS:
            raise ConfigError(f"invalid config: unknown field {key}")
        out[key] = _coerce(key, value.strip())
    return out
