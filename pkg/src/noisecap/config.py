"""Run configuration: nested dataclasses, JSON round-trip, flat overrides.

A RunConfig fully determines an experiment together with its seed. The
CLI accepts `--set section.key=value` overrides (values parsed as JSON
literals with a plain-string fallback); flags win over the config file.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields


class ConfigError(ValueError):
    pass


@dataclass
class WorldSettings:
    n_train_scenes: int = 160
    n_val_scenes: int = 20
    n_test_scenes: int = 40
    captions_per_scene: int = 5
    style: str = "neutral"

    @property
    def n_scenes(self):
        return self.n_train_scenes + self.n_val_scenes + self.n_test_scenes

    @property
    def split_counts(self):
        return (self.n_train_scenes, self.n_val_scenes, self.n_test_scenes)


@dataclass
class EncoderSettings:
    dim: int = 64
    salt_scale: float = 0.15
    canonical_captions: int = 5


@dataclass
class GapSettings:
    offset_linf: float = 0.18
    rotation_strength: float = 0.35
    per_sample_jitter_std: float = 0.03
    renormalize: bool = True


@dataclass
class ModelSettings:
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    prefix_len: int = 8
    max_seq_len: int = 26
    mapper: str = "mlp"
    mapper_hidden: int = 128
    mapper_layers: int = 2
    mapper_activation: str = "gelu"
    init_std: float = 0.02


@dataclass
class NoiseSettings:
    source: str = "estimated"  # "estimated" | "fixed"
    epsilon: float = 0.0  # used when source == "fixed"
    rng_stream: int = 0
    estimation_groups: int = 15


@dataclass
class TrainSettings:
    steps: int = 2400
    batch_size: int = 24
    lr: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 0.01
    val_every: int = 300
    early_stop_patience: int = 0


@dataclass
class DecodeSettings:
    strategy: str = "beam"
    beam_width: int = 5
    max_length: int = 26
    length_norm: float = 0.7


@dataclass
class SweepSettings:
    # default grid brackets the text-estimated noise variance
    grid: tuple = (0.0, 0.001, 0.004, 0.016, 0.064, 0.25)
    methods: tuple = ("text_only", "text_reconstruction",
                      "offset_corrected", "supervised_paired")


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    world: WorldSettings = field(default_factory=WorldSettings)
    encoder: EncoderSettings = field(default_factory=EncoderSettings)
    gap: GapSettings = field(default_factory=GapSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    noise: NoiseSettings = field(default_factory=NoiseSettings)
    training: TrainSettings = field(default_factory=TrainSettings)
    decoding: DecodeSettings = field(default_factory=DecodeSettings)
    sweep: SweepSettings = field(default_factory=SweepSettings)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        cfg = cls()
        known = {f.name: f for f in fields(cls)}
        for key, value in data.items():
            if key not in known:
                raise ConfigError(f"unknown config section {key!r}")
            current = getattr(cfg, key)
            if dataclasses.is_dataclass(current):
                sub_fields = {f.name: f for f in fields(current)}
                for k, v in value.items():
                    if k not in sub_fields:
                        raise ConfigError(f"unknown config key {key}.{k}")
                    if isinstance(getattr(current, k), tuple) and isinstance(v, list):
                        v = tuple(v)
                    setattr(current, k, v)
            else:
                setattr(cfg, key, value)
        return cfg

    def apply_override(self, dotted_key: str, raw_value: str):
        """Apply one `section.key=value` override; values are JSON literals
        with a bare-string fallback."""
        try:
            value = json.loads(raw_value)
        except json.JSONDecodeError:
            value = raw_value
        parts = dotted_key.split(".")
        target = self
        for p in parts[:-1]:
            if not hasattr(target, p):
                raise ConfigError(f"unknown config path {dotted_key!r}")
            target = getattr(target, p)
        leaf = parts[-1]
        if not hasattr(target, leaf):
            raise ConfigError(f"unknown config path {dotted_key!r}")
        if isinstance(getattr(target, leaf), tuple) and isinstance(value, list):
            value = tuple(value)
        setattr(target, leaf, value)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    # a run manifest embeds the resolved config under "config"
    if "config" in data and isinstance(data["config"], dict) and "command" in data:
        data = data["config"]
    return RunConfig.from_dict(data)
