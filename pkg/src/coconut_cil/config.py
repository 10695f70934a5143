"""Dataclass configs. Every field doubles as a config-file key and a CLI flag."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

STRATEGIES = ("finetune", "er", "akd", "tkd", "skd", "coconut", "coconut+skd")
NSPT_VARIANTS = ("NSPT", "NTPT", "NSPT-AA", "NSPT-AN")


@dataclass
class CorpusSpec:
    num_intents: int = 30
    samples_per_intent: list[int] | None = None  # None: log-uniform draw in [min, max]
    min_samples: int = 40
    max_samples: int = 120
    num_words: int = 30
    min_slots: int = 2
    max_slots: int = 4
    options_per_slot: int = 2
    d_in: int = 16
    frames_per_word: int = 4
    noise_std: float = 0.3
    test_fraction: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.num_intents < 2:
            raise ValueError("num_intents must be >= 2")
        if self.samples_per_intent is not None:
            if len(self.samples_per_intent) != self.num_intents:
                raise ValueError("samples_per_intent length != num_intents")
            if min(self.samples_per_intent) < 2:
                raise ValueError("every intent needs >= 2 samples")
        elif self.min_samples < 2 or self.max_samples < self.min_samples:
            raise ValueError("bad sample-count range")
        if not 1 <= self.min_slots <= self.max_slots:
            raise ValueError("bad slot range")
        if self.options_per_slot < 1 or self.options_per_slot > self.num_words:
            raise ValueError("bad options_per_slot")
        if self.d_in < 1 or self.frames_per_word < 1 or self.noise_std < 0:
            raise ValueError("bad feature geometry")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must be in (0, 1)")


@dataclass
class ModelConfig:
    d_in: int = 16
    d_audio: int = 32
    d_text: int = 32
    d_shared: int = 16
    max_frames: int = 64
    max_steps: int = 16
    init_seed: int = 0


@dataclass
class LossConfig:
    tau: float = 0.1
    learnable_tau: bool = False
    tau_init: float = 0.07
    lambda_mm: float = 0.1
    nspt_variant: str = "NSPT"
    mm_use_cls_only: bool = True
    mm_exclude_rehearsal_anchors: bool = True
    include_self_in_denominator: bool = True
    lambda_kd: float = 1.0

    def validate(self) -> None:
        if self.tau <= 0 or self.tau_init <= 0:
            raise ValueError("temperature must be positive")
        if self.nspt_variant not in NSPT_VARIANTS:
            raise ValueError(f"unknown NSPT variant {self.nspt_variant!r}")


@dataclass
class StrategyConfig:
    strategy: str = "coconut"
    selection: str = "herding"
    exemplars_per_class: int | None = 8
    buffer_fraction: float | None = None
    mix_ratio: float = 0.25
    batch_size: int = 32
    epochs_first: int = 40
    epochs_rest: int = 30
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 0.1
    beam_width: int = 3
    spec_aug: bool = True
    num_tasks: int = 6
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.selection not in ("random", "herding"):
            raise ValueError(f"unknown selection {self.selection!r}")
        if not 0 <= self.mix_ratio < 1:
            raise ValueError("mix_ratio must be in [0, 1)")
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        self.loss.validate()

    @property
    def uses_buffer(self) -> bool:
        return self.strategy != "finetune"

    @property
    def uses_skd(self) -> bool:
        return self.strategy in ("skd", "coconut+skd")

    @property
    def uses_coconut(self) -> bool:
        return self.strategy in ("coconut", "coconut+skd")


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def strategy_from_dict(d: dict) -> StrategyConfig:
    d = dict(d)
    loss = LossConfig(**d.pop("loss", {}))
    model = ModelConfig(**d.pop("model", {}))
    return StrategyConfig(loss=loss, model=model, **d)


def config_hash(cfg) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
