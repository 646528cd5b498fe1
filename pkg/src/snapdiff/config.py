"""Run configuration: profiles, validation, per-stage seed derivation."""

import dataclasses
import hashlib
import json
from dataclasses import dataclass


class ConfigError(ValueError):
    """Raised for unknown keys or inconsistent dimensions. Maps to exit code 2."""


@dataclass
class Config:
    # corpus
    canvas: int = 32
    n_concepts: int = 30
    n_train: int = 21
    images_per_concept: int = 32
    # text / tokenizer
    max_len: int = 16
    d_tok: int = 64
    n_text_layers: int = 2
    n_heads: int = 4
    d_img_out: int = 64
    d_txt_out: int = 64
    # contrastive pretraining
    enc_epochs: int = 400
    enc_batch: int = 32
    enc_lr: float = 1e-3
    temperature_init: float = 0.07
    # diffusion
    timesteps: int = 400
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    unet_width: int = 32
    base_epochs: int = 150
    base_lr: float = 2e-4
    base_batch: int = 32
    cond_dropout: float = 0.1
    # textual inversion bank
    ti_steps: int = 300
    ti_lr: float = 5e-3
    ti_images_per_concept: int = 4
    # extractor MLP
    mlp_hidden: int = 128
    mlp_lr: float = 1e-3
    mlp_batch: int = 32
    mlp_epochs: int = 200
    mse_coef: float = 1.0
    ce_coef: float = 1.0
    residual: bool = True
    # cross-attention fine-tuning
    ft_epochs: int = 20
    ft_lr: float = 1e-4
    ft_mode: str = "xattn"  # xattn | whole | kv
    # sampling
    ddim_steps: int = 50
    guidance_scale: float = 10.0
    # timing benchmark: step count for the per-image optimization baseline
    bench_ti_steps: int = 5000
    # global
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        checks = [
            (self.canvas >= 8 and self.canvas % 4 == 0, "canvas must be >=8 and divisible by 4"),
            (0 <= self.n_train <= self.n_concepts, "n_train must be in [0, n_concepts]"),
            (0 < self.beta_start < self.beta_end < 1, "need 0 < beta_start < beta_end < 1"),
            (self.ddim_steps <= self.timesteps, "ddim_steps must not exceed timesteps"),
            (self.d_tok % self.n_heads == 0, "d_tok must be divisible by n_heads"),
            (self.ti_images_per_concept <= self.images_per_concept,
             "ti_images_per_concept must not exceed images_per_concept"),
            (self.ft_mode in ("xattn", "whole", "kv"), "ft_mode must be xattn, whole or kv"),
            (0 <= self.cond_dropout < 1, "cond_dropout must be in [0, 1)"),
            (self.max_len >= 8, "max_len must be at least 8"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def fused_dim(self):
        return self.d_img_out + self.d_txt_out

    def to_dict(self):
        return dataclasses.asdict(self)

    def content_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def stage_seed(self, stage):
        """Decorrelated per-stage seed derived from the root seed."""
        h = hashlib.sha256(f"{self.seed}:{stage}".encode()).digest()
        return int.from_bytes(h[:4], "big")


# Paper-scale hyperparameters, kept runnable as a config even though training
# them from scratch on the toy corpus is not the point.
PAPER_OVERRIDES = {
    "d_tok": 1280,
    "d_img_out": 512,
    "d_txt_out": 512,
    "mlp_hidden": 1000,
    "n_heads": 8,
    "timesteps": 1000,
    "n_concepts": 101,
    "n_train": 71,
    "ft_lr": 1e-5,
    "bench_ti_steps": 5000,
}

PROFILES = {
    "desk": {},
    "paper": PAPER_OVERRIDES,
}

_VALID_KEYS = {f.name for f in dataclasses.fields(Config)}


def make_config(profile="desk", **overrides):
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile: {profile!r}")
    merged = dict(PROFILES[profile])
    merged.update(overrides)
    unknown = set(merged) - _VALID_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return Config(**merged)


def validate_config(path):
    """Load a JSON config file ({"profile": ..., other overrides}) and normalize it."""
    with open(path) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    profile = raw.pop("profile", "desk")
    return make_config(profile, **raw)
