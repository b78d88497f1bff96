"""Flat run configuration shared by every CLI subcommand.

The on-disk form is a flat YAML mapping. Resolution order is command-line
flags, then the ``BYOLA_SEED`` environment variable (seed only), then the
file, then the defaults below.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from . import augment as aug
from . import frontend
from .byol import TrainConfig
from .encoder import EncoderConfig
from .errors import ContractViolation
from .evaluation import ProbeConfig


@dataclass
class RunConfig:
    seed: int = 42
    deterministic: bool = True
    # front end
    sample_rate: int = frontend.SAMPLE_RATE
    n_fft: int = frontend.N_FFT
    hop: int = frontend.HOP
    n_mels: int = frontend.N_MELS
    f_min: float = frontend.F_MIN
    f_max: float = frontend.F_MAX
    log_floor: float = frontend.LOG_FLOOR
    mel_norm: str = "slaney"
    unit_frames: int = frontend.UNIT_FRAMES
    # augmentation
    aug_blocks: str = "mixup,rrc,rlf"
    aug_alpha: float = 0.2
    aug_queue_size: int = 2048
    aug_noise_std: float = 0.4
    rrc_freq_min: float = 0.6
    rrc_freq_max: float = 1.5
    rrc_time_min: float = 0.6
    rrc_time_max: float = 1.5
    rrc_virtual_time_scale: float = 1.5
    # encoder
    enc_reshaping: str = "full"
    enc_use_mlp: bool = True
    enc_use_concat: bool = True
    enc_pooling: str = "mean_max"
    enc_conv_blocks: int = 2
    enc_channels: int = 64
    enc_mlp_hidden: int = 2048
    enc_dropout: float = 0.3
    # BYOL training
    lr: float = 1e-4
    tau: float = 0.99
    batch_size: int = 256
    epochs: int = 100
    max_steps: int = 0
    proj_hidden: int = 4096
    proj_dim: int = 256
    # linear evaluation
    duration: float | None = None
    probe_max_epochs: int = 200
    probe_patience: int = 20
    probe_lr: float | None = None
    probe_runs: int = 3
    probe_task: str = "multiclass"
    probe_batch_size: int = 0
    # reporting
    figures: bool = True

    def frontend(self) -> frontend.FrontendConfig:
        return frontend.FrontendConfig(self.sample_rate, self.n_fft, self.hop, self.n_mels,
                                       self.f_min, self.f_max, self.log_floor, self.mel_norm)

    def augment(self) -> aug.AugmentConfig:
        return aug.AugmentConfig(
            blocks=aug.parse_chain(self.aug_blocks), mixup_alpha=self.aug_alpha,
            queue_size=self.aug_queue_size, noise_std=self.aug_noise_std,
            rrc=aug.RRCConfig((self.rrc_freq_min, self.rrc_freq_max),
                              (self.rrc_time_min, self.rrc_time_max),
                              self.rrc_virtual_time_scale))

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.enc_reshaping, self.enc_use_mlp, self.enc_use_concat,
                             self.enc_pooling, self.enc_conv_blocks, self.enc_channels,
                             self.enc_mlp_hidden, self.enc_dropout, self.n_mels)

    def train(self) -> TrainConfig:
        return TrainConfig(self.lr, self.tau, self.batch_size, self.epochs, self.max_steps,
                           self.proj_hidden, self.proj_dim, self.unit_frames, self.seed)

    def probe(self) -> ProbeConfig:
        return ProbeConfig(self.probe_max_epochs, self.probe_patience, self.probe_lr,
                           self.probe_runs, self.probe_task, self.probe_batch_size, self.seed)

    def to_text(self) -> str:
        return yaml.safe_dump(dataclasses.asdict(self), sort_keys=False)


def _coerce(name: str, value, kind):
    if value is None:
        return None
    target = {"int": int, "float": float, "bool": bool, "str": str}
    for key, cast in target.items():
        if key in str(kind):
            if cast is bool and not isinstance(value, bool):
                raise ContractViolation(f"config key {name!r} expects true/false, got {value!r}")
            if cast is int and isinstance(value, float) and not value.is_integer():
                raise ContractViolation(f"config key {name!r} expects an integer, got {value!r}")
            try:
                return cast(value)
            except (TypeError, ValueError) as exc:
                raise ContractViolation(f"config key {name!r}: {exc}") from exc
    return value


def apply_overrides(cfg: RunConfig, values: dict) -> RunConfig:
    known = {f.name: f for f in fields(RunConfig)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ContractViolation(f"unknown config keys: {', '.join(unknown)}")
    updates = {k: _coerce(k, v, known[k].type) for k, v in values.items()}
    cfg = dataclasses.replace(cfg, **updates)
    # Validate by building every derived config once.
    cfg.frontend(), cfg.augment(), cfg.encoder(), cfg.train(), cfg.probe()
    return cfg


def load_config(path=None, overrides: dict | None = None, env=None) -> RunConfig:
    env = os.environ if env is None else env
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        try:
            doc = yaml.safe_load(path.read_text()) or {}
        except FileNotFoundError as exc:
            raise ContractViolation(f"config file not found: {path}") from exc
        if not isinstance(doc, dict) or any(isinstance(v, (dict, list)) for v in doc.values()):
            raise ContractViolation(f"{path}: config must be a flat key-value mapping")
        cfg = apply_overrides(cfg, doc)
    if env.get("BYOLA_SEED"):
        cfg = apply_overrides(cfg, {"seed": int(env["BYOLA_SEED"])})
    if overrides:
        cfg = apply_overrides(cfg, {k: v for k, v in overrides.items() if v is not None})
    return cfg
