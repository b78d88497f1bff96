"""Audio encoder: conv blocks, reshaping, MLP, concat and temporal pooling.

With the default configuration an input ``[B, 1, 64, 96]`` passes through::

    Conv1      [B, 64, 32, 48]
    Conv2      [B, 64, 16, 24]
    Reshaping  [B, 24, 1024]
    MLP        [B, 24, 2048]
    Concat     [B, 24, 3072]
    Pooling    [B, 3072]
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, replace

import numpy as np

from . import nn
from . import tensor as T
from .errors import ContractViolation
from .tensor import Tensor

RESHAPING_MODES = ("full", "freq_mean", "channel_mean")
POOLING_MODES = ("mean_max", "mean", "max")


@dataclass(frozen=True)
class EncoderConfig:
    reshaping_mode: str = "full"
    use_mlp: bool = True
    use_concat: bool = True
    temporal_pooling: str = "mean_max"
    conv_blocks: int = 2
    channels: int = 64
    mlp_hidden: int = 2048
    dropout_p: float = 0.3
    n_mels: int = 64

    def __post_init__(self):
        if self.reshaping_mode not in RESHAPING_MODES:
            raise ContractViolation(f"reshaping_mode must be one of {RESHAPING_MODES}")
        if self.temporal_pooling not in POOLING_MODES:
            raise ContractViolation(f"temporal_pooling must be one of {POOLING_MODES}")
        if not (self.use_mlp or self.use_concat):
            raise ContractViolation("at least one of the MLP or local feature paths must feed pooling")
        if self.conv_blocks < 1 or self.n_mels % (2 ** self.conv_blocks):
            raise ContractViolation(
                f"{self.conv_blocks} conv blocks do not divide {self.n_mels} mel bins evenly")

    @property
    def out_freq(self) -> int:
        return self.n_mels // 2 ** self.conv_blocks

    @property
    def local_dim(self) -> int:
        return {"full": self.channels * self.out_freq,
                "freq_mean": self.channels,
                "channel_mean": self.out_freq}[self.reshaping_mode]

    @property
    def embedding_dim(self) -> int:
        if not self.use_mlp:
            return self.local_dim
        if not self.use_concat:
            return self.mlp_hidden
        return self.local_dim + self.mlp_hidden


# Rows (1)-(7) of the global-pooling ablation.
ABLATIONS = {
    "base": EncoderConfig(),
    "freq_mean": EncoderConfig(reshaping_mode="freq_mean"),
    "channel_mean": EncoderConfig(reshaping_mode="channel_mean"),
    "global_only": EncoderConfig(use_concat=False),
    "local_only": EncoderConfig(use_mlp=False),
    "mean_pool": EncoderConfig(temporal_pooling="mean"),
    "max_pool": EncoderConfig(temporal_pooling="max"),
}


def pool_temporal(h: Tensor, mode: str = "mean_max") -> Tensor:
    """``[B, T, D] -> [B, D]`` by time mean, time max, or their sum."""
    if h.ndim != 3 or h.shape[1] < 1:
        raise ContractViolation(f"pool_temporal expects [B, T>=1, D], got {h.shape}")
    if mode == "mean":
        return h.mean(axis=1)
    if mode == "max":
        return h.max(axis=1)
    if mode == "mean_max":
        return h.mean(axis=1) + h.max(axis=1)
    raise ContractViolation(f"unknown pooling mode {mode!r}")


class ConvBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, rng)
        self.bn = nn.BatchNorm(out_ch)

    def forward(self, x: Tensor) -> Tensor:
        return T.max_pool2d(self.bn(self.conv(x)).relu())


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig = EncoderConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.convs = [ConvBlock(1 if i == 0 else cfg.channels, cfg.channels, rng)
                      for i in range(cfg.conv_blocks)]
        if cfg.use_mlp:
            self.fc1 = nn.Linear(cfg.local_dim, cfg.mlp_hidden, rng)
            self.dropout = nn.Dropout(cfg.dropout_p, seed=seed + 1)
            self.fc2 = nn.Linear(cfg.mlp_hidden, cfg.mlp_hidden, rng)

    def children(self):
        for i, block in enumerate(self.convs):
            yield f"conv{i + 1}", block
        if self.cfg.use_mlp:
            yield "fc1", self.fc1
            yield "dropout", self.dropout
            yield "fc2", self.fc2

    def stages(self, x: Tensor) -> dict:
        """Every intermediate output keyed by block name."""
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != cfg.n_mels:
            raise ContractViolation(f"encoder expects [B, 1, {cfg.n_mels}, T], got {x.shape}")
        if x.shape[3] < 2 ** cfg.conv_blocks:
            raise ContractViolation(
                f"{x.shape[3]} frames cannot survive {cfg.conv_blocks} 2x2 pools")
        out = {}
        h = x
        for i, block in enumerate(self.convs):
            h = block(h)
            out[f"conv{i + 1}"] = h
        if cfg.reshaping_mode == "freq_mean":
            h = h.mean(axis=2)  # [B, C, T]
        elif cfg.reshaping_mode == "channel_mean":
            h = h.mean(axis=1)  # [B, F, T]
        else:
            B, C, F, Tn = h.shape
            h = h.reshape(B, C * F, Tn)
        local = h.transpose(0, 2, 1)  # [B, T, D]
        out["reshaping"] = local
        feats = local
        if cfg.use_mlp:
            g = self.fc2(self.dropout(self.fc1(local).relu())).relu()
            out["mlp"] = g
            feats = T.concat([local, g], axis=-1) if cfg.use_concat else g
            if cfg.use_concat:
                out["concat"] = feats
        out["pooling"] = pool_temporal(feats, cfg.temporal_pooling)
        return out

    def forward(self, x: Tensor) -> Tensor:
        return self.stages(x)["pooling"]


FEATURE_PATHS = ("concat", "global", "local")


def readout_variant(encoder: Encoder, temporal_pooling: str | None = None,
                    features: str | None = None) -> Encoder:
    """The same trained weights read out under a different pooling ablation.

    ``features`` picks the pooled path: ``concat`` (local + MLP), ``global``
    (MLP only) or ``local`` (reshaping only). Parameters are shared, not copied.
    """
    cfg = encoder.cfg
    updates = {}
    if temporal_pooling is not None:
        updates["temporal_pooling"] = temporal_pooling
    if features is not None:
        if features not in FEATURE_PATHS:
            raise ContractViolation(f"features must be one of {FEATURE_PATHS}, got {features!r}")
        if features != "local" and not cfg.use_mlp:
            raise ContractViolation(f"encoder has no MLP path; cannot read out {features!r} features")
        updates["use_mlp"] = features != "local" and cfg.use_mlp
        updates["use_concat"] = features != "global"
    variant = copy.copy(encoder)
    variant.cfg = replace(cfg, **updates)
    return variant


def encode(x, cfg: EncoderConfig | None = None, mode: str = "eval",
           encoder: Encoder | None = None) -> Tensor:
    """Embed a batch ``[B, 1, F, T]`` with ``encoder`` (fresh one from ``cfg`` if omitted)."""
    if encoder is None:
        encoder = Encoder(cfg or EncoderConfig())
    x = x if isinstance(x, Tensor) else Tensor(x)
    return nn.forward_layer(encoder, x, mode)


def parameter_count(cfg: EncoderConfig = EncoderConfig()) -> int:
    """Trainable parameters (running statistics excluded), from layer geometry."""
    total = 0
    in_ch = 1
    for _ in range(cfg.conv_blocks):
        total += cfg.channels * in_ch * 9 + cfg.channels  # conv kernel + bias
        total += 2 * cfg.channels  # BN gamma, beta
        in_ch = cfg.channels
    if cfg.use_mlp:
        total += cfg.local_dim * cfg.mlp_hidden + cfg.mlp_hidden
        total += cfg.mlp_hidden * cfg.mlp_hidden + cfg.mlp_hidden
    return total


def calibrate_batchnorm(encoder: nn.Module, batches) -> None:
    """Populate BatchNorm running statistics with train-mode passes, no parameter updates."""
    encoder.train()
    dropouts = [m for _, m in _walk(encoder) if isinstance(m, nn.Dropout)]
    saved = [d.p for d in dropouts]
    for d in dropouts:
        d.p = 0.0
    with T.no_grad():
        for batch in batches:
            encoder(batch if isinstance(batch, Tensor) else Tensor(batch))
    for d, p in zip(dropouts, saved):
        d.p = p
    encoder.eval()


def _walk(module: nn.Module, prefix: str = ""):
    yield prefix, module
    for name, child in module.children():
        yield from _walk(child, f"{prefix}{name}.")


def batchnorm_initialized(module: nn.Module) -> bool:
    return all(m.num_batches_tracked[0] > 0 for _, m in _walk(module)
               if isinstance(m, nn.BatchNorm))
