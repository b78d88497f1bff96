"""Online/target networks, the BYOL objective and the pretraining loop."""
from __future__ import annotations

import csv
import json
import logging
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import augment as aug
from . import frontend, nn, tnsr
from . import tensor as T
from .data import CorpusStats, Manifest, corpus_stats_from_arrays, load_spectrograms
from .encoder import Encoder, EncoderConfig
from .errors import ContractViolation, DataError, VersionError
from .optim import Adam
from .tensor import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    tau: float = 0.99
    batch_size: int = 256
    epochs: int = 100
    max_steps: int = 0  # 0 = no limit
    proj_hidden: int = 4096
    proj_dim: int = 256
    unit_frames: int = frontend.UNIT_FRAMES
    seed: int = 42

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ContractViolation(f"tau must lie in [0, 1], got {self.tau}")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0 or self.max_steps < 0:
            raise ContractViolation("lr and batch_size must be positive; epochs and max_steps >= 0")


class MLPHead(nn.Module):
    """Linear -> BatchNorm -> ReLU -> Linear."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden, rng)
        self.bn = nn.BatchNorm(hidden)
        self.fc2 = nn.Linear(hidden, out_dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.bn(self.fc1(x)).relu())


class Network(nn.Module):
    """Encoder followed by a projector, optionally a predictor."""

    def __init__(self, encoder: Encoder, projector: MLPHead, predictor: MLPHead | None = None):
        super().__init__()
        self.encoder = encoder
        self.projector = projector
        self.predictor = predictor

    def children(self):
        yield "encoder", self.encoder
        yield "projector", self.projector
        if self.predictor is not None:
            yield "predictor", self.predictor

    def project(self, x: Tensor) -> Tensor:
        return self.projector(self.encoder(x))

    def forward(self, x: Tensor) -> Tensor:
        z = self.project(x)
        return self.predictor(z) if self.predictor is not None else z


def _walk(module: nn.Module):
    yield module
    for _, child in module.children():
        yield from _walk(child)


class ModelState:
    """Online network (with predictor), EMA target (without), and Adam state."""

    def __init__(self, enc_cfg: EncoderConfig = EncoderConfig(),
                 train_cfg: TrainConfig = TrainConfig()):
        self.enc_cfg = enc_cfg
        self.train_cfg = train_cfg
        seeds = np.random.SeedSequence(train_cfg.seed).generate_state(4)
        rng = np.random.default_rng(seeds[0])
        d = enc_cfg.embedding_dim
        h, p = train_cfg.proj_hidden, train_cfg.proj_dim
        self.online = Network(Encoder(enc_cfg, seed=int(seeds[1])),
                              MLPHead(d, h, p, rng), MLPHead(p, h, p, rng))
        self.target = Network(Encoder(enc_cfg, seed=int(seeds[2])), MLPHead(d, h, p, rng))
        self._sync_target()
        for m in _walk(self.target):
            if isinstance(m, nn.BatchNorm):
                m.track_running_stats = False
        for p_ in self.target.parameters():
            p_.requires_grad = False
        self.tau = train_cfg.tau
        self.optimizer = Adam(self.online.named_parameters(), lr=train_cfg.lr)
        self.step = 0
        self.epoch = 0

    def _sync_target(self) -> None:
        online = self.online.state_dict()
        self.target.load_state_dict(OrderedDict(
            (k, v) for k, v in online.items() if not k.startswith("predictor.")))

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict()
        for k, v in self.online.state_dict().items():
            state[f"online.{k}"] = v
        for k, v in self.target.state_dict().items():
            state[f"target.{k}"] = v
        for k, v in self.optimizer.state_dict().items():
            state[f"adam.{k}"] = v
        return state

    def load_state_dict(self, state: dict) -> None:
        def part(prefix):
            return OrderedDict((k[len(prefix):], v) for k, v in state.items() if k.startswith(prefix))
        self.online.load_state_dict(part("online."))
        self.target.load_state_dict(part("target."))
        if any(k.startswith("adam.") for k in state):
            self.optimizer.load_state_dict(part("adam."))
            self.step = self.optimizer.step_count


def byol_loss(q: Tensor, z_target) -> Tensor:
    """Mean over rows of ``2 - 2 cos(q, z)``; the target is a constant."""
    z = z_target.data if isinstance(z_target, Tensor) else np.asarray(z_target)
    if q.shape != z.shape or q.ndim != 2:
        raise ContractViolation(f"byol_loss shapes {q.shape} vs {z.shape}")
    zn = T.l2_normalize(Tensor(z, dtype=q.dtype))
    qn = T.l2_normalize(q)
    return (2.0 - 2.0 * (qn * zn).sum(axis=1)).mean()


def target_projection(state: ModelState, x: Tensor, mode: str = "train") -> np.ndarray:
    state.target.train(mode == "train")
    with T.no_grad():
        return state.target.project(x).data


def symmetric_loss(v, v_prime, state: ModelState, mode: str = "train") -> Tensor:
    """``loss(online(v), target(v')) + loss(online(v'), target(v))``."""
    v = v if isinstance(v, Tensor) else Tensor(v)
    v_prime = v_prime if isinstance(v_prime, Tensor) else Tensor(v_prime)
    z_v = target_projection(state, v, mode)
    z_vp = target_projection(state, v_prime, mode)
    state.online.train(mode == "train")
    return byol_loss(state.online(v), z_vp) + byol_loss(state.online(v_prime), z_v)


def ema_update(state: ModelState) -> None:
    """``target <- tau * target + (1 - tau) * online`` for parameters and BN running stats."""
    tau = state.tau
    if not 0.0 <= tau <= 1.0:
        raise ContractViolation(f"tau {tau} outside [0, 1]")
    online = dict(state.online.named_parameters())
    for name, p in state.target.named_parameters():
        if name not in online:
            raise ContractViolation(f"target parameter {name} has no online counterpart")
        p.data *= tau
        p.data += (1.0 - tau) * online[name].data
    online_buf = dict(state.online.named_buffers())
    for name, buf in state.target.named_buffers():
        if name not in online_buf:
            raise ContractViolation(f"target buffer {name} has no online counterpart")
        if name.endswith("num_batches_tracked"):
            buf[...] = online_buf[name]
        else:
            buf *= tau
            buf += (1.0 - tau) * online_buf[name]


def train_step(state: ModelState, v: np.ndarray, v_prime: np.ndarray) -> float:
    """One optimisation step on a batch of view pairs ``[B, F, T]``; returns the loss."""
    x = Tensor(v[:, None])
    xp = Tensor(v_prime[:, None])
    state.optimizer.zero_grad()
    loss = symmetric_loss(x, xp, state)
    loss.backward()
    state.optimizer.step()
    ema_update(state)
    state.step += 1
    return loss.item()


# -- checkpoints -----------------------------------------------------------------


def checkpoint_meta(state: ModelState, norm: aug.NormStats | None, aug_cfg=None) -> dict:
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "encoder": asdict(state.enc_cfg),
        "train": asdict(state.train_cfg),
        "step": state.step,
        "epoch": state.epoch,
        "seed": state.train_cfg.seed,
    }
    if norm is not None:
        meta["norm"] = {"mu": norm.mu, "sigma": norm.sigma}
    if aug_cfg is not None:
        meta["augment"] = asdict(aug_cfg)
    return meta


def save_checkpoint(path, state: ModelState, meta: dict) -> None:
    """Write ``path`` (TNSR) and ``path + '.json'``; each replaced atomically."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tnsr.save(tmp, state.state_dict())
    os.replace(tmp, path)
    sidecar = meta_path(path)
    tmp = sidecar.with_name(sidecar.name + ".tmp")
    tmp.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, sidecar)


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_checkpoint(path) -> tuple:
    """Return ``(ModelState, meta)``."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        meta = json.loads(meta_path(path).read_text())
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint metadata missing: {meta_path(path)}") from exc
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise VersionError(
            f"checkpoint version {meta.get('format_version')} is incompatible "
            f"(expected {CHECKPOINT_VERSION})")
    state = ModelState(EncoderConfig(**meta["encoder"]), TrainConfig(**meta["train"]))
    state.load_state_dict(tnsr.load(path))
    state.step = meta["step"]
    state.epoch = meta["epoch"]
    return state, meta


# -- training loop ---------------------------------------------------------------


@dataclass
class PretrainResult:
    state: ModelState
    norm: aug.NormStats
    losses: list = field(default_factory=list)


def pretrain(spectrograms, enc_cfg: EncoderConfig = EncoderConfig(),
             train_cfg: TrainConfig = TrainConfig(), aug_cfg: aug.AugmentConfig = aug.AugmentConfig(),
             norm: aug.NormStats | None = None, out_dir=None) -> PretrainResult:
    """BYOL pretraining over in-memory log-mel arrays ``[F, T_i]``.

    Each step: random unit crop per clip, two augmented views, symmetric
    loss, Adam on the online network, EMA update of the target. With
    ``out_dir`` a checkpoint is written after every epoch and each step is
    appended to ``train_log.csv``.
    """
    spectrograms = list(spectrograms)
    if not spectrograms:
        raise DataError("no training clips")
    if norm is None:
        norm = corpus_stats_from_arrays(spectrograms).norm_stats()
    state = ModelState(enc_cfg, train_cfg)
    data_seq, aug_seq = np.random.SeedSequence(train_cfg.seed).spawn(3)[1:]
    data_rng = np.random.default_rng(data_seq)
    aug_rng = np.random.default_rng(aug_seq)
    queue = aug.MixupQueue(aug_cfg.queue_size, aug_cfg.mixup_alpha)
    batch = min(train_cfg.batch_size, len(spectrograms))
    steps_per_epoch = len(spectrograms) // batch
    result = PretrainResult(state, norm)

    writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = (out_dir / "train_log.csv").open("w", newline="")
        writer = csv.writer(log_fh, lineterminator="\n")
        writer.writerow(["step", "loss", "lr", "tau"])
    ckpt = out_dir / "checkpoint.tnsr" if out_dir is not None else None
    try:
        if ckpt is not None:
            save_checkpoint(ckpt, state, checkpoint_meta(state, norm, aug_cfg))
        done = False
        for epoch in range(train_cfg.epochs):
            order = data_rng.permutation(len(spectrograms))
            for b in range(steps_per_epoch):
                idx = order[b * batch:(b + 1) * batch]
                xs = [frontend.crop_or_pad(spectrograms[i], train_cfg.unit_frames, data_rng)
                      for i in idx]
                views = aug.make_view_batch(xs, aug_cfg, norm, aug.branch_rngs(aug_rng), queue)
                v = views.v.astype(T.get_default_dtype())
                vp = views.v_prime.astype(T.get_default_dtype())
                loss = train_step(state, v, vp)
                result.losses.append(loss)
                if writer is not None:
                    writer.writerow([state.step, repr(loss), train_cfg.lr, state.tau])
                if train_cfg.max_steps and state.step >= train_cfg.max_steps:
                    done = True
                    break
            state.epoch = epoch + 1
            if ckpt is not None:
                save_checkpoint(ckpt, state, checkpoint_meta(state, norm, aug_cfg))
                log_fh.flush()
            log.info("epoch %d step %d loss %.4f", state.epoch, state.step,
                     result.losses[-1] if result.losses else float("nan"))
            if done:
                break
    finally:
        if writer is not None:
            log_fh.close()
    return result


def pretrain_manifest(manifest: Manifest, enc_cfg: EncoderConfig = EncoderConfig(),
                      train_cfg: TrainConfig = TrainConfig(),
                      aug_cfg: aug.AugmentConfig = aug.AugmentConfig(),
                      frontend_cfg: frontend.FrontendConfig = frontend.FrontendConfig(),
                      out_dir=None) -> PretrainResult:
    specs = load_spectrograms(manifest, frontend_cfg)
    norm = corpus_stats_from_arrays(specs).norm_stats()
    return pretrain(specs, enc_cfg, train_cfg, aug_cfg, norm, out_dir)
