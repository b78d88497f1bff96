"""Linear evaluation of frozen embeddings: extraction, probes, metrics, reports."""
from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import augment as aug
from . import frontend, nn, tnsr
from . import tensor as T
from .data import Manifest, load_clip
from .encoder import Encoder, batchnorm_initialized, calibrate_batchnorm
from .errors import ContractViolation, DataError
from .optim import Adam
from .tensor import Tensor

log = logging.getLogger(__name__)

LR_GRID = (1e-5, 1e-4, 1e-3, 1e-2)
STD_EPS = 1e-8


@dataclass
class EmbeddingTable:
    ids: list
    embeddings: np.ndarray  # [N, D]
    labels: list  # tuple of class names per row
    splits: list  # "train"/"valid"/"test" or None
    folds: list  # int or None
    rejects: list = field(default_factory=list)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        n = len(self.ids)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != n:
            raise ContractViolation(f"embeddings {self.embeddings.shape} do not match {n} rows")
        if not (len(self.labels) == len(self.splits) == len(self.folds) == n):
            raise ContractViolation("ids, labels, splits and folds must have equal length")
        for s, f in zip(self.splits, self.folds):
            if s is None and f is None:
                raise ContractViolation("every row needs a split or a fold")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def uses_folds(self) -> bool:
        return any(f is not None for f in self.folds)

    @property
    def classes(self) -> list:
        return sorted({c for labels in self.labels for c in labels})

    def mask(self, split: str) -> np.ndarray:
        return np.array([s == split for s in self.splits])


def save_table(table: EmbeddingTable, path) -> None:
    """``path`` gets the TNSR ``embeddings`` tensor; ``path.csv`` gets ``id,label,split``."""
    path = Path(path)
    tnsr.save(path, {"embeddings": table.embeddings})
    with path.with_name(path.name + ".csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "label", "split"])
        for i, labels, split, fold in zip(table.ids, table.labels, table.splits, table.folds):
            writer.writerow([i, ";".join(labels), split if split is not None else f"fold{fold}"])


def load_table(path) -> EmbeddingTable:
    path = Path(path)
    emb = tnsr.load(path)
    if "embeddings" not in emb:
        raise DataError(f"{path}: no 'embeddings' tensor")
    ids, labels, splits, folds = [], [], [], []
    with path.with_name(path.name + ".csv").open(newline="") as fh:
        for rec in csv.DictReader(fh):
            ids.append(rec["id"])
            labels.append(tuple(l for l in rec["label"].split(";") if l))
            s = rec["split"]
            if s.startswith("fold"):
                splits.append(None)
                folds.append(int(s[4:]))
            else:
                splits.append(s)
                folds.append(None)
    return EmbeddingTable(ids, emb["embeddings"].astype(np.float64), labels, splits, folds)


# -- extraction -----------------------------------------------------------------


def _clip_rng(samples: np.ndarray, seed: int) -> np.random.Generator:
    """Crop randomness keyed on content so identical audio gets identical crops."""
    digest = zlib.crc32(np.ascontiguousarray(samples).tobytes())
    return np.random.default_rng([seed, digest])


def extract(encoder: Encoder, manifest: Manifest, norm: aug.NormStats,
            duration: float | None = None, seed: int = 0, batch_size: int = 64,
            frontend_cfg: frontend.FrontendConfig = frontend.FrontendConfig()) -> EmbeddingTable:
    """Embed every readable clip of ``manifest`` with ``encoder`` in eval mode.

    Clips are randomly cropped or zero-padded to ``duration`` seconds (default:
    the average clip duration), converted to log-mel, and normalized with the
    stored corpus statistics. Unreadable files are skipped and listed in
    ``rejects``.
    """
    clips, rows, rejects = [], [], []
    for row in manifest.rows:
        try:
            clips.append(load_clip(manifest.resolve(row), frontend_cfg.sample_rate))
            rows.append(row)
        except (DataError, OSError) as exc:
            log.warning("skipping %s: %s", row.path, exc)
            rejects.append(row.path)
    if not clips:
        raise DataError("no readable clips to extract")
    if duration is None:
        duration = float(np.mean([c.duration for c in clips]))
    n_samples = max(int(round(duration * frontend_cfg.sample_rate)), frontend_cfg.n_fft)
    feats = []
    for clip in clips:
        samples = frontend.crop_or_pad(clip.samples, n_samples, _clip_rng(clip.samples, seed))
        spec = frontend.logmel(frontend.AudioClip(samples, clip.sample_rate), frontend_cfg)
        feats.append(aug.pre_norm(spec.values, norm))
    feats = np.stack(feats)[:, None].astype(T.get_default_dtype())
    batches = [feats[i:i + batch_size] for i in range(0, len(feats), batch_size)]
    if not batchnorm_initialized(encoder):
        log.warning("encoder BatchNorm has no running statistics; calibrating on the extraction set")
        calibrate_batchnorm(encoder, batches)
    encoder.eval()
    with T.no_grad():
        out = np.concatenate([encoder(Tensor(b)).data for b in batches])
    return EmbeddingTable([r.path for r in rows], out, [r.labels for r in rows],
                          [r.split for r in rows], [r.fold for r in rows], rejects)


def standardize(table: EmbeddingTable, train_mask: np.ndarray | None = None) -> EmbeddingTable:
    """Scale every row with the per-dimension mean/std of the training rows only."""
    if train_mask is None:
        train_mask = table.mask("train")
    if not np.any(train_mask):
        raise DataError("standardization needs a non-empty train split")
    train = table.embeddings[train_mask]
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    std = np.where(std > 0, std, STD_EPS)
    return replace(table, embeddings=(table.embeddings - mean) / std)


# -- metrics --------------------------------------------------------------------


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """AP of one class: mean, over positives, of precision at that positive's score.

    Tied scores share one threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = labels.sum()
    if n_pos == 0:
        raise ContractViolation("average precision undefined without positives")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    # Last index of every run of tied scores.
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp_at = tp[ends]
    precision = tp_at / (ends + 1)
    recall_gain = np.diff(np.r_[0, tp_at])
    return float((recall_gain * precision).sum() / n_pos)


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability a positive outscores a negative (ties count one half)."""
    from scipy.stats import rankdata

    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        raise ContractViolation("ROC-AUC needs both positives and negatives")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def metric_map_auc(scores: np.ndarray, labels: np.ndarray, classes=None) -> tuple:
    """Macro mAP and macro ROC-AUC over classes (optionally a subset).

    Classes without positives are excluded from both; classes without
    negatives are excluded from AUC only.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ContractViolation(f"scores {scores.shape} and labels {labels.shape} must be [N, C]")
    cols = range(labels.shape[1]) if classes is None else classes
    aps, aucs = [], []
    for c in cols:
        y = labels[:, c].astype(bool)
        if not y.any():
            continue
        aps.append(average_precision(scores[:, c], y))
        if not y.all():
            aucs.append(roc_auc(scores[:, c], y))
    if not aps:
        raise ContractViolation("mAP undefined: no class has a positive label")
    return float(np.mean(aps)), float(np.mean(aucs)) if aucs else float("nan")


def subset_map(scores: np.ndarray, labels: np.ndarray, class_indices: Sequence[int]) -> float:
    return metric_map_auc(scores, labels, classes=list(class_indices))[0]


def accuracy(logits: np.ndarray, targets: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(targets)))


# -- probe ----------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeConfig:
    max_epochs: int = 200
    patience: int = 20
    learning_rate: float | None = None  # None sweeps LR_GRID
    runs: int = 3
    task_kind: str = "multiclass"
    batch_size: int = 0  # 0 = full batch
    seed: int = 0

    def __post_init__(self):
        if self.patience > self.max_epochs:
            raise ContractViolation("patience must not exceed max_epochs")
        if self.runs < 1:
            raise ContractViolation("runs must be >= 1")
        if self.task_kind not in ("multiclass", "multilabel"):
            raise ContractViolation(f"unknown task kind {self.task_kind!r}")


@dataclass
class ProbeRun:
    test_score: float
    valid_score: float | None
    epochs: int
    losses: list
    test_auc: float | None = None
    valid_loss: float | None = None


class LinearProbe:
    def __init__(self, dim: int, n_classes: int, kind: str, seed: int):
        self.kind = kind
        self.layer = nn.Linear(dim, n_classes, np.random.default_rng(seed))

    def logits(self, x: np.ndarray) -> Tensor:
        return self.layer(Tensor(x))

    def loss(self, x: np.ndarray, y: np.ndarray) -> Tensor:
        z = self.logits(x)
        return T.cross_entropy(z, y) if self.kind == "multiclass" else T.bce_with_logits(z, y)

    def score(self, x: np.ndarray, y: np.ndarray) -> tuple:
        with T.no_grad():
            z = self.logits(x).data
        if self.kind == "multiclass":
            return accuracy(z, y), None
        return metric_map_auc(z, y)


def _targets(table: EmbeddingTable, classes: list, kind: str) -> np.ndarray:
    index = {c: i for i, c in enumerate(classes)}
    if kind == "multiclass":
        return np.array([index[labels[0]] for labels in table.labels])
    y = np.zeros((len(table), len(classes)))
    for r, labels in enumerate(table.labels):
        for c in labels:
            y[r, index[c]] = 1.0
    return y


def fit_probe(x_train, y_train, x_valid, y_valid, x_test, y_test, n_classes: int,
              kind: str, lr: float, cfg: ProbeConfig, seed: int) -> ProbeRun:
    """Train one linear probe with Adam, early-stopping on the validation metric."""
    with T.default_dtype(np.float64):
        probe = LinearProbe(x_train.shape[1], n_classes, kind, seed)
        opt = Adam(probe.layer.named_parameters(), lr=lr)
        rng = np.random.default_rng(seed)
        best, best_loss, best_state, since, epochs = -np.inf, np.inf, None, 0, 0
        losses = []
        n = len(x_train)
        bs = cfg.batch_size or n
        for epoch in range(cfg.max_epochs):
            order = rng.permutation(n) if bs < n else np.arange(n)
            for start in range(0, n, bs):
                idx = order[start:start + bs]
                opt.zero_grad()
                probe.loss(x_train[idx], y_train[idx]).backward()
                opt.step()
            epochs = epoch + 1
            with T.no_grad():
                losses.append(probe.loss(x_train, y_train).item())
            if x_valid is None:
                continue
            score = probe.score(x_valid, y_valid)[0]
            with T.no_grad():
                valid_loss = probe.loss(x_valid, y_valid).item()
            # Accuracy saturates on easy tasks; validation loss breaks ties.
            if score > best or (score == best and valid_loss < best_loss):
                best, best_loss, since = score, valid_loss, 0
                best_state = {k: v.copy() for k, v in probe.layer.state_dict().items()}
            else:
                since += 1
                if since >= cfg.patience:
                    break
        if best_state is not None:
            probe.layer.load_state_dict(best_state)
        test, auc = probe.score(x_test, y_test)
    if x_valid is None:
        return ProbeRun(test, None, epochs, losses, auc)
    return ProbeRun(test, best, epochs, losses, auc, best_loss)


def _ci95(values: Sequence[float]) -> float:
    if len(values) < 2:
        return 0.0
    return float(1.96 * np.std(values, ddof=1) / math.sqrt(len(values)))


def _evaluate_split(table: EmbeddingTable, train, valid, test, classes, cfg: ProbeConfig) -> dict:
    """Sweep learning rates, pick the best mean validation score, report its test runs."""
    std = standardize(table, train)
    y = _targets(table, classes, cfg.task_kind)
    x = std.embeddings
    has_valid = bool(np.any(valid))
    if not has_valid:
        log.warning("no validation rows: early stopping disabled, training %d epochs", cfg.max_epochs)
    grid = (cfg.learning_rate,) if cfg.learning_rate else LR_GRID
    best = None
    for lr in grid:
        runs = [fit_probe(x[train], y[train],
                          x[valid] if has_valid else None, y[valid] if has_valid else None,
                          x[test], y[test], len(classes), cfg.task_kind, lr, cfg,
                          seed=cfg.seed + r)
                for r in range(cfg.runs)]
        # Higher validation score wins; lower validation loss breaks ties.
        key = ((np.mean([r.valid_score for r in runs]), -np.mean([r.valid_loss for r in runs]))
               if has_valid else (0.0, 0.0))
        if best is None or key > best[0]:
            best = (key, lr, runs)
    _, lr, runs = best
    values = [r.test_score for r in runs]
    out = {
        "learning_rate": lr,
        "runs": values,
        "mean": float(np.mean(values)),
        "ci95": _ci95(values),
        "valid_runs": [r.valid_score for r in runs] if has_valid else None,
        "epochs": [r.epochs for r in runs],
    }
    if cfg.task_kind == "multilabel":
        out["auc_runs"] = [r.test_auc for r in runs]
        out["auc_mean"] = float(np.mean(out["auc_runs"]))
    return out


def train_probe(table: EmbeddingTable, cfg: ProbeConfig = ProbeConfig()) -> dict:
    """Linear evaluation report.

    Split tables train on ``train``, early-stop on ``valid`` and score
    ``test``. Fold tables run leave-one-fold-out: each fold is the test set
    once, the following fold is validation, the rest train; the reported
    value is the mean of the per-fold scores.
    """
    classes = table.classes
    metric = "accuracy" if cfg.task_kind == "multiclass" else "mAP"
    report = {"task_kind": cfg.task_kind, "metric": metric, "classes": classes,
              "n_rows": len(table), "dim": table.dim,
              "ci_formula": "1.96 * sample_std(runs) / sqrt(n_runs)"}
    if table.uses_folds:
        folds = sorted({f for f in table.folds if f is not None})
        if len(folds) < 2:
            raise DataError("fold evaluation needs at least two folds")
        fold_arr = np.array(table.folds)
        per_fold = {}
        for i, f in enumerate(folds):
            v = folds[(i + 1) % len(folds)] if len(folds) > 2 else None
            test = fold_arr == f
            valid = fold_arr == v if v is not None else np.zeros(len(table), bool)
            train = ~test & ~valid
            per_fold[str(f)] = _evaluate_split(table, train, valid, test, classes, cfg)
        fold_scores = [r["mean"] for r in per_fold.values()]
        report.update({"folds": per_fold, "fold_scores": fold_scores,
                       "mean": float(np.mean(fold_scores))})
        return report
    train, valid, test = table.mask("train"), table.mask("valid"), table.mask("test")
    if not train.any() or not test.any():
        raise DataError("probe needs non-empty train and test splits")
    report.update(_evaluate_split(table, train, valid, test, classes, cfg))
    return report
