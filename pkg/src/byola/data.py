"""Manifests, corpus statistics and synthetic desk-scale datasets."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import frontend
from .augment import NormStats
from .errors import ContractViolation, DataError

log = logging.getLogger(__name__)

MANIFEST_HEADER = ["path", "labels", "split", "fold"]
SPLITS = ("train", "valid", "test")
STATS_EPS = 1e-8


@dataclass(frozen=True)
class ManifestRow:
    path: str
    labels: tuple = ()
    split: str | None = None
    fold: int | None = None


@dataclass
class Manifest:
    rows: list
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.root = Path(self.root)
        has_split = [r.split is not None for r in self.rows]
        has_fold = [r.fold is not None for r in self.rows]
        if any(s and f for s, f in zip(has_split, has_fold)):
            raise DataError("a manifest row may carry a split or a fold, not both")
        if any(has_split) and any(has_fold):
            raise DataError("split and fold columns are mutually exclusive within a manifest")
        for r in self.rows:
            if r.split is not None and r.split not in SPLITS:
                raise DataError(f"{r.path}: unknown split {r.split!r}")

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def uses_folds(self) -> bool:
        return any(r.fold is not None for r in self.rows)

    @property
    def classes(self) -> list:
        return sorted({label for r in self.rows for label in r.labels})

    def resolve(self, row: ManifestRow) -> Path:
        return self.root / row.path


def read_manifest(path, root=None) -> Manifest:
    """Parse a ``path,labels,split,fold`` CSV; paths are relative to ``root``
    (default: the manifest's directory)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise DataError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {reader.fieldnames}")
        rows = []
        for rec in reader:
            labels = tuple(l for l in (rec["labels"] or "").split(";") if l)
            fold = rec["fold"]
            try:
                fold = int(fold) if fold not in (None, "") else None
            except ValueError as exc:
                raise DataError(f"{path}: bad fold {fold!r}") from exc
            rows.append(ManifestRow(rec["path"], labels, rec["split"] or None, fold))
    return Manifest(rows, Path(root) if root is not None else path.parent)


def write_manifest(manifest: Manifest, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in manifest.rows:
            writer.writerow([r.path, ";".join(r.labels), r.split or "",
                             "" if r.fold is None else r.fold])


def load_clip(path, sample_rate: int = frontend.SAMPLE_RATE) -> frontend.AudioClip:
    clip = frontend.load_wav(path)
    return frontend.resample(clip, sample_rate) if clip.sample_rate != sample_rate else clip


def load_spectrograms(manifest: Manifest, cfg: frontend.FrontendConfig = frontend.FrontendConfig()):
    """Log-mel arrays ``[F, T]`` for every row (unreadable files raise)."""
    return [frontend.logmel(load_clip(manifest.resolve(r), cfg.sample_rate), cfg).values
            for r in manifest.rows]


@dataclass(frozen=True)
class CorpusStats:
    mu: float
    sigma: float
    cell_count: int

    def norm_stats(self) -> NormStats:
        return NormStats(self.mu, self.sigma)


def _merge(a: tuple, b: tuple) -> tuple:
    """Chan et al. pairwise combination of (count, mean, M2)."""
    na, ma, m2a = a
    nb, mb, m2b = b
    n = na + nb
    delta = mb - ma
    return n, ma + delta * nb / n, m2a + m2b + delta * delta * na * nb / n


def _reduce_pairwise(parts: list) -> tuple:
    while len(parts) > 1:
        merged = [_merge(parts[i], parts[i + 1]) for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            merged.append(parts[-1])
        parts = merged
    return parts[0]


def corpus_stats_from_arrays(arrays: Iterable[np.ndarray]) -> CorpusStats:
    """Population mean/std of all cells, one pass over the arrays.

    Each array contributes an exact (count, mean, M2) triple; triples are
    combined in a fixed pairwise tree so the result does not depend on
    scheduling.
    """
    parts = []
    for arr in arrays:
        arr = np.asarray(arr, dtype=np.float64).ravel()
        if arr.size == 0:
            continue
        mean = math.fsum(arr) / arr.size
        dev = arr - mean
        parts.append((arr.size, mean, math.fsum(dev * dev)))
    if not parts:
        raise DataError("empty corpus: no cells to compute statistics over")
    n, mean, m2 = _reduce_pairwise(parts)
    std = math.sqrt(max(m2, 0.0) / n)
    return CorpusStats(mean, std if std > STATS_EPS else STATS_EPS, int(n))


def compute_corpus_stats(manifest: Manifest,
                         cfg: frontend.FrontendConfig = frontend.FrontendConfig()) -> CorpusStats:
    if len(manifest) == 0:
        raise DataError("empty corpus: manifest has no rows")
    return corpus_stats_from_arrays(
        frontend.logmel(load_clip(manifest.resolve(r), cfg.sample_rate), cfg).values
        for r in manifest.rows)


# -- synthetic datasets --------------------------------------------------------


@dataclass(frozen=True)
class ClassRecipe:
    """One synthetic class.

    ``kind`` is ``tone`` (harmonic tone at ``freq``), ``chirp`` (``freq`` to
    ``freq_end``), or ``noise`` (band-limited noise centred at ``freq`` with
    ``bandwidth``). With ``freq_range`` the base frequency is drawn
    log-uniformly per clip (a chirp keeps its ``freq_end / freq`` ratio).
    ``gate_rate`` > 0 switches the sound on and off at that rate (Hz).
    """

    name: str
    kind: str = "tone"
    freq: float = 440.0
    freq_end: float | None = None
    bandwidth: float = 200.0
    harmonics: int = 1
    freq_range: tuple | None = None
    gate_rate: float = 0.0


@dataclass(frozen=True)
class SynthSpec:
    classes: tuple = (ClassRecipe("low", "tone", 440.0, harmonics=3),
                      ClassRecipe("high", "tone", 880.0, harmonics=3))
    clips_per_class: int = 100
    duration: float = 1.0
    sample_rate: int = frontend.SAMPLE_RATE
    seed: int = 0
    split_fractions: tuple = (0.6, 0.2, 0.2)
    folds: int = 0
    # Nuisance variation applied to every clip.
    freq_jitter: float = 0.02
    gain_db: tuple = (-20.0, 0.0)
    noise_level: float = 0.01
    background_tones: int = 0


# ``tones`` is linearly separable on raw log-mel features. In ``gated`` the
# class is the on/off envelope of a tone at a random pitch, masked by
# unrelated background tones, so frame-level spectra carry little label
# information.
SYNTH_PRESETS = {
    "tones": SynthSpec(),
    "gated": SynthSpec(
        classes=(ClassRecipe("steady", "tone", freq_range=(200.0, 3000.0)),
                 ClassRecipe("gated", "tone", freq_range=(200.0, 3000.0), gate_rate=4.0)),
        background_tones=2),
}


def _render(recipe: ClassRecipe, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    n = int(round(spec.duration * spec.sample_rate))
    t = np.arange(n) / spec.sample_rate
    jitter = 1.0 + rng.uniform(-spec.freq_jitter, spec.freq_jitter)
    base = recipe.freq
    if recipe.freq_range is not None:
        lo, hi = recipe.freq_range
        base = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    f0 = base * jitter
    if recipe.kind == "tone":
        y = sum(np.sin(2 * np.pi * f0 * h * t + rng.uniform(0, 2 * np.pi)) / h
                for h in range(1, recipe.harmonics + 1))
    elif recipe.kind == "chirp":
        f1 = f0 * (recipe.freq_end or recipe.freq) / recipe.freq
        phase = 2 * np.pi * (f0 * t + (f1 - f0) * t * t / (2 * spec.duration))
        y = np.sin(phase + rng.uniform(0, 2 * np.pi))
    elif recipe.kind == "noise":
        white = rng.standard_normal(n)
        spectrum = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n, 1.0 / spec.sample_rate)
        spectrum[np.abs(freqs - f0) > recipe.bandwidth / 2] = 0.0
        y = np.fft.irfft(spectrum, n)
    else:
        raise ContractViolation(f"unknown synth kind {recipe.kind!r}")
    y = np.asarray(y, dtype=np.float64)
    if recipe.gate_rate > 0:
        phase = rng.uniform(0, 1)
        y = y * ((recipe.gate_rate * t + phase) % 1.0 < 0.5)
    for _ in range(spec.background_tones):
        fb = rng.uniform(100.0, 4000.0)
        y = y + rng.uniform(0.2, 1.0) * np.sin(2 * np.pi * fb * t + rng.uniform(0, 2 * np.pi))
    y = y / (np.max(np.abs(y)) + 1e-12)
    y = y * 10 ** (rng.uniform(*spec.gain_db) / 20)
    y = y + spec.noise_level * rng.standard_normal(n)
    return np.clip(y, -1.0, 1.0) * 0.9


def _assign_splits(n: int, spec: SynthSpec, rng: np.random.Generator):
    if spec.folds:
        folds = np.arange(n) % spec.folds + 1
        rng.shuffle(folds)
        return [None] * n, [int(f) for f in folds]
    fr = np.asarray(spec.split_fractions, dtype=float)
    counts = np.floor(fr / fr.sum() * n).astype(int)
    counts[0] += n - counts.sum()
    labels = np.repeat(np.array(SPLITS), counts)
    rng.shuffle(labels)
    return [str(s) for s in labels], [None] * n


def synth_dataset(spec: SynthSpec, out_dir) -> Manifest:
    """Write ``clips_per_class`` WAVs per class plus ``manifest.csv`` under ``out_dir``.

    Output is a pure function of ``spec``. Splits (or folds) are stratified
    per class.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(spec.seed)
    rows = []
    for ci, (recipe, seq) in enumerate(zip(spec.classes, root.spawn(len(spec.classes)))):
        rng = np.random.default_rng(seq)
        splits, folds = _assign_splits(spec.clips_per_class, spec, rng)
        for i in range(spec.clips_per_class):
            rel = f"{recipe.name}/{recipe.name}_{i:04d}.wav"
            (out_dir / recipe.name).mkdir(exist_ok=True)
            samples = _render(recipe, spec, rng)
            frontend.save_wav(out_dir / rel, frontend.AudioClip(samples, spec.sample_rate))
            rows.append(ManifestRow(rel, (recipe.name,), splits[i], folds[i]))
    manifest = Manifest(rows, out_dir)
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest


def replace_spec(spec: SynthSpec, **changes) -> SynthSpec:
    """``dataclasses.replace`` that ignores ``None`` values."""
    return replace(spec, **{k: v for k, v in changes.items() if v is not None})
