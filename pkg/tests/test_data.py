import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from byola import data, evaluation as ev
from byola.errors import DataError

import oracles


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# -- corpus statistics -------------------------------------------------------------


def test_two_cell_example():
    s = data.corpus_stats_from_arrays([np.array([0.0]), np.array([2.0])])
    assert (s.mu, s.sigma, s.cell_count) == (1.0, 1.0, 2)


def test_constant_corpus_hits_epsilon_guard():
    s = data.corpus_stats_from_arrays([np.full((4, 5), -3.5)])
    assert s.mu == -3.5 and s.sigma == data.STATS_EPS


def test_empty_corpus_errors(tmp_path):
    with pytest.raises(DataError):
        data.corpus_stats_from_arrays([])
    with pytest.raises(DataError):
        data.compute_corpus_stats(data.Manifest([], tmp_path))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 12), st.floats(-20, 20), st.floats(0.01, 10))
def test_streaming_matches_two_pass(seed, n, loc, scale):
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(loc, scale, size=(rng.integers(1, 9), rng.integers(1, 9))) for _ in range(n)]
    s = data.corpus_stats_from_arrays(arrays)
    mu, sd = oracles.mean_std_two_pass(arrays)
    assert abs(s.mu - mu) < 1e-9
    assert abs(s.sigma - max(sd, data.STATS_EPS)) < 1e-9


def test_stats_bit_stable(tiny_corpus):
    m = data.read_manifest(tiny_corpus)
    assert data.compute_corpus_stats(m) == data.compute_corpus_stats(m)


# -- manifests ------------------------------------------------------------------


def test_manifest_roundtrip(tmp_path):
    m = data.Manifest([data.ManifestRow("a/x.wav", ("dog", "bark"), "train"),
                       data.ManifestRow("b.wav", (), "test")], tmp_path)
    data.write_manifest(m, tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "path,labels,split,fold"
    assert data.read_manifest(tmp_path / "m.csv") == m


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.from_regex(r"[a-z]{1,6}(/[a-z]{1,6})?\.wav", fullmatch=True),
                          st.lists(st.from_regex(r"[a-z]{1,5}", fullmatch=True), max_size=3),
                          st.integers(0, 9)), max_size=8), st.booleans())
def test_manifest_roundtrip_property(tmp_path_factory, rows, folds):
    root = tmp_path_factory.mktemp("m")
    m = data.Manifest([data.ManifestRow(p, tuple(l), None if folds else data.SPLITS[k % 3],
                                        k if folds else None) for p, l, k in rows], root)
    data.write_manifest(m, root / "m.csv")
    assert data.read_manifest(root / "m.csv") == m


def test_split_and_fold_are_exclusive():
    with pytest.raises(DataError):
        data.Manifest([data.ManifestRow("a.wav", ("x",), "train"),
                       data.ManifestRow("b.wav", ("x",), None, 1)])
    with pytest.raises(DataError):
        data.Manifest([data.ManifestRow("a.wav", ("x",), "bogus")])


def test_manifest_header_required(tmp_path):
    (tmp_path / "m.csv").write_text("a.wav,x,train,\n")
    with pytest.raises(DataError):
        data.read_manifest(tmp_path / "m.csv")


def test_missing_manifest_names_path(tmp_path):
    with pytest.raises(DataError, match="nope.csv"):
        data.read_manifest(tmp_path / "nope.csv")


# -- synthetic corpora --------------------------------------------------------------


def test_synth_is_byte_identical(tmp_path):
    spec = data.SynthSpec(clips_per_class=4, seed=9)
    data.synth_dataset(spec, tmp_path / "a")
    data.synth_dataset(spec, tmp_path / "b")
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_synth_counts_and_splits(tmp_path):
    m = data.synth_dataset(data.SynthSpec(clips_per_class=10, seed=1), tmp_path)
    assert len(m) == 20 and m.classes == ["high", "low"]
    for c in m.classes:
        rows = [r for r in m.rows if r.labels == (c,)]
        assert len(rows) == 10
        assert [r.split for r in rows].count("train") == 6


def test_synth_folds(tmp_path):
    m = data.synth_dataset(data.SynthSpec(clips_per_class=6, folds=3), tmp_path)
    assert m.uses_folds and sorted({r.fold for r in m.rows}) == [1, 2, 3]


def test_gated_preset_writes(tmp_path):
    spec = data.replace_spec(data.SYNTH_PRESETS["gated"], clips_per_class=2, seed=None)
    m = data.synth_dataset(spec, tmp_path)
    assert m.classes == ["gated", "steady"]


def test_raw_logmel_probe_is_perfect(tmp_path):
    m = data.synth_dataset(data.SynthSpec(clips_per_class=100, seed=0), tmp_path)
    specs = data.load_spectrograms(m)
    table = ev.EmbeddingTable([r.path for r in m.rows], np.stack([s.mean(axis=1) for s in specs]),
                              [r.labels for r in m.rows], [r.split for r in m.rows],
                              [None] * len(m))
    rep = ev.train_probe(table)
    assert rep["mean"] == 1.0
