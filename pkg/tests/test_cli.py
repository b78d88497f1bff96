import csv
import io
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from byola import augment as aug
from byola import byol, data, tnsr
from byola.cli import main

from golden.make_golden import CHAINS, expected

GOLDEN = Path(__file__).parent / "golden"
TINY = ["--set", "enc_channels=4", "--set", "enc_mlp_hidden=16", "--set", "proj_hidden=32",
        "--set", "proj_dim=8", "--set", "unit_frames=16", "--batch-size", "8", "--no-figures"]


def run(capsys, *argv):
    rc = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return rc, list(csv.reader(io.StringIO(out))), err


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_corpus")
    data.synth_dataset(data.SynthSpec(clips_per_class=6, seed=2, duration=0.5), root)
    return root / "manifest.csv"


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory, corpus):
    out = tmp_path_factory.mktemp("ckpt")
    assert main(["pretrain", "--manifest", str(corpus), "--out", str(out), "--max-steps", "2",
                 *TINY]) == 0
    return out / "checkpoint.tnsr"


# -- configuration ----------------------------------------------------------------


def test_print_config_resolves_everything(capsys, tmp_path, monkeypatch):
    monkeypatch.delenv("BYOLA_SEED", raising=False)
    f = tmp_path / "c.yaml"
    f.write_text("lr: 0.001\nseed: 5\n")
    rc = main(["pretrain", "--manifest", "x", "--out", "y", "--config", str(f), "--seed", "6",
               "--set", "tau=0.9", "--print-config"])
    doc = yaml.safe_load(capsys.readouterr().out)
    assert rc == 0
    assert (doc["lr"], doc["seed"], doc["tau"], doc["aug_alpha"]) == (0.001, 6, 0.9, 0.2)


def test_env_seed(capsys, monkeypatch):
    monkeypatch.setenv("BYOLA_SEED", "77")
    main(["synth", "--out", "x", "--print-config"])
    assert yaml.safe_load(capsys.readouterr().out)["seed"] == 77


def test_unknown_key_is_usage_error(capsys):
    rc, _, err = run(capsys, "synth", "--out", "x", "--set", "wobble=1")
    assert rc == 2 and "wobble" in err


def test_argparse_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["pretrain"])
    assert exc.value.code == 2


def test_missing_manifest(capsys, tmp_path):
    rc, _, err = run(capsys, "pretrain", "--manifest", tmp_path / "none.csv", "--out", tmp_path)
    assert rc == 3 and "none.csv" in err


# -- synth / stats -------------------------------------------------------------------


def test_synth_and_stats(capsys, tmp_path):
    rc, rows, _ = run(capsys, "synth", "--out", tmp_path / "c", "--clips-per-class", 3,
                      "--clip-seconds", 0.3, "--preset", "gated")
    assert rc == 0 and rows[1][1] == "6"
    rc, rows, _ = run(capsys, "stats", "--manifest", tmp_path / "c" / "manifest.csv",
                      "--out", tmp_path / "s.json")
    doc = json.loads((tmp_path / "s.json").read_text())
    assert rc == 0 and rows[0] == ["mu", "sigma", "cell_count"]
    assert float(rows[1][0]) == doc["mu"] and doc["n_clips"] == 6
    assert (tmp_path / "s.png").stat().st_size > 0


# -- pretrain -------------------------------------------------------------------------


def test_zero_epochs_is_init(capsys, corpus, tmp_path):
    rc, rows, _ = run(capsys, "pretrain", "--manifest", corpus, "--out", tmp_path, "--epochs", 0,
                      *TINY)
    assert rc == 0 and rows[1][1] == "0"
    state, meta = byol.load_checkpoint(tmp_path / "checkpoint.tnsr")
    init = byol.ModelState(state.enc_cfg, state.train_cfg)
    for k, v in init.state_dict().items():
        np.testing.assert_array_equal(state.state_dict()[k], np.asarray(v, np.float32))
    assert yaml.safe_load((tmp_path / "config.yaml").read_text())["epochs"] == 0


def test_pretrain_is_byte_reproducible(capsys, corpus, tmp_path):
    for d in ("a", "b"):
        assert run(capsys, "pretrain", "--manifest", corpus, "--out", tmp_path / d,
                   "--max-steps", 3, "--deterministic", *TINY)[0] == 0
    for name in ("checkpoint.tnsr", "checkpoint.tnsr.json", "train_log.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_pretrain_figure(capsys, corpus, tmp_path):
    argv = [a for a in TINY if a != "--no-figures"]
    assert run(capsys, "pretrain", "--manifest", corpus, "--out", tmp_path, "--max-steps", 2,
               *argv)[0] == 0
    assert (tmp_path / "loss.png").read_bytes()[:4] == b"\x89PNG"


# -- extract --------------------------------------------------------------------------


def test_extract_rows_and_idempotence(capsys, corpus, checkpoint, tmp_path):
    outs = []
    for name in ("a.tnsr", "b.tnsr"):
        rc, rows, _ = run(capsys, "extract", "--checkpoint", checkpoint, "--manifest", corpus,
                          "--out", tmp_path / name, "--no-figures")
        assert rc == 0
        outs.append((tmp_path / name).read_bytes())
    assert outs[0] == outs[1]
    n = len(data.read_manifest(corpus))
    assert rows[1][1:] == [str(n), str(4 * 16 + 16), "0"]
    lines = (tmp_path / "a.tnsr.csv").read_text().splitlines()
    assert lines[0] == "id,label,split" and len(lines) == n + 1


@pytest.mark.parametrize("flags,dim", [(["--pooling", "mean"], 80), (["--pooling", "max"], 80),
                                       (["--features", "global"], 16),
                                       (["--features", "local"], 64)])
def test_extract_ablation_dims(capsys, corpus, checkpoint, tmp_path, flags, dim):
    rc, rows, _ = run(capsys, "extract", "--checkpoint", checkpoint, "--manifest", corpus,
                      "--out", tmp_path / "e.tnsr", *flags)
    assert rc == 0 and rows[1][2] == str(dim)
    assert tnsr.load(tmp_path / "e.tnsr")["embeddings"].shape[1] == dim


def test_extract_version_error(capsys, corpus, checkpoint, tmp_path):
    bad = tmp_path / "c.tnsr"
    bad.write_bytes(checkpoint.read_bytes())
    meta = json.loads(byol.meta_path(checkpoint).read_text())
    meta["format_version"] = 999
    byol.meta_path(bad).write_text(json.dumps(meta))
    rc, _, err = run(capsys, "extract", "--checkpoint", bad, "--manifest", corpus,
                     "--out", tmp_path / "e.tnsr")
    assert rc == 3 and "version" in err.lower()


# -- probe ----------------------------------------------------------------------------


def _write_table(path, x, labels, splits, folds=None):
    from byola import evaluation as ev

    n = len(x)
    ev.save_table(ev.EmbeddingTable([str(i) for i in range(n)], x, [(l,) for l in labels],
                                    splits, folds or [None] * n), path)


def test_probe_separable_three_runs(capsys, tmp_path):
    rng = np.random.default_rng(0)
    y = np.arange(60) % 2
    x = 0.2 * rng.normal(size=(60, 4))
    x[:, 0] = np.where(y, 1, -1) * (2 + np.abs(x[:, 0]))
    _write_table(tmp_path / "e.tnsr", x, [str(k) for k in y], ["train"] * 30 + ["valid"] * 15
                 + ["test"] * 15)
    rc, rows, _ = run(capsys, "probe", "--embeddings", tmp_path / "e.tnsr", "--out",
                      tmp_path / "r.json", "--runs", 3)
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rc == 0 and rep["mean"] == 1.0 and len(rep["runs"]) == 3
    assert rep["mean"] == np.mean(rep["runs"]) and float(rows[1][1]) == 1.0
    assert len((tmp_path / "r.csv").read_text().splitlines()) == 4
    assert (tmp_path / "r.png").exists()


def test_probe_folds(capsys, tmp_path):
    rng = np.random.default_rng(1)
    y = np.arange(45) % 3
    x = np.eye(3)[y] + 0.8 * rng.normal(size=(45, 3))
    _write_table(tmp_path / "e.tnsr", x, [str(k) for k in y], [None] * 45,
                 [int(f) for f in np.arange(45) % 3 + 1])
    rc, _, _ = run(capsys, "probe", "--embeddings", tmp_path / "e.tnsr", "--out",
                   tmp_path / "r.json", "--runs", 1, "--probe-lr", 0.01, "--no-figures")
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rc == 0 and sorted(rep["folds"]) == ["1", "2", "3"]
    by_hand = sum(rep["folds"][k]["runs"][0] for k in "123") / 3
    assert rep["mean"] == pytest.approx(by_hand, abs=1e-15)


# -- augment --------------------------------------------------------------------------


@pytest.mark.parametrize("tag", sorted(CHAINS))
def test_augment_matches_golden(capsys, tmp_path, tag):
    out = tmp_path / "o.tnsr"
    rc, _, _ = run(capsys, "augment", "--input", GOLDEN / "input.tnsr", "--out", out,
                   "--chain", CHAINS[tag], "--seed", 42, "--no-figures")
    assert rc == 0
    assert out.read_bytes() == (GOLDEN / f"augment_{tag}.tnsr").read_bytes()


def test_golden_still_matches_library():
    x = tnsr.load(GOLDEN / "input.tnsr")["spec"]
    for tag, chain in CHAINS.items():
        stored = tnsr.load(GOLDEN / f"augment_{tag}.tnsr")
        fresh = expected(x, chain)
        for k in ("v", "v_prime"):
            np.testing.assert_array_equal(stored[k], fresh[k].astype(np.float32))


def test_augment_none_is_double_normalization(capsys, tmp_path):
    x = tnsr.load(GOLDEN / "input.tnsr")["spec"].astype(np.float64)
    stats = data.corpus_stats_from_arrays(list(x)).norm_stats()
    run(capsys, "augment", "--input", GOLDEN / "input.tnsr", "--out", tmp_path / "o.tnsr",
        "--chain", "none")
    got = tnsr.load(tmp_path / "o.tnsr")
    want = aug.post_norm(np.stack([aug.pre_norm(s, stats) for s in x]))
    np.testing.assert_allclose(got["v"], want, atol=1e-6)
    np.testing.assert_array_equal(got["v"], got["v_prime"])
    assert (tmp_path / "o.png").exists()


def test_augment_bad_chain(capsys, tmp_path):
    rc, _, err = run(capsys, "augment", "--input", GOLDEN / "input.tnsr", "--out",
                     tmp_path / "o.tnsr", "--chain", "rrc,wobble")
    assert rc == 2 and "wobble" in err


def test_console_script(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "byola.cli", "synth", "--out", str(tmp_path),
                           "--print-config"], capture_output=True, text=True)
    assert proc.returncode == 0 and "seed:" in proc.stdout


def test_stats_dump_feeds_augment(capsys, corpus, tmp_path):
    rc, _, _ = run(capsys, "stats", "--manifest", corpus, "--out", tmp_path / "s.json",
                   "--dump-dir", tmp_path / "dump", "--no-figures")
    m = data.read_manifest(corpus)
    dump = tmp_path / "dump" / (m.rows[0].path + ".tnsr")
    spec = tnsr.load(dump)
    assert rc == 0 and list(spec) == ["logmel"] and spec["logmel"].shape[0] == 64
    doc = json.loads((tmp_path / "s.json").read_text())
    rc, rows, _ = run(capsys, "augment", "--input", dump, "--out", tmp_path / "v.tnsr",
                      "--mu", doc["mu"], "--sigma", doc["sigma"], "--no-figures")
    assert rc == 0 and rows[1][3] == "1x" + "x".join(map(str, spec["logmel"].shape))
