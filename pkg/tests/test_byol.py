import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from byola import augment as aug
from byola import byol, data, tnsr
from byola import tensor as T
from byola.encoder import EncoderConfig
from byola.errors import ContractViolation, VersionError
from byola.tensor import Tensor

from gradtrials import tiny_state

TINY_ENC = EncoderConfig(channels=4, mlp_hidden=16, n_mels=64)
TINY_TRAIN = byol.TrainConfig(batch_size=8, epochs=1, proj_hidden=32, proj_dim=8,
                              unit_frames=16, lr=1e-3, seed=0)


def test_loss_examples(f64):
    q = Tensor(np.array([[1.0, 0.0], [0.0, 2.0]]))
    assert byol.byol_loss(q, q.data).item() == pytest.approx(0.0, abs=1e-15)
    assert byol.byol_loss(q, np.array([[0.0, 3.0], [1.0, 0.0]])).item() == pytest.approx(2.0)
    assert byol.byol_loss(q, -q.data).item() == pytest.approx(4.0)


def test_loss_zero_row_is_finite(f64):
    q = Tensor(np.zeros((1, 3)), requires_grad=True)
    loss = byol.byol_loss(q, np.ones((1, 3)))
    assert loss.item() == pytest.approx(2.0)
    loss.backward()
    assert np.all(np.isfinite(q.grad))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(1e-3, 1e3))
def test_loss_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    q, z = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    with T.default_dtype(np.float64):
        a = byol.byol_loss(Tensor(q), z).item()
        b = byol.byol_loss(Tensor(c * q), z).item()
    assert a == pytest.approx(b, abs=1e-12)
    assert 0.0 <= a <= 4.0


def test_target_gets_no_gradient(f64):
    state = tiny_state(0)
    v = Tensor(np.random.default_rng(0).normal(size=(4, 1, 8, 8)))
    loss = byol.symmetric_loss(v, v, state)
    loss.backward()
    assert all(p.grad is None for p in state.target.parameters())
    assert all(not p.requires_grad for p in state.target.parameters())
    assert all(p.grad is not None for p in state.online.parameters())
    assert 0.0 <= loss.item() <= 8.0


def test_target_has_no_predictor():
    state = tiny_state(0)
    assert state.target.predictor is None
    assert not any(k.startswith("predictor.") for k in state.target.state_dict())


def test_symmetric_terms_equal_with_identity_predictor(f64):
    state = tiny_state(1)
    v = Tensor(np.random.default_rng(1).normal(size=(4, 1, 8, 8)))
    state.online.train()
    state.online(v)  # populate running statistics
    state._sync_target()
    state.online.predictor = None
    term = byol.byol_loss(state.online.train(False)(v), byol.target_projection(state, v, "eval"))
    total = byol.symmetric_loss(v, v, state, mode="eval")
    assert total.item() == 2 * term.item()


def test_ema_cases(f64):
    state = tiny_state(2)
    online = state.online.state_dict()
    for p in state.online.parameters():
        p.data[...] = 1.0
    for p in state.target.parameters():
        p.data[...] = 0.0
    state.tau = 0.99
    byol.ema_update(state)
    for p in state.target.parameters():
        np.testing.assert_allclose(p.data, 0.01, rtol=1e-12)
    before = {k: v.copy() for k, v in state.target.state_dict().items()}
    state.tau = 1.0
    byol.ema_update(state)
    for k, v in state.target.state_dict().items():
        np.testing.assert_array_equal(v, before[k])
    state.tau = 0.0
    byol.ema_update(state)
    on = state.online.state_dict()
    for k, v in state.target.state_dict().items():
        np.testing.assert_array_equal(v, on[k])
    assert online  # silence unused


def test_ema_tau_out_of_range():
    state = tiny_state(0)
    state.tau = 1.5
    with pytest.raises(ContractViolation):
        byol.ema_update(state)


def test_ema_copies_running_stats():
    state = tiny_state(3)
    for _, buf in state.online.named_buffers():
        buf[...] = 2.0
    state.tau = 0.5
    byol.ema_update(state)
    target = dict(state.target.named_buffers())
    assert target["encoder.conv1.bn.num_batches_tracked"][0] == 2.0
    np.testing.assert_allclose(target["encoder.conv1.bn.running_mean"], 1.0)
    np.testing.assert_allclose(target["encoder.conv1.bn.running_var"], 1.5)


def test_train_step_target_lags_online():
    state = tiny_state(4)
    rng = np.random.default_rng(0)
    v = rng.normal(size=(4, 8, 8)).astype(np.float32)
    vp = rng.normal(size=(4, 8, 8)).astype(np.float32)
    byol.train_step(state, v, vp)
    online = dict(state.online.named_parameters())
    gap = max(np.abs(p.data - online[k].data).max() for k, p in state.target.named_parameters())
    assert gap > 0
    assert state.step == 1 and state.optimizer.step_count == 1


def test_loss_reproducible_bitwise():
    vals = []
    for _ in range(2):
        state = tiny_state(5)
        rng = np.random.default_rng(0)
        v = rng.normal(size=(4, 8, 8)).astype(np.float32)
        vals.append([byol.train_step(state, v, v[::-1].copy()) for _ in range(3)])
    assert vals[0] == vals[1]


def test_default_heads_geometry():
    cfg = byol.TrainConfig()
    assert (cfg.proj_hidden, cfg.proj_dim, cfg.lr, cfg.tau, cfg.batch_size) == (4096, 256, 1e-4, 0.99, 256)


def _specs(n=24, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.normal(-5, 2, size=(64, 20)) for _ in range(n)]


def test_zero_epochs_checkpoint_equals_init(tmp_path):
    cfg = byol.TrainConfig(**{**TINY_TRAIN.__dict__, "epochs": 0})
    res = byol.pretrain(_specs(), TINY_ENC, cfg, out_dir=tmp_path)
    saved = tnsr.load(tmp_path / "checkpoint.tnsr")
    init = byol.ModelState(TINY_ENC, cfg).state_dict()
    assert list(saved) == list(init)
    for k in init:
        np.testing.assert_array_equal(saved[k], np.asarray(init[k], np.float32))
    assert res.losses == []


def test_checkpoint_roundtrip_and_log(tmp_path):
    res = byol.pretrain(_specs(), TINY_ENC, TINY_TRAIN, out_dir=tmp_path)
    state, meta = byol.load_checkpoint(tmp_path / "checkpoint.tnsr")
    assert meta["step"] == 3 and meta["epoch"] == 1 and meta["seed"] == 0
    assert set(meta["norm"]) == {"mu", "sigma"}
    for k, v in res.state.state_dict().items():
        np.testing.assert_array_equal(state.state_dict()[k], np.asarray(v, np.float32))
    keys = list(tnsr.load(tmp_path / "checkpoint.tnsr"))
    assert keys[0].startswith("online.encoder.conv1")
    assert {k.split(".")[0] for k in keys} == {"online", "target", "adam"}
    rows = list(csv.reader((tmp_path / "train_log.csv").open()))
    assert rows[0] == ["step", "loss", "lr", "tau"] and len(rows) == 4


def test_incompatible_checkpoint_version(tmp_path):
    byol.pretrain(_specs(8), TINY_ENC, byol.TrainConfig(**{**TINY_TRAIN.__dict__, "epochs": 0}),
                  out_dir=tmp_path)
    meta_file = byol.meta_path(tmp_path / "checkpoint.tnsr")
    meta = json.loads(meta_file.read_text())
    meta["format_version"] = 99
    meta_file.write_text(json.dumps(meta))
    with pytest.raises(VersionError):
        byol.load_checkpoint(tmp_path / "checkpoint.tnsr")


def test_max_steps_limits_training():
    cfg = byol.TrainConfig(**{**TINY_TRAIN.__dict__, "epochs": 10, "max_steps": 4})
    res = byol.pretrain(_specs(), TINY_ENC, cfg)
    assert len(res.losses) == 4 and res.state.step == 4


def test_toy_run_loss_decreases(tmp_path):
    spec = data.SynthSpec(clips_per_class=16, seed=1)
    manifest = data.synth_dataset(spec, tmp_path)
    cfg = byol.TrainConfig(batch_size=16, epochs=100, max_steps=50, proj_hidden=64, proj_dim=16,
                           unit_frames=32, lr=1e-3, seed=0)
    res = byol.pretrain_manifest(manifest, EncoderConfig(channels=8, mlp_hidden=32), cfg)
    assert len(res.losses) == 50
    assert np.mean(res.losses[-10:]) < np.mean(res.losses[:10])
