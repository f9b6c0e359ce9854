import numpy as np
import pytest

from scanreid import model as M
from scanreid.data import SyntheticConfig, synthesize
from scanreid.errors import BadMagicError, ChecksumError, TrainingError, TruncatedError, VersionError
from scanreid.losses import bce_with_logit
from scanreid.numkit import LinearLayer
from scanreid.training import (SgdState, TrainConfig, decode_checkpoint, encode_checkpoint, init_model,
                               load_checkpoint, lr_at, save_checkpoint, sgd_step, train)


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 0.001
    assert lr_at(9, cfg) == 0.001
    assert lr_at(10, cfg) == pytest.approx(1e-6, rel=1e-12)
    assert lr_at(20, cfg) == pytest.approx(1e-9, rel=1e-12)
    lrs = [lr_at(e, cfg) for e in range(30)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr0=0)
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lr0": 0.1, "warmup": 3})
    cfg = TrainConfig(variant=6)
    assert cfg.variant == "shared-fc"
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def _scalar_params(w=1.0, b=1.0):
    one = lambda: LinearLayer(np.array([[w]]), np.array([b]))
    return M.ModelParams(one(), one(), one(), one(), "full")


def _grads(params, **named):
    g = {k: np.zeros_like(v) for k, v in params.trainable().items()}
    for k, v in named.items():
        g[k.replace("_", ".")] = np.full_like(g[k.replace("_", ".")], v)
    return g


def test_sgd_hand_example():
    p = _scalar_params()
    cfg = TrainConfig(momentum=0.9, weight_decay=0.1)
    state = SgdState.zeros_like(p)
    sgd_step(p, _grads(p, fc0_weight=0.1, fc0_bias=0.1), state, 0.5, cfg)
    assert p.fc0.weight[0, 0] == pytest.approx(0.9, abs=1e-15)
    assert state.velocity["fc0.weight"][0, 0] == pytest.approx(0.2, abs=1e-15)
    # biases are exempt from weight decay
    assert p.fc0.bias[0] == pytest.approx(0.95, abs=1e-15)


def test_sgd_zero_lr_accumulates_velocity():
    p = _scalar_params()
    state = SgdState.zeros_like(p)
    sgd_step(p, _grads(p, fc1_weight=0.3), state, 0.0, TrainConfig())
    assert p.fc1.weight[0, 0] == 1.0
    assert state.velocity["fc1.weight"][0, 0] == pytest.approx(0.3 + 1e-4)


def test_sgd_plain_gradient_descent():
    p = _scalar_params()
    sgd_step(p, _grads(p, fc3_weight=0.5), SgdState.zeros_like(p), 0.2,
             TrainConfig(momentum=0.0, weight_decay=0.0))
    assert p.fc3.weight[0, 0] == pytest.approx(0.9, abs=1e-15)


def test_sgd_rejects_nonfinite():
    p = _scalar_params()
    g = _grads(p, fc0_weight=np.nan)
    with pytest.raises(TrainingError, match="fc0.weight"):
        sgd_step(p, g, SgdState.zeros_like(p), 0.1, TrainConfig())
    assert p.fc0.weight[0, 0] == 1.0


def _pair_bce(params, X, Y, label):
    return M.batch_loss(params, [(X[None], Y[None], np.array([label]))], [], None, 0.0,
                        want_grads=False).bce


def test_single_step_decreases_bce():
    cfg = TrainConfig(weight_decay=0.0, lambda_id=0.0, momentum=0.9)
    for seed in range(50):
        rng = np.random.default_rng(seed)
        p = M.ModelParams.init(8, 6, "full", rng)
        X, Y = rng.standard_normal((5, 8)), rng.standard_normal((4, 8))
        label = int(rng.integers(2))
        before = _pair_bce(p, X, Y, label)
        grads = M.batch_loss(p, [(X[None], Y[None], np.array([label]))], [], None, 0.0).grads
        sgd_step(p, grads, SgdState.zeros_like(p), 1e-4, cfg)
        assert _pair_bce(p, X, Y, label) < before, seed


def test_single_pair_convergence():
    rng = np.random.default_rng(0)
    p = M.ModelParams.init(8, 6, "full", rng)
    X, Y = rng.standard_normal((5, 8)), rng.standard_normal((5, 8)) + 2.0
    cfg = TrainConfig(weight_decay=0.0, lambda_id=0.0, momentum=0.0)
    state = SgdState.zeros_like(p)
    losses = []
    for _ in range(100):
        out = M.batch_loss(p, [(X[None], Y[None], np.array([0]))], [], None, 0.0)
        losses.append(out.bce)
        sgd_step(p, out.grads, state, 0.05, cfg)
    warm = losses[10:]
    assert all(b <= a for a, b in zip(warm, warm[1:]))
    assert losses[-1] < 0.1


def _tiny_data(seed=0, n_ids=6):
    return synthesize(SyntheticConfig(n_identities=n_ids, n_cameras=2, frames_per_sequence=20,
                                      feature_dim=8, seed=seed))


def _tiny_cfg(**kw):
    base = dict(epochs=2, proj_dim=6, ids_per_batch=4, lr0=0.01, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_epochs_returns_init():
    ds = _tiny_data()
    cfg = _tiny_cfg(epochs=0)
    params, history = train(ds, cfg)
    ref = init_model(ds.feature_dim, cfg, np.random.default_rng(cfg.seed))
    assert history == []
    assert encode_checkpoint(params) == encode_checkpoint(ref)


def test_training_is_deterministic(tmp_path):
    ds = _tiny_data()
    cfg = _tiny_cfg()
    a, ha = train(ds, cfg)
    b, hb = train(ds, cfg)
    save_checkpoint(tmp_path / "a.scnc", a, cfg)
    save_checkpoint(tmp_path / "b.scnc", b, cfg)
    assert (tmp_path / "a.scnc").read_bytes() == (tmp_path / "b.scnc").read_bytes()
    assert ha == hb
    c, _ = train(ds, _tiny_cfg(seed=4))
    assert encode_checkpoint(c, cfg) != encode_checkpoint(a, cfg)


def test_training_reduces_loss():
    ds = _tiny_data()
    _, history = train(ds, _tiny_cfg(epochs=8, batches_per_epoch=6, lr_step=100))
    assert history[-1].bce < history[0].bce


def test_training_callback_and_history_fields():
    ds = _tiny_data()
    seen = []
    _, history = train(ds, _tiny_cfg(), callback=lambda p, s: seen.append(s.epoch))
    assert seen == [0, 1]
    assert all(0 <= h.accuracy <= 1 and h.bce > 0 and h.oim > 0 for h in history)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    for variant in M.VARIANTS:
        p = M.ModelParams.init(7, 5, variant, rng)
        cfg = TrainConfig(variant=variant, seed=11)
        path = tmp_path / f"{variant}.scnc"
        save_checkpoint(path, p, cfg)
        q, cfg2 = load_checkpoint(path)
        assert cfg2 == cfg and q.variant == p.variant
        assert encode_checkpoint(q, cfg2) == path.read_bytes()
        X, Y = rng.standard_normal((4, 7)), rng.standard_normal((3, 7))
        assert M.pair_logits(p, X, Y) == M.pair_logits(q, X, Y)


def test_checkpoint_errors():
    blob = encode_checkpoint(M.ModelParams.init(4, 3, "full"), TrainConfig())
    with pytest.raises(BadMagicError):
        decode_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(VersionError):
        decode_checkpoint(blob[:4] + (9).to_bytes(4, "little") + blob[8:])
    with pytest.raises(TruncatedError):
        decode_checkpoint(blob[:60])
    bad = bytearray(blob)
    bad[30] ^= 0x01
    with pytest.raises(ChecksumError):
        decode_checkpoint(bytes(bad))
