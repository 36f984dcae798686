import json
import math

import numpy as np
import pytest
import torch

from tsfm import losstrain as L
from tsfm.checkpoint import Checkpoint, load_checkpoint, load_into, save_checkpoint
from tsfm.errors import AllClassesMasked, DivergedLoss, FingerprintMismatch, IncompatibleVersion, NonFiniteGradient
from tsfm.model import build, preset
from tsfm.synthetic import in_memory_pool, sphere_volume


def _instance(seed=0, shape=(2, 3, 4, 4, 4)):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(shape, generator=g, dtype=torch.float64)
    labels = torch.randint(0, shape[1], (shape[0],) + shape[2:], generator=g)
    return logits, L.one_hot(labels, shape[1]).double()


# ---------------------------------------------------------------- BCE


def test_bce_zero_logits_is_ln2():
    logits, target = _instance()
    mask = np.array([False, True, False])
    assert abs(L.masked_bce(torch.zeros_like(logits), target, mask).item() - math.log(2)) <= 1e-9


def test_bce_saturation():
    z = torch.full((1, 2, 2, 2, 2), 40.0, dtype=torch.float64)
    t = torch.ones_like(z)
    loss = L.masked_bce(z, t, [True, True])
    assert torch.isfinite(loss) and loss.item() <= 1e-12


def test_masked_out_channels_are_ignored_exactly():
    logits, target = _instance(1)
    mask = np.array([[True, False, True], [True, True, False]])
    ref = L.total_loss(logits, target, mask)
    rng = np.random.default_rng(0)
    for _ in range(5):
        noisy = logits.clone()
        noisy[0, 1] += torch.from_numpy(rng.normal(0, 50, size=(4, 4, 4)))
        noisy[1, 2] = torch.from_numpy(rng.normal(0, 1e6, size=(4, 4, 4)))
        got = L.total_loss(noisy, target, mask)
        assert got.total.item() == ref.total.item()
        assert got.bce.item() == ref.bce.item() and got.dice.item() == ref.dice.item()


def test_all_masked_warns_and_returns_zero():
    logits, target = _instance()
    with pytest.warns(AllClassesMasked):
        out = L.total_loss(logits, target, [False, False, False])
    assert out.total.item() == 0 and out.active_class_count == 0


# ---------------------------------------------------------------- Dice


def _logit(p):
    # probabilities of exactly 0 and 1 through a saturated sigmoid
    return torch.tensor([{1.0: 1e4, 0.0: -1e4}[v] for v in p], dtype=torch.float64)


def test_batch_dice_fixture_one_third():
    z = _logit([1, 0]).reshape(1, 1, 1, 1, 2)
    t = torch.tensor([1.0, 1.0], dtype=torch.float64).reshape(1, 1, 1, 1, 2)
    assert L.batch_dice_loss(z, t, [True], eps=0.0).item() == pytest.approx(1 / 3, abs=1e-15)


def test_batch_dice_fixed_points():
    t = torch.tensor([1.0, 0.0, 1.0, 0.0], dtype=torch.float64).reshape(1, 1, 1, 2, 2)
    assert L.batch_dice_loss(_logit([1, 0, 1, 0]).reshape(t.shape), t, [True]).item() == pytest.approx(0, abs=1e-15)
    empty = torch.zeros_like(t)
    assert L.batch_dice_loss(_logit([0, 0, 0, 0]).reshape(t.shape), empty, [True]).item() == pytest.approx(0, abs=1e-12)


def test_batch_dice_pools_over_the_batch():
    # per-sample Dice would average 0 and 1; pooled Dice sees 2*1/(1+2)
    z = torch.stack([_logit([1, 0]), _logit([0, 0])]).reshape(2, 1, 1, 1, 2)
    t = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64).reshape(2, 1, 1, 1, 2)
    assert L.batch_dice_loss(z, t, [True], eps=0.0).item() == pytest.approx(1 - 2 / 3, abs=1e-15)


def test_dice_bounds_and_monotone():
    logits, target = _instance(2)
    mask = [True, True, True]
    base = L.batch_dice_loss(logits, target, mask).item()
    assert 0 <= base <= 1
    tp = (target[:, 1] > 0)
    bumped = logits.clone()
    bumped[:, 1][tp] += 0.5
    assert L.batch_dice_loss(bumped, target, mask).item() <= base


def _straight_line_total(logits, target, mask, eps):
    z, t = logits.numpy(), target.numpy()
    b, c = z.shape[:2]
    bce_terms = []
    for i in range(b):
        for k in range(c):
            if mask[i][k]:
                zz, tt = z[i, k].ravel(), t[i, k].ravel()
                bce_terms.extend(np.maximum(zz, 0) - zz * tt + np.log1p(np.exp(-np.abs(zz))))
    dices = []
    for k in range(c):
        rows = [i for i in range(b) if mask[i][k]]
        if rows:
            p = np.concatenate([1 / (1 + np.exp(-z[i, k].ravel())) for i in rows])
            tt = np.concatenate([t[i, k].ravel() for i in rows])
            dices.append(1 - (2 * (p * tt).sum() + eps) / (p.sum() + tt.sum() + eps))
    return np.mean(bce_terms) + np.mean(dices)


@pytest.mark.parametrize("seed", range(4))
def test_total_loss_straight_line_oracle(seed):
    logits, target = _instance(seed, (2, 4, 4, 4, 4))
    mask = np.random.default_rng(seed).random((2, 4)) > 0.3
    mask[0, 0] = True
    out = L.total_loss(logits, target, mask, L.TrainConfig())
    assert abs(out.total.item() - _straight_line_total(logits, target, mask, 1e-5)) <= 1e-6
    assert out.total.item() == pytest.approx(out.bce.item() + out.dice.item(), abs=1e-15)


def test_total_loss_perfect_prediction():
    t = torch.zeros(1, 2, 2, 2, 2, dtype=torch.float64)
    t[0, 1, 0] = 1
    t[0, 0] = 1 - t[0, 1]
    z = (2 * t - 1) * 1e4
    out = L.total_loss(z, t, [True, True])
    assert out.dice.item() == pytest.approx(0, abs=1e-12)
    assert out.total.item() == pytest.approx(out.bce.item(), abs=1e-12)


# ---------------------------------------------------------------- schedule and optimizer


def test_poly_lr_values():
    cfg = L.TrainConfig()
    assert L.poly_lr(0, cfg) == 1e-3
    assert L.poly_lr(1000, cfg) == 0
    assert abs(L.poly_lr(500, cfg) - 5.359e-4) <= 1e-7
    assert abs(L.poly_lr(500, cfg) - 1e-3 * 0.5 ** 0.9) <= 1e-9
    values = [L.poly_lr(e, cfg) for e in range(1001)]
    assert all(a > b for a, b in zip(values, values[1:]))
    with pytest.raises(ValueError):
        L.poly_lr(1001, cfg)


def _nesterov_oracle(w, steps, lr, mu, wd, grad):
    v, seq = 0.0, []
    for _ in range(steps):
        g = grad(w) + wd * w
        v = mu * v + g
        w = w - lr * (g + mu * v)
        seq.append(w)
    return seq


def test_nesterov_first_step_and_sequence():
    w, v = {"w": 1.0}, {"w": 0.0}
    got = []
    for _ in range(20):
        w, v = L.sgd_nesterov_step(w, {"w": w["w"]}, v, 0.1, 0.9, 0.0)
        got.append(w["w"])
    assert got[0] == pytest.approx(0.81, abs=1e-12)
    # by hand: v2 = 0.9*1 + 0.81 = 1.71, w2 = 0.81 - 0.1*(0.81 + 0.9*1.71)
    assert got[1] == pytest.approx(0.5751, abs=1e-12)
    oracle = _nesterov_oracle(1.0, 20, 0.1, 0.9, 0.0, lambda x: x)
    assert max(abs(a - b) for a, b in zip(got, oracle)) <= 1e-12
    # settles monotonically in |w| after a transient
    tail = [abs(x) for x in _nesterov_oracle(1.0, 200, 0.1, 0.9, 0.0, lambda x: x)[100:]]
    assert max(tail) < 1e-3


def test_nesterov_tensor_path_matches_scalar():
    w = {"a": torch.tensor([1.0, -2.0], dtype=torch.float64)}
    v = {"a": torch.zeros(2, dtype=torch.float64)}
    for _ in range(20):
        w, v = L.sgd_nesterov_step(w, {"a": 3 * w["a"]}, v, 0.05, 0.99, 1e-3)
    for i, w0 in enumerate([1.0, -2.0]):
        assert w["a"][i].item() == pytest.approx(_nesterov_oracle(w0, 20, 0.05, 0.99, 1e-3, lambda x: 3 * x)[-1], abs=1e-12)


def test_nesterov_reductions():
    w, _ = L.sgd_nesterov_step({"w": 2.0}, {"w": 0.5}, {"w": 0.0}, 0.1, 0.0, 0.0)
    assert w["w"] == 2.0 - 0.1 * 0.5
    w, v = L.sgd_nesterov_step({"w": 2.0}, {"w": 0.0}, {"w": 0.0}, 0.1, 0.9, 0.0)
    assert w["w"] == 2.0 and v["w"] == 0.0


def test_weight_decay_geometric():
    lr, wd = 0.1, 0.5
    w, v = {"w": 1.0}, {"w": 0.0}
    seq = []
    for _ in range(10):
        w, v = L.sgd_nesterov_step(w, {"w": 0.0}, v, lr, 0.0, wd)
        seq.append(w["w"])
    np.testing.assert_allclose(seq, [(1 - lr * wd) ** k for k in range(1, 11)], rtol=0, atol=1e-15)


def test_nonfinite_gradient_names_weight():
    with pytest.raises(NonFiniteGradient, match="layer.bias"):
        L.sgd_nesterov_step({"layer.bias": np.ones(2)}, {"layer.bias": np.array([1.0, np.nan])},
                            {}, 0.1, 0.9, 0.0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        L.TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        L.TrainConfig.from_mapping({"lr": 0.1})
    assert L.TrainConfig.from_mapping({"epochs": 3}).epochs == 3


# ---------------------------------------------------------------- training loop


@pytest.fixture(scope="module")
def sphere_pool():
    vols = [sphere_volume((16, 16, 32), radius=5.0, seed=s) for s in range(2)]
    return in_memory_pool({"d": vols})


def _short_run(sphere_pool, out_dir=None, **kw):
    pool, vols = sphere_pool
    model = build(preset("toy", num_classes=1), seed=0)
    cfg = L.TrainConfig(**{**dict(epochs=2, iters_per_epoch=3, seed=4), **kw})
    records = []
    ckpt = L.train(model, pool, cfg, callbacks=[records.append], out_dir=out_dir, volumes=vols)
    return model, ckpt, records


def test_train_is_deterministic(sphere_pool, tmp_path):
    _, a, ra = _short_run(sphere_pool, tmp_path / "a")
    _, b, rb = _short_run(sphere_pool, tmp_path / "b")
    la = [r["total"] for r in ra if "total" in r]
    lb = [r["total"] for r in rb if "total" in r]
    assert len(la) == 6
    assert max(abs(x - y) for x, y in zip(la, lb)) <= 1e-6
    assert all(np.array_equal(a.weights[k], b.weights[k]) for k in a.weights)


def test_train_writes_log_and_checkpoints(sphere_pool, tmp_path):
    _, ckpt, records = _short_run(sphere_pool, tmp_path)
    lines = (tmp_path / "train_log.ndjson").read_text().splitlines()
    assert len(lines) == 6
    rec = json.loads(lines[0])
    assert {"epoch", "iter", "lr", "bce", "dice", "total", "wall_ms"} <= set(rec)
    assert rec["lr"] == 1e-3 and json.loads(lines[-1])["lr"] == pytest.approx(1e-3 * 0.5 ** 0.9)
    assert (tmp_path / "latest.tsfm").exists() and (tmp_path / "best.tsfm").exists()
    assert any(r.get("event") == "validation" for r in records)
    assert load_checkpoint(tmp_path / "best.tsfm").best_metric == ckpt.best_metric


def test_train_zero_epochs_returns_init(sphere_pool):
    pool, vols = sphere_pool
    model = build(preset("toy", num_classes=1), seed=9)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    ckpt = L.train(model, pool, L.TrainConfig(epochs=0), volumes=vols)
    assert ckpt.epoch == 0
    assert all(np.array_equal(ckpt.weights[k], before[k].numpy()) for k in before)
    assert all(torch.equal(model.state_dict()[k], before[k]) for k in before)


def test_train_frozen_weights_unchanged(sphere_pool):
    pool, vols = sphere_pool
    model = build(preset("toy", num_classes=1), seed=0)
    frozen = {n for n, _ in model.named_parameters() if n.startswith("stem.")}
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    L.train(model, pool, L.TrainConfig(epochs=1, iters_per_epoch=2, val_every=0), volumes=vols, frozen=frozen)
    after = dict(model.named_parameters())
    assert all(torch.equal(after[n], before[n]) for n in frozen)
    assert not torch.equal(after["head.weight"], before["head.weight"])


def test_train_diverges_on_nan_head(sphere_pool):
    pool, vols = sphere_pool
    model = build(preset("toy", num_classes=1), seed=0)
    with torch.no_grad():
        model.head.bias.fill_(float("nan"))
    with pytest.raises(DivergedLoss):
        L.train(model, pool, L.TrainConfig(epochs=1, iters_per_epoch=3, val_every=0), volumes=vols)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = build(preset("toy"), seed=3)
    ckpt = Checkpoint.from_model(model, epoch=7, best_metric=0.5, note="x")
    save_checkpoint(ckpt, tmp_path / "m.tsfm")
    again = load_checkpoint(tmp_path / "m.tsfm")
    assert again.epoch == 7 and again.best_metric == 0.5 and again.extra == {"note": "x"}
    assert again.config == ckpt.config
    assert list(again.weights) == list(ckpt.weights)
    assert all(np.array_equal(again.weights[k], ckpt.weights[k]) for k in ckpt.weights)
    save_checkpoint(again, tmp_path / "n.tsfm")
    assert (tmp_path / "m.tsfm").read_bytes() == (tmp_path / "n.tsfm").read_bytes()
    restored = again.to_model()
    assert all(torch.equal(restored.state_dict()[k], model.state_dict()[k]) for k in ckpt.weights)


def test_checkpoint_fingerprint_mismatch():
    ckpt = Checkpoint.from_model(build(preset("toy")))
    with pytest.raises(FingerprintMismatch):
        load_into(build(preset("toy", num_classes=3)), ckpt)


def test_checkpoint_into_base_preset_is_rejected():
    ckpt = Checkpoint.from_model(build(preset("toy")))
    with pytest.raises(FingerprintMismatch):
        load_into(build(preset("base")), ckpt)


def test_checkpoint_truncated_and_corrupt(tmp_path):
    path = tmp_path / "m.tsfm"
    save_checkpoint(Checkpoint.from_model(build(preset("toy"))), path)
    raw = path.read_bytes()
    for cut in (10, 40, len(raw) - 4):
        (tmp_path / "t.tsfm").write_bytes(raw[:cut])
        with pytest.raises(IncompatibleVersion):
            load_checkpoint(tmp_path / "t.tsfm")
    (tmp_path / "x.tsfm").write_bytes(raw + b"\0")
    with pytest.raises(IncompatibleVersion):
        load_checkpoint(tmp_path / "x.tsfm")
    (tmp_path / "y.tsfm").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(IncompatibleVersion):
        load_checkpoint(tmp_path / "y.tsfm")
