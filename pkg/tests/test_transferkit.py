import json

import numpy as np
import pytest
import torch

from tsfm import transferkit as T
from tsfm.checkpoint import Checkpoint
from tsfm.errors import ArchitectureMismatch, PlanStale
from tsfm.model import POS_EMBED, TSFM, build, preset
from tsfm.synthetic import in_memory_pool, random_spheres
from tsfm.transferkit import FinetuneBudget


@pytest.fixture(scope="module")
def source():
    model = build(preset("toy", num_classes=1), seed=0)
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=g))  # make every tensor non-trivial
    return Checkpoint.from_model(model, epoch=5)


def _state(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def test_identity_surgery(source):
    model, plan = T.transfer(source, source.config, seed=3)
    assert plan.interpolated == [] and plan.reinitialized == []
    assert sorted(plan.copied) == sorted(source.weights)
    state = model.state_dict()
    assert all(np.array_equal(state[k].numpy(), source.weights[k]) for k in source.weights)
    x = torch.randn(2, 1, 16, 16, 32)
    with torch.no_grad():
        assert torch.equal(model(x), source.to_model()(x))


def test_token_grid_change_keeps_cnn(source):
    target = preset("toy", num_classes=3, patch_size=(16, 16, 16))
    model, plan = T.transfer(source, target, seed=1)
    assert plan.interpolated == [(POS_EMBED, (4, 4, 8), (4, 4, 4))]
    assert {n for n, _ in plan.reinitialized} == {"head.weight", "head.bias"}
    assert all(r == "class-count-change" for _, r in plan.reinitialized)
    state = model.state_dict()
    differing = {k for k in state if k in source.weights and (state[k].shape != source.weights[k].shape
                                                               or not np.array_equal(state[k].numpy(), source.weights[k]))}
    assert differing == {POS_EMBED, "head.weight", "head.bias"}
    assert all(T.is_cnn_weight(k) for k in plan.copied if not k.startswith("bottleneck.transformer."))
    assert model(torch.randn(1, 1, 16, 16, 16)).shape == (1, 4, 16, 16, 16)


def test_full_preset_grid_change_plan():
    # shape-only stand-ins: planning never reads values, so nothing is allocated
    full = preset("full16b")
    shapes = T._target_shapes(full)
    ckpt = Checkpoint({k: np.broadcast_to(np.float32(0), s) for k, s in shapes.items()}, full)
    target = preset("full16b", patch_size=(64, 128, 128))
    plan = T.plan_surgery(ckpt, target)
    assert plan.interpolated == [(POS_EMBED, (7, 10, 12), (4, 8, 8))]
    assert plan.reinitialized == []
    assert len(plan.copied) == len(shapes) - 1


def test_partition_covers_target(source):
    for target in (source.config, preset("toy", num_classes=2, patch_size=(16, 32, 32)),
                   preset("toy", num_classes=1, transformer={"layers": 1, "hidden": 16, "heads": 2})):
        plan = T.plan_surgery(source, target)
        names = plan.names()
        assert len(names) == len(set(names))
        assert set(names) == set(T._target_shapes(target))
        for n in plan.copied:
            assert tuple(source.weights[n].shape) == tuple(plan.shapes[n])


def test_changed_transformer_width_reinitializes_transformer(source):
    target = preset("toy", num_classes=1, transformer={"layers": 1, "hidden": 16, "heads": 2})
    plan = T.plan_surgery(source, target)
    assert all(n.startswith("bottleneck.transformer.") for n, _ in plan.reinitialized)
    assert {r for _, r in plan.reinitialized} == {"shape-incompatible"}
    assert {"head.weight", "head.bias"} <= set(plan.copied)  # class count unchanged


@pytest.mark.parametrize("change", [dict(num_stages=4, blocks_per_stage=(1, 1, 1, 1), patch_size=(16, 16, 32)),
                                    dict(base_channels=4), dict(blocks_per_stage=(1, 2, 1))])
def test_architecture_mismatch(source, change):
    with pytest.raises(ArchitectureMismatch):
        T.plan_surgery(source, preset("toy", num_classes=1, **change))


def test_plan_stale(source):
    plan = T.plan_surgery(source, preset("toy", num_classes=1, patch_size=(16, 16, 16)))
    with pytest.raises(PlanStale):
        T.apply_surgery(plan, source, build(preset("toy", num_classes=2, patch_size=(16, 16, 16))))


def test_constant_pos_embed_stays_constant():
    pe = np.full((1, 4 * 4 * 8, 6), 0.37, np.float32)
    out = T.interpolate_pos_embed(pe, (4, 4, 8), (7, 3, 5))
    assert out.shape == (1, 105, 6)
    assert np.all(out == np.float32(0.37))
    assert out.mean(axis=1) == pytest.approx(pe.mean(axis=1), abs=1e-6)


def test_ramp_pos_embed_linear_interpolants():
    pe = np.arange(4, dtype=np.float32).reshape(1, 4, 1)
    out = T.interpolate_pos_embed(pe, (1, 1, 4), (1, 1, 8))[0, :, 0]
    # sample sites (i + 0.5) / 2 - 0.5, clamped to [0, 3]
    np.testing.assert_allclose(out, [0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3], atol=1e-7)


def test_surgery_json(source, tmp_path):
    _, plan = T.transfer(source, preset("toy", num_classes=2, patch_size=(16, 16, 16)))
    plan.save(tmp_path / "surgery.json")
    doc = json.loads((tmp_path / "surgery.json").read_text())
    assert set(doc) >= {"copied", "interpolated", "reinitialized"}
    assert doc["interpolated"][0]["old_grid"] == [4, 4, 8] and doc["interpolated"][0]["new_grid"] == [4, 4, 4]
    assert {r["reason"] for r in doc["reinitialized"]} == {"class-count-change"}
    assert plan.to_json() == T.plan_surgery(source, preset("toy", num_classes=2, patch_size=(16, 16, 16))).to_json()


# ---------------------------------------------------------------- fine-tuning


@pytest.fixture(scope="module")
def downstream():
    return in_memory_pool({"down": random_spheres(3, (16, 16, 16), radius=(2.5, 4.0), seed=2)})


def _target():
    return preset("toy", num_classes=1, patch_size=(16, 16, 16))


def test_finetune_zero_epochs_returns_surgery_weights(source, downstream):
    model, _ = T.transfer(source, _target())
    before = _state(model)
    pool, vols = downstream
    ckpt = T.finetune(model, pool, FinetuneBudget(0), volumes=vols)
    assert all(np.array_equal(ckpt.weights[k], before[k].numpy()) for k in before)


def test_finetune_freeze_cnn(source, downstream, tmp_path):
    model, _ = T.transfer(source, _target())
    before = _state(model)
    pool, vols = downstream
    T.finetune(model, pool, FinetuneBudget(1, iters_per_epoch=3), freeze_cnn=True, volumes=vols, out_dir=tmp_path)
    after = model.state_dict()
    cnn = T.cnn_parameter_names(model)
    assert cnn and all(torch.equal(after[n], before[n]) for n in cnn)
    assert not torch.equal(after["head.weight"], before["head.weight"])
    records = [json.loads(line) for line in (tmp_path / "finetune_log.ndjson").read_text().splitlines()]
    assert len(records) == 3 and {r["tag"] for r in records} == {"finetune"}


def test_finetune_deterministic(source, downstream):
    pool, vols = downstream
    runs = []
    for _ in range(2):
        model, _ = T.transfer(source, _target(), seed=4)
        losses = []
        T.finetune(model, pool, FinetuneBudget(2, iters_per_epoch=2), base_config=None, volumes=vols,
                   callbacks=[lambda r, acc=losses: acc.append(r["total"]) if "total" in r else None])
        runs.append(losses)
    assert len(runs[0]) == 4
    assert max(abs(a - b) for a, b in zip(*runs)) <= 1e-6


def test_budget_config():
    cfg = FinetuneBudget(20).train_config()
    assert (cfg.epochs, cfg.iters_per_epoch, cfg.lr0, cfg.momentum) == (20, 250, 1e-3, 0.99)
    with pytest.raises(ValueError):
        FinetuneBudget(-1)


def test_meta_shapes_match_built_model():
    cfg = preset("toy")
    assert T._target_shapes(cfg) == {k: tuple(v.shape) for k, v in TSFM(cfg).state_dict().items()}
