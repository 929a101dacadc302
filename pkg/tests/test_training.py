import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sair.data import make_batch, toy_sample
from sair.errors import ConfigurationError, DatasetIOError, TrainingDivergedError
from sair.model import AblationFlags, build_model
from sair.training import (
    TrainState,
    derive_seeds,
    epoch_losses,
    init_state,
    l1_loss,
    load_state,
    lr_at,
    make_optimizer,
    read_checkpoint,
    run_training,
    save_checkpoint,
    train_step,
)
from tests.helpers import tiny_config


@pytest.mark.parametrize("epoch", range(0, 401))
def test_lr_schedule_closed_form(epoch):
    assert lr_at(epoch, 1e-4, 100) == 1e-4 * 0.5 ** (epoch // 100)


def test_lr_schedule_milestones():
    assert lr_at(99, 1e-4) == 1e-4
    assert lr_at(100, 1e-4) == 5e-5
    assert lr_at(199, 1e-4) == 5e-5
    assert lr_at(200, 1e-4) == 2.5e-5


class TestLoss:
    def test_perfect(self):
        x = torch.rand(2, 10, 3)
        assert l1_loss(x, x).item() == 0

    def test_offset(self):
        x = torch.rand(2, 10, 3, dtype=torch.float64)
        assert l1_loss(x + 0.1, x).item() == pytest.approx(0.1, abs=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_permutation_invariant(self, seed):
        g = torch.Generator().manual_seed(seed)
        p, t = torch.rand(2, 50, 3, generator=g, dtype=torch.float64), torch.rand(2, 50, 3, generator=g, dtype=torch.float64)
        perm = torch.randperm(50, generator=g)
        assert l1_loss(p[:, perm], t[:, perm]).item() == pytest.approx(l1_loss(p, t).item(), abs=1e-15)

    def test_model_loss_invariant_to_query_order(self):
        m = build_model(AblationFlags(use_semantic=False), app_width=4, app_resblocks=1, mlp_hidden=16, mlp_depth=2,
                        sem_channels=4).eval()
        s = toy_sample(0, 16)
        b = make_batch([s], [torch.zeros(16, 16)], 64, np.random.default_rng(0))
        perm = torch.randperm(64)
        with torch.no_grad():
            a = l1_loss(m(b.images, b.masks, b.coords), b.targets)
            c = l1_loss(m(b.images, b.masks, b.coords[:, perm]), b.targets[:, perm])
        assert a.item() == pytest.approx(c.item(), rel=1e-6)


def test_ablations_share_initial_weights():
    cfg = tiny_config()
    full = init_state(cfg).model
    nfs = init_state(cfg.replace(**{"model.use_sir": False})).model
    for part in ("app_encoder", "air", "sem_encoder"):
        a, b = getattr(full, part).state_dict(), getattr(nfs, part).state_dict()
        assert a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a), part
    other = init_state(cfg.replace(seed=cfg.seed + 1)).model
    assert not torch.equal(full.air.mlp.layers[0].weight, other.air.mlp.layers[0].weight)


def test_seed_streams_distinct_and_stable():
    a = derive_seeds(0)
    assert a == derive_seeds(0)
    assert len(set(a.values())) == len(a)
    assert a != derive_seeds(1)


def test_single_image_smoke():
    torch.manual_seed(0)
    m = build_model(AblationFlags(use_semantic=False), app_width=16, mlp_hidden=64, sem_channels=8)
    s = toy_sample(0, 32)
    opt = torch.optim.Adam(m.trainable_parameters(), lr=1e-3, betas=(0.9, 0.999))
    rng = np.random.default_rng(0)
    losses = []
    for _ in range(200):
        b = make_batch([s], [torch.zeros(32, 32)], 1024, rng)
        loss = l1_loss(m(b.images, b.masks, b.coords), b.targets)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert losses[-1] <= 0.5 * losses[0]


class TestState:
    def test_frozen_encoder_excluded(self):
        cfg = tiny_config()
        state = init_state(cfg)
        ids = {id(p) for g in state.optimizer.param_groups for p in g["params"]}
        assert not any(id(p) in ids for p in state.model.sem_encoder.parameters())
        assert all(id(p) in ids for p in state.model.air.parameters())

    def test_trainable_surrogate_included(self):
        cfg = tiny_config(**{"model.freeze_semantic_encoder": False})
        state = init_state(cfg)
        ids = {id(p) for g in state.optimizer.param_groups for p in g["params"]}
        assert all(id(p) in ids for p in state.model.sem_encoder.parameters())

    def test_adam_betas(self):
        state = init_state(tiny_config())
        assert state.optimizer.param_groups[0]["betas"] == (0.9, 0.999)

    def test_diverged(self, tmp_path):
        state = init_state(tiny_config())
        s = toy_sample(0, 16)
        b = make_batch([s], [torch.zeros(16, 16)], 16, np.random.default_rng(0))
        b.targets[0, 0, 0] = float("nan")
        with pytest.raises(TrainingDivergedError) as err:
            train_step(state, b, dump_dir=tmp_path)
        assert err.value.dump_path.exists()


class TestCheckpoint:
    def test_optimizer_round_trip(self, tmp_path):
        cfg = tiny_config()
        state = init_state(cfg)
        s = toy_sample(0, 16)
        for k in range(3):
            train_step(state, make_batch([s], [torch.zeros(16, 16)], 32, np.random.default_rng(k)))
        path = save_checkpoint(state, tmp_path / "c.pt")
        back = load_state(path, cfg)
        a, b = state.optimizer.state_dict(), back.optimizer.state_dict()
        assert a["param_groups"] == b["param_groups"]
        assert a["state"].keys() == b["state"].keys()
        for k in a["state"]:
            for name, v in a["state"][k].items():
                assert torch.equal(v, b["state"][k][name])
        for (n1, p1), (n2, p2) in zip(state.model.state_dict().items(), back.model.state_dict().items()):
            assert n1 == n2 and torch.equal(p1, p2)
        assert back.step == 3 and back.loss_history == state.loss_history

    def test_hash_mismatch(self, tmp_path):
        cfg = tiny_config()
        path = save_checkpoint(init_state(cfg), tmp_path / "c.pt")
        with pytest.raises(ConfigurationError):
            load_state(path, cfg.replace(**{"optim.lr": 0.5}))

    def test_missing_and_foreign(self, tmp_path):
        with pytest.raises(DatasetIOError):
            read_checkpoint(tmp_path / "none.pt")
        torch.save({"hello": 1}, tmp_path / "x.pt")
        with pytest.raises(ConfigurationError):
            read_checkpoint(tmp_path / "x.pt")


class TestRun:
    def test_outputs(self):
        cfg = tiny_config()
        final = run_training(cfg)
        out = final.parent
        assert final.name == "final.pt"
        assert out.name == f"tiny-{cfg.hash()[:10]}"
        assert (out / "ckpt-epoch0001.pt").exists()
        recs = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
        assert len(recs) == 4 and {"step", "epoch", "loss", "lr"} <= recs[0].keys()
        assert json.loads((out / "config.json").read_text())["name"] == "tiny"
        payload = read_checkpoint(final)
        assert payload["config_hash"] == cfg.hash() and payload["epoch"] == 2

    def test_resume_replays_trace(self):
        cfg = tiny_config(**{"optim.epochs": 3})
        full = run_training(cfg)
        trace = epoch_losses(full.parent)
        steps = [json.loads(l)["loss"] for l in (full.parent / "metrics.jsonl").read_text().splitlines()]
        resumed = run_training(cfg, resume=full.parent / "ckpt-epoch0001.pt")
        assert epoch_losses(resumed.parent) == trace
        again = [json.loads(l)["loss"] for l in (resumed.parent / "metrics.jsonl").read_text().splitlines()]
        assert again == steps

    def test_max_epochs_writes_last(self):
        last = run_training(tiny_config(), max_epochs=1)
        assert last.name == "last.pt" and read_checkpoint(last)["epoch"] == 1

    def test_resume_mismatch(self):
        ck = run_training(tiny_config(), max_epochs=1)
        with pytest.raises(ConfigurationError):
            run_training(tiny_config(**{"optim.batch_size": 2}), resume=ck)
