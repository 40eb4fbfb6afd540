import csv

import numpy as np
import pytest
import torch

from multianim import unbind as ub
from multianim.checkpoint import load_tensors, save_tensors
from multianim.errors import DataIOError, FormatError, InvalidArgumentError, TrainingDivergenceError
from multianim.model import Conditions, EpisodeStore, episode_conditions
from multianim.synthgen import TextVocab
from multianim.trainer import (
    Trainer,
    finetune_trainer,
    inference_config,
    load_model,
    param_checksum,
    report_loss_drop,
    resume,
)


@pytest.fixture
def store(tiny_episodes):
    return EpisodeStore(tiny_episodes)


def test_p_ani_fraction_over_10k_draws(tiny_cfg, store):
    tr = Trainer(tiny_cfg.replace(train={"p_ani": 0.7}), store, "finetune")
    tasks = [tr.draw_task(tr.step_rng(s)) for s in range(10_000)]
    frac = tasks.count("animation") / len(tasks)
    assert 0.685 <= frac <= 0.715


def test_p_ani_one_always_animation(tiny_cfg, store):
    tr = Trainer(tiny_cfg.replace(train={"p_ani": 1.0}), store, "finetune")
    assert all(tr.draw_task(tr.step_rng(s)) == "animation" for s in range(2000))
    tr.run(4)
    assert tr.task_counts == {"animation": 4}


def test_pretrain_is_always_t2v(tiny_cfg, store):
    tr = Trainer(tiny_cfg, store, "pretrain")
    assert all(tr.draw_task(tr.step_rng(s)) == "t2v" for s in range(100))


def test_p_ani_out_of_range_rejected(tiny_cfg):
    with pytest.raises(InvalidArgumentError):
        tiny_cfg.replace(train={"p_ani": 1.2})


def test_unknown_phase_rejected(tiny_cfg, store):
    with pytest.raises(InvalidArgumentError):
        Trainer(tiny_cfg, store, "distill")


def test_frozen_base_checksum_after_1000_steps(tiny_cfg, store):
    cfg = tiny_cfg.replace(data={"frames": 2}, model={"width": 16, "heads": 2}, train={"batch_size": 1})
    tiny = EpisodeStore([e for e in store_episodes(cfg)])
    tr = Trainer(cfg, tiny, "finetune")
    before = param_checksum(tr.model.base_parameters())
    adapters = param_checksum(tr.model.trainable_parameters())
    tr.run(1000)
    assert param_checksum(tr.model.base_parameters()) == before
    assert param_checksum(tr.model.trainable_parameters()) != adapters
    assert tr.step == 1000


def store_episodes(cfg):
    from conftest import tiny_episode

    return [tiny_episode(1 + s % 2, s, seed=s, frames=cfg.data.frames) for s in range(4)]


def test_same_seed_identical_loss_curves(tiny_cfg, store):
    a = Trainer(tiny_cfg, store, "pretrain")
    b = Trainer(tiny_cfg, store, "pretrain")
    la = [r["loss"] for r in a.run(6)]
    lb = [r["loss"] for r in b.run(6)]
    assert la == lb
    assert param_checksum(a.model.base_parameters()) == param_checksum(b.model.base_parameters())
    c = Trainer(tiny_cfg.replace(train={"seed": 9}), store, "pretrain")
    assert [r["loss"] for r in c.run(6)] != la


def test_finetune_trajectory_deterministic(tiny_cfg, store):
    a = Trainer(tiny_cfg, store, "finetune")
    b = Trainer(tiny_cfg, store, "finetune")
    assert [r["loss"] for r in a.run(5)] == [r["loss"] for r in b.run(5)]
    assert param_checksum(a.model.trainable_parameters()) == param_checksum(b.model.trainable_parameters())


@pytest.mark.parametrize("phase", ["pretrain", "finetune"])
def test_save_load_bit_identical(tiny_cfg, store, tmp_path, phase):
    tr = Trainer(tiny_cfg, store, phase)
    tr.run(3)
    path = tr.save(tmp_path / "x.ckpt")
    tensors, meta = load_tensors(path)
    assert meta["phase"] == phase and meta["step"] == 3 and meta["seed"] == tiny_cfg.train.seed
    assert meta["config"] == tiny_cfg.to_dict()
    own = tr.state_tensors()
    assert set(tensors) == set(own)
    for k, v in own.items():
        assert torch.equal(tensors[k], v.to(torch.float32)), k
    back = resume(tiny_cfg, store, path)
    for k, v in back.state_tensors().items():
        assert torch.equal(v, own[k]), k


@pytest.mark.parametrize("phase", ["pretrain", "finetune"])
def test_resume_equivalence_over_10_steps(tiny_cfg, store, tmp_path, phase):
    full = Trainer(tiny_cfg, store, phase)
    full.run(10)
    part = Trainer(tiny_cfg, store, phase)
    part.run(4)
    path = part.save(tmp_path / "mid.ckpt")
    resumed = resume(tiny_cfg, store, path)
    resumed.run(6)
    assert [r["loss"] for r in resumed.history] == [r["loss"] for r in full.history[4:]]
    assert resumed.task_counts == full.task_counts
    a, b = full.state_tensors(), resumed.state_tensors()
    for k in a:
        assert torch.equal(a[k], b[k]), k


def test_mismatched_config_is_format_error(tiny_cfg, store, tmp_path):
    tr = Trainer(tiny_cfg, store, "pretrain")
    path = tr.save(tmp_path / "p.ckpt")
    other = tiny_cfg.replace(model={"width": 64})
    with pytest.raises(FormatError, match="width"):
        resume(other, store, path)
    with pytest.raises(FormatError):
        load_model(other, path)


def test_shape_mismatch_names_tensor(tiny_cfg, store, tmp_path):
    tr = Trainer(tiny_cfg, store, "pretrain")
    tensors = tr.state_tensors()
    tensors["dit.patch_embed.weight"] = torch.zeros(3, 3)
    path = save_tensors(tmp_path / "bad.ckpt", tensors, {"phase": "pretrain", "step": 0, "config": tiny_cfg.to_dict()})
    with pytest.raises(FormatError, match="dit.patch_embed.weight"):
        load_model(tiny_cfg, path)


def test_finetune_requires_pretrain_checkpoint(tiny_cfg, store, tmp_path):
    tr = Trainer(tiny_cfg, store, "finetune")
    path = tr.save(tmp_path / "f.ckpt")
    with pytest.raises(FormatError):
        finetune_trainer(tiny_cfg, store, path)
    with pytest.raises(DataIOError):
        finetune_trainer(tiny_cfg, store, tmp_path / "missing.ckpt")


def test_finetune_starts_from_pretrain_weights(tiny_cfg, store, tmp_path):
    pre = Trainer(tiny_cfg, store, "pretrain")
    pre.run(2)
    path = pre.save(tmp_path / "p.ckpt")
    ft = finetune_trainer(tiny_cfg, store, path)
    # adapters wrap the attention projections, which moves their weights under ".base"
    got = {n.replace(".base.", "."): p for n, p in ft.model.base_parameters().items()}
    want = pre.model.base_parameters()
    assert set(got) == set(want)
    for n in want:
        assert torch.equal(got[n], want[n]), n
    assert ft.step == 0 and ft.phase == "finetune"


def test_t2v_never_reads_condition_data(tiny_cfg, store):
    tr = Trainer(tiny_cfg.replace(train={"p_ani": 0.0}), store, "finetune")
    tr.run(5)
    assert tr.task_counts == {"t2v": 5}
    assert sum(store.access.values()) == 0
    pre = Trainer(tiny_cfg, store, "pretrain")
    pre.run(3)
    assert sum(store.access.values()) == 0


def test_animation_reads_condition_data(tiny_cfg, store):
    tr = Trainer(tiny_cfg.replace(train={"p_ani": 1.0}), store, "finetune")
    tr.run(2)
    assert store.access["reference"] == 2 and store.access["pose"] == 2 and store.access["mask"] == 2


def test_unbind_runs_only_for_training_animation_steps(tiny_cfg, store):
    b = tiny_cfg.train.batch_size
    ub.reset_call_counts()
    t2v = Trainer(tiny_cfg.replace(train={"p_ani": 0.0}), store, "finetune")
    t2v.run(3)
    assert ub.call_counts["pose_unbind"] == 0 and ub.call_counts["feature_unbind"] == 0

    ani = Trainer(tiny_cfg.replace(train={"p_ani": 1.0}), store, "finetune")
    ani.run(2)
    assert ub.call_counts["pose_unbind"] == 2 * b
    assert ub.call_counts["feature_unbind"] == 2 * b

    ub.reset_call_counts()
    model = ani.model.eval()
    d = tiny_cfg.data
    cond = episode_conditions([store_episodes(tiny_cfg)[0]], model.factor, text_len=tiny_cfg.model.text_len)
    model.generate(cond, d.frames, d.height, d.width, steps=2)
    with torch.no_grad():
        x = torch.zeros(1, 48, d.frames, d.height // 4, d.width // 4)
        model.eps(x, torch.tensor([10]), cond, unbind_cfg=tiny_cfg.unbind, rngs=[np.random.default_rng(0)])
    assert sum(ub.call_counts.values()) == 0


def test_lr_schedule_warmup_and_decay(tiny_cfg, store):
    cfg = tiny_cfg.replace(train={"warmup_steps": 10, "pretrain_steps": 100})
    tr = Trainer(cfg, store, "pretrain")
    lrs = [tr.lr_at(s) for s in range(100)]
    assert lrs[0] == pytest.approx(cfg.train.lr_pretrain / 10, rel=0.01)
    assert np.all(np.diff(lrs[:9]) > 0) and np.all(np.diff(lrs[10:]) < 0)
    assert max(lrs) <= cfg.train.lr_pretrain


def test_csv_log_columns(tiny_cfg, store, tmp_path):
    tr = Trainer(tiny_cfg, store, "finetune")
    log = tmp_path / "train_log.csv"
    tr.run(3, log_csv=log)
    tr.run(2, log_csv=log)
    rows = list(csv.reader(log.open()))
    assert rows[0] == ["step", "task", "loss", "lr", "wall_time"]
    assert [int(r[0]) for r in rows[1:]] == [0, 1, 2, 3, 4]
    assert all(r[1] in ("animation", "t2v") for r in rows[1:])
    assert all(np.isfinite(float(r[2])) for r in rows[1:])


def test_divergence_raises_with_step(tiny_cfg, store):
    tr = Trainer(tiny_cfg, store, "pretrain")
    tr.run(2)
    with torch.no_grad():
        tr.model.dit.out.bias.fill_(float("nan"))
    with pytest.raises(TrainingDivergenceError, match="step 2"):
        tr.train_step()


def test_pretrain_loss_drops_by_half(trained):
    assert len(trained["pre"].history) >= 200
    assert report_loss_drop(trained["pre"].history, window=100) >= 0.5


def test_pretrain_samples_not_collapsed(trained):
    cfg = trained["cfg"]
    from multianim.trainer import build_model
    from multianim.checkpoint import load_into

    model = build_model(cfg)
    load_into(model, trained["pre_state"])
    model.eval()
    d = cfg.data
    null = Conditions(text=torch.tensor([TextVocab.null(cfg.model.text_len)] * 4))
    video = model.generate(null, d.frames, d.height, d.width, steps=25, guidance=1.0, seed=1).numpy()
    assert video.std() > 0.02
    assert video.std(axis=0).mean() > 0.02


def test_inference_config_copies_condition_flags(tiny_cfg, store, tmp_path):
    cfg = tiny_cfg.replace(train={"use_mask": False, "use_text": False}, unbind={"enabled": False})
    path = Trainer(cfg, store, "finetune").save(tmp_path / "f.ckpt")
    got = inference_config(tiny_cfg, path)
    assert not got.train.use_mask and not got.train.use_text and not got.unbind.enabled
