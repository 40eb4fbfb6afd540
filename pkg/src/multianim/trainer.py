"""Two-phase training: text-to-video pretraining of the base model, then LoRA
fine-tuning on the animation task mixed with text-to-video steps."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import time
from collections import Counter
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_into, load_meta, load_tensors, save_tensors
from .conditioning import DropFlags, encode_latent
from .config import Config
from .diffusion import training_loss
from .errors import FormatError, InvalidArgumentError
from .model import PHASES, AnimationModel, Conditions, EpisodeStore, animation_conditions
from .synthgen import TextVocab

log = logging.getLogger(__name__)

torch.use_deterministic_algorithms(True, warn_only=True)


def param_checksum(params: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(params[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def build_model(cfg: Config, seed: int | None = None) -> AnimationModel:
    torch.manual_seed(cfg.train.seed if seed is None else seed)
    return AnimationModel(cfg)


class Trainer:
    """Owns the model, optimizer and step counter of one training phase.

    Every step draws its randomness from a stream derived from
    ``(seed, phase, step)``, so runs are reproducible and resumable.
    """

    def __init__(self, cfg: Config, store: EpisodeStore, phase: str, model: AnimationModel | None = None):
        if phase not in PHASES:
            raise InvalidArgumentError(f"unknown phase {phase!r}")
        self.cfg = cfg
        self.store = store
        self.phase = phase
        self.model = model if model is not None else build_model(cfg)
        if phase == "finetune" and self.model.phase != "finetune":
            torch.manual_seed(cfg.train.seed + 1)
            self.model.start_finetune()
        self.model.freeze_for(phase)
        t = cfg.train
        self.base_lr = t.lr_pretrain if phase == "pretrain" else t.lr_finetune
        self.total_steps = t.pretrain_steps if phase == "pretrain" else t.finetune_steps
        # Decay only weight matrices; decaying norm gains lets biases take over
        # and collapses the text features to a constant.
        named = self.model.trainable_parameters(phase)
        decay = [n for n, p in named.items() if p.dim() >= 2]
        no_decay = [n for n, p in named.items() if p.dim() < 2]
        self.param_names = decay + no_decay
        self.params = [named[n] for n in self.param_names]
        self.optimizer = torch.optim.AdamW(
            [
                {"params": [named[n] for n in decay], "weight_decay": t.weight_decay},
                {"params": [named[n] for n in no_decay], "weight_decay": 0.0},
            ],
            lr=self.base_lr,
        )
        self.step = 0
        self.task_counts: Counter = Counter()
        self.history: list[dict] = []

    # -- schedule / randomness ---------------------------------------------------
    def lr_at(self, step: int) -> float:
        t = self.cfg.train
        warm = min(1.0, (step + 1) / t.warmup_steps) if t.warmup_steps > 0 else 1.0
        total = max(self.total_steps, 1)
        return self.base_lr * warm * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))

    def step_rng(self, step: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.train.seed, PHASES.index(self.phase), step])

    def _sample_rngs(self, step: int, batch: int):
        return [
            np.random.default_rng([self.cfg.train.seed, PHASES.index(self.phase), step, i, 17])
            for i in range(batch)
        ]

    # -- steps ---------------------------------------------------------------------
    def draw_task(self, rng: np.random.Generator) -> str:
        if self.phase == "pretrain":
            return "t2v"
        return "animation" if rng.random() < self.cfg.train.p_ani else "t2v"

    def train_step(self) -> dict:
        cfg, store = self.cfg, self.store
        b = cfg.train.batch_size
        rng = self.step_rng(self.step)
        task = self.draw_task(rng)
        idx = rng.integers(len(store), size=b)
        t = torch.from_numpy(rng.integers(1, cfg.diffusion.train_steps + 1, size=b))
        gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
        x0 = encode_latent(store.video(idx), self.model.factor).to(torch.float32)
        eps = torch.randn(x0.shape, generator=gen, dtype=torch.float32)
        d = cfg.diffusion
        drop_text = torch.from_numpy(rng.random(b) < d.drop_text)
        drop_pose = torch.from_numpy(rng.random(b) < d.drop_pose)
        drop_mask = torch.from_numpy(rng.random(b) < d.drop_mask)
        text = store.text[idx] if cfg.train.use_text else np.full((b, cfg.model.text_len), TextVocab.NULL)

        unbind_cfg, rngs = None, None
        if task == "animation":
            rngs = self._sample_rngs(self.step, b)
            unbind_cfg = cfg.unbind
            cond = animation_conditions(
                store.reference(idx),
                store.driving(idx),
                store.mask(idx) if cfg.train.use_mask else None,
                text,
                self.model.factor,
                unbind_cfg=unbind_cfg,
                rngs=rngs,
                training=True,
            )
            drop = DropFlags(text=drop_text, pose=drop_pose, mask=drop_mask)
        else:
            cond = Conditions(text=torch.as_tensor(text, dtype=torch.long))
            drop = DropFlags(text=drop_text)

        self.model.train()
        lr = self.lr_at(self.step)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        loss = training_loss(
            lambda x_t, tt: self.model.eps(x_t, tt, cond, drop, unbind_cfg=unbind_cfg, rngs=rngs),
            self.model.schedule,
            x0,
            t,
            eps,
            step=self.step,
        )
        loss.backward()
        if cfg.train.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.params, cfg.train.grad_clip)
        self.optimizer.step()
        self.task_counts[task] += 1
        row = {"step": self.step, "task": task, "loss": float(loss.item()), "lr": lr}
        self.history.append(row)
        self.step += 1
        return row

    def run(self, steps: int | None = None, log_csv: str | Path | None = None) -> list[dict]:
        steps = self.total_steps - self.step if steps is None else steps
        writer = None
        fh = None
        if log_csv is not None:
            log_csv = Path(log_csv)
            new = not log_csv.exists()
            fh = open(log_csv, "a", newline="")
            writer = csv.writer(fh)
            if new:
                writer.writerow(["step", "task", "loss", "lr", "wall_time"])
        t0 = time.time()
        rows = []
        try:
            for _ in range(steps):
                row = self.train_step()
                rows.append(row)
                if writer is not None:
                    writer.writerow([row["step"], row["task"], f"{row['loss']:.6f}", f"{row['lr']:.3e}",
                                     f"{time.time() - t0:.2f}"])
                every = self.cfg.train.log_every
                if every and (row["step"] % every == 0 or row["step"] == self.total_steps - 1):
                    log.info("%s step %d task=%s loss=%.4f lr=%.2e", self.phase, row["step"], row["task"],
                             row["loss"], row["lr"])
        finally:
            if fh is not None:
                fh.close()
        return rows

    # -- checkpoints ---------------------------------------------------------------
    def state_tensors(self) -> dict[str, torch.Tensor]:
        tensors = dict(self.model.state_dict())
        opt = self.optimizer.state_dict()["state"]
        for i, name in enumerate(self.param_names):
            for slot, value in opt.get(i, {}).items():
                tensors[f"optim.{name}.{slot}"] = torch.as_tensor(value, dtype=torch.float32)
        return tensors

    def save(self, path: str | Path) -> Path:
        meta = {
            "phase": self.phase,
            "step": self.step,
            "seed": self.cfg.train.seed,
            "config": self.cfg.to_dict(),
            "task_counts": dict(self.task_counts),
            "base_checksum": param_checksum(self.model.base_parameters()),
        }
        return save_tensors(path, self.state_tensors(), meta)

    def load_state(self, tensors: dict[str, torch.Tensor], meta: dict) -> None:
        if meta.get("phase") != self.phase:
            raise FormatError(f"checkpoint phase {meta.get('phase')!r} != trainer phase {self.phase!r}")
        load_into(self.model, tensors)
        state = {}
        for i, name in enumerate(self.param_names):
            slots = {k[len(f"optim.{name}.") :]: v for k, v in tensors.items() if k.startswith(f"optim.{name}.")}
            if slots:
                state[i] = {k: (v.reshape(()) if k == "step" else v.clone()) for k, v in slots.items()}
        sd = self.optimizer.state_dict()
        sd["state"] = state
        self.optimizer.load_state_dict(sd)
        self.step = int(meta["step"])
        self.task_counts = Counter(meta.get("task_counts", {}))


def check_config_compatible(cfg: Config, meta: dict) -> None:
    saved = meta.get("config", {}).get("model")
    current = cfg.to_dict()["model"]
    if saved != current:
        diff = sorted(k for k in current if saved is None or saved.get(k) != current[k])
        raise FormatError(f"checkpoint model config differs from current config in: {diff}")


def resume(cfg: Config, store: EpisodeStore, path: str | Path) -> Trainer:
    """Rebuild a trainer from a checkpoint of either phase."""
    tensors, meta = load_tensors(path)
    check_config_compatible(cfg, meta)
    trainer = Trainer(cfg, store, meta["phase"])
    trainer.load_state(tensors, meta)
    return trainer


def load_model(cfg: Config, path: str | Path) -> AnimationModel:
    """Model weights from a checkpoint, in eval mode."""
    tensors, meta = load_tensors(path)
    check_config_compatible(cfg, meta)
    model = build_model(cfg)
    if meta["phase"] == "finetune":
        model.start_finetune()
    load_into(model, tensors)
    model.eval()
    return model


def finetune_trainer(cfg: Config, store: EpisodeStore, pretrain_ckpt: str | Path) -> Trainer:
    tensors, meta = load_tensors(pretrain_ckpt)
    check_config_compatible(cfg, meta)
    if meta.get("phase") != "pretrain":
        raise FormatError(f"{pretrain_ckpt}: expected a pretrain checkpoint, got {meta.get('phase')!r}")
    model = build_model(cfg)
    load_into(model, tensors)
    return Trainer(cfg, store, "finetune", model=model)


def pretrain(cfg: Config, store: EpisodeStore, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg, store, "pretrain")
    trainer.run(log_csv=out_dir / "train_log.csv")
    report_loss_drop(trainer.history)
    return trainer.save(out_dir / "pretrain.ckpt")


def finetune(cfg: Config, store: EpisodeStore, pretrain_ckpt: str | Path, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trainer = finetune_trainer(cfg, store, pretrain_ckpt)
    before = param_checksum(trainer.model.base_parameters())
    trainer.run(log_csv=out_dir / "train_log.csv")
    if param_checksum(trainer.model.base_parameters()) != before:
        raise AssertionError("frozen base weights changed during fine-tuning")
    return trainer.save(out_dir / "finetune.ckpt")


def report_loss_drop(history: list[dict], window: int = 100) -> float:
    """Fractional drop of the last-window mean loss relative to the first window."""
    losses = np.array([r["loss"] for r in history])
    if len(losses) < 2:
        return 0.0
    w = min(window, len(losses) // 2)
    first, last = losses[:w].mean(), losses[-w:].mean()
    drop = 1.0 - last / first
    log.info("loss %.4f -> %.4f (drop %.1f%%)", first, last, 100 * drop)
    return float(drop)


def inference_config(cfg: Config, path: str | Path) -> Config:
    """``cfg`` with the condition flags the checkpoint was trained with."""
    meta = load_meta(path)
    check_config_compatible(cfg, meta)
    saved = meta["config"]
    return cfg.replace(
        train={k: saved["train"][k] for k in ("use_mask", "use_text")},
        unbind={"enabled": saved["unbind"]["enabled"]},
    )
