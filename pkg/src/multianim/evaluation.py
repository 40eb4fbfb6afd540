"""Video metrics, the subject-localization diagnostic, the three test protocols
and the four-variant ablation ladder."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import binary_dilation, correlate1d

from .config import Config
from .errors import DataIOError, InvalidArgumentError
from .model import AnimationModel, EpisodeStore, episode_conditions
from .synthgen import (
    Episode,
    Misalign,
    TextVocab,
    generate_episode,
    prompt_words,
    read_dataset,
    to_uint8,
)

log = logging.getLogger(__name__)

PROTOCOLS = ("aligned", "misaligned", "single_driver")
PSNR_CAP = 100.0
FG_THRESHOLD = 0.05

# -- metrics -----------------------------------------------------------------------


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def l1(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def ssim_map(x: np.ndarray, y: np.ndarray, size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """SSIM over every full window position of two (H, W) planes with data range 1."""
    if min(x.shape) < size:
        raise InvalidArgumentError(f"image smaller than the {size}x{size} window")
    g = gaussian_window(size, sigma)
    r = size // 2

    def blur(z):
        z = correlate1d(z, g, axis=0, mode="constant")
        z = correlate1d(z, g, axis=1, mode="constant")
        return z[r : z.shape[0] - r, r : z.shape[1] - r]

    c1, c2 = 0.01**2, 0.03**2
    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(a, b) -> float:
    """Mean SSIM of two images (H, W[, C]) or videos (F, H, W, C), averaged over
    channels within a frame and then over frames."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[None, :, :, None], b[None, :, :, None]
    elif a.ndim == 3:
        a, b = a[None], b[None]
    if a.ndim != 4:
        raise InvalidArgumentError(f"expected an image or video, got shape {a.shape}")
    per_frame = [
        np.mean([ssim_map(a[f, :, :, c], b[f, :, :, c]).mean() for c in range(a.shape[-1])])
        for f in range(a.shape[0])
    ]
    return float(np.mean(per_frame))


def foreground(video, background, threshold: float = FG_THRESHOLD) -> np.ndarray:
    """Pixels differing from the background colour by more than ``threshold`` in any channel."""
    v = np.asarray(video, dtype=np.float64)
    return (np.abs(v - np.asarray(background, dtype=np.float64)) > threshold).any(axis=-1)


def subject_iou(generated, gt_video, envelopes, background, threshold: float = FG_THRESHOLD) -> np.ndarray:
    """Per-subject foreground IoU of ``generated`` against ``gt_video``.

    For subject k, both foregrounds are restricted to the subject's motion
    envelope dilated by one more pixel; IoU is taken per frame and averaged.
    A frame where both restricted foregrounds are empty counts as 1.
    """
    generated, gt_video = _pair(generated, gt_video)
    envelopes = np.asarray(envelopes, dtype=bool)
    if envelopes.ndim != 3 or envelopes.shape[1:] != gt_video.shape[1:3]:
        raise InvalidArgumentError(f"envelopes shape {envelopes.shape} does not match video {gt_video.shape}")
    fg_gen = foreground(generated, background, threshold)
    fg_gt = foreground(gt_video, background, threshold)
    out = np.empty(len(envelopes))
    for k, env in enumerate(envelopes):
        region = binary_dilation(env)
        p = fg_gen & region
        g = fg_gt & region
        inter = (p & g).sum(axis=(1, 2))
        union = (p | g).sum(axis=(1, 2))
        per_frame = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
        out[k] = per_frame.mean()
    return out


def episode_iou(generated, episode: Episode) -> np.ndarray:
    return subject_iou(generated, episode.gt_video, episode.envelopes, episode.background)


# -- reports -----------------------------------------------------------------------

METRIC_COLUMNS = ("episode_id", "protocol", "model", "psnr_db", "ssim", "l1", "iou_mean", "iou_min", "n_subjects")


@dataclass
class MetricReport:
    protocol: str
    model: str
    rows: list[dict] = field(default_factory=list)
    subject_rows: list[dict] = field(default_factory=list)

    @property
    def n_episodes(self) -> int:
        return len(self.rows)

    def add(self, episode_id: str, generated, episode: Episode) -> dict:
        ious = episode_iou(generated, episode)
        row = {
            "episode_id": episode_id,
            "protocol": self.protocol,
            "model": self.model,
            "psnr_db": psnr(generated, episode.gt_video),
            "ssim": ssim(generated, episode.gt_video),
            "l1": l1(generated, episode.gt_video),
            "iou_mean": float(ious.mean()),
            "iou_min": float(ious.min()),
            "n_subjects": episode.n_subjects,
        }
        self.rows.append(row)
        for k, v in enumerate(ious):
            self.subject_rows.append({"episode_id": episode_id, "subject": k, "iou": float(v)})
        return row

    def mean(self, column: str) -> float:
        if not self.rows:
            return float("nan")
        return float(np.mean([r[column] for r in self.rows]))

    def fraction(self, column: str, threshold: float) -> float:
        if not self.rows:
            return float("nan")
        return float(np.mean([r[column] >= threshold for r in self.rows]))

    def aggregate(self) -> dict:
        return {
            "protocol": self.protocol,
            "model": self.model,
            "n_episodes": self.n_episodes,
            **{c: self.mean(c) for c in ("psnr_db", "ssim", "l1", "iou_mean", "iou_min")},
            "frac_iou_ge_0.5": self.fraction("iou_mean", 0.5),
        }

    def write(self, directory: str | Path) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRIC_COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])
        with open(d / "subjects.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode_id", "subject", "iou"])
            for r in self.subject_rows:
                w.writerow([r["episode_id"], r["subject"], _fmt(r["iou"])])
        return d / "metrics.csv"


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def read_metrics_csv(path: str | Path) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except FileNotFoundError as exc:
        raise DataIOError(f"missing report: {path}") from exc


# -- previews ----------------------------------------------------------------------


def frame_grid(rows: Sequence[np.ndarray]) -> np.ndarray:
    """Stack videos (F, H, W, 3) as rows of a single uint8 image, 1 px gutters."""
    f, h, w, _ = rows[0].shape
    grid = np.full((len(rows) * (h + 1) - 1, f * (w + 1) - 1, 3), 255, np.uint8)
    for i, video in enumerate(rows):
        for j, frame in enumerate(video):
            grid[i * (h + 1) : i * (h + 1) + h, j * (w + 1) : j * (w + 1) + w] = to_uint8(frame)
    return grid


def write_gif(path: str | Path, video: np.ndarray, scale: int = 2, duration_ms: int = 120) -> None:
    frames = [
        Image.fromarray(to_uint8(f)).resize((f.shape[1] * scale, f.shape[0] * scale), Image.NEAREST)
        for f in video
    ]
    frames[0].save(path, save_all=True, append_images=frames[1:], duration=duration_ms, loop=0)


def write_previews(directory: Path, name: str, generated: np.ndarray, episode: Episode) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    Image.fromarray(frame_grid([episode.gt_video, generated])).save(directory / f"{name}_grid.png")
    side = np.concatenate([episode.gt_video, generated], axis=2)
    write_gif(directory / f"{name}.gif", side)


# -- protocols ---------------------------------------------------------------------


def split_dir(data_root: str | Path, protocol: str) -> Path:
    if protocol not in PROTOCOLS:
        raise InvalidArgumentError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")
    return Path(data_root) / f"test_{protocol}"


def episode_seed(seed: int, index: int) -> int:
    return int(np.random.default_rng([seed, index, 31]).integers(2**62))


def sample_episode(model: AnimationModel, episode: Episode, cfg: Config, *, seed: int,
                   steps: int | None = None, guidance: float | None = None) -> np.ndarray:
    """Generate one episode's video with the conditions the variant was trained with."""
    cond = episode_conditions([episode], model.factor, cfg.train.use_mask, cfg.train.use_text, cfg.model.text_len)
    f, h, w = episode.gt_video.shape[:3]
    video = model.generate(
        cond,
        f,
        h,
        w,
        steps=steps or cfg.diffusion.sample_steps,
        guidance=cfg.diffusion.guidance if guidance is None else guidance,
        seed=seed,
    )
    return video[0].numpy()


def evaluate_videos(generated: Sequence[np.ndarray], episodes: Sequence[Episode], protocol: str,
                    model_tag: str, names: Sequence[str] | None = None) -> MetricReport:
    report = MetricReport(protocol, model_tag)
    names = names or [f"ep_{i:05d}" for i in range(len(episodes))]
    for name, video, ep in zip(names, generated, episodes):
        report.add(name, video, ep)
    return report


def evaluate_model(model: AnimationModel, episodes: Sequence[Episode], protocol: str, cfg: Config,
                   model_tag: str, out_dir: str | Path | None = None, seed: int = 0,
                   names: Sequence[str] | None = None, previews: int | None = None) -> MetricReport:
    """Sample every episode with a per-episode seed and score it against ground truth.

    Previews (frame grid + GIF) are written for the first ``previews`` episodes
    (all when None) when ``out_dir`` is given.
    """
    model.eval()
    names = list(names) if names is not None else [f"ep_{i:05d}" for i in range(len(episodes))]
    report = MetricReport(protocol, model_tag)
    d = Path(out_dir) / protocol if out_dir is not None else None
    for i, (name, ep) in enumerate(zip(names, episodes)):
        video = sample_episode(model, ep, cfg, seed=episode_seed(seed, i))
        row = report.add(name, video, ep)
        log.info("%s %s %s psnr=%.2f iou=%.3f", model_tag, protocol, name, row["psnr_db"], row["iou_mean"])
        if d is not None and (previews is None or i < previews):
            write_previews(d, name, video, ep)
    if d is not None:
        report.write(d)
    return report


def load_protocol_episodes(data_root: str | Path, protocol: str) -> list[Episode]:
    root = split_dir(data_root, protocol)
    if not (root / "index.json").exists():
        raise DataIOError(f"missing split manifest: {root / 'index.json'}")
    return read_dataset(root)


def run_protocol(checkpoint: str | Path, protocol: str, cfg: Config, *, data_root: str | Path,
                 out_dir: str | Path, model_tag: str = "model", seed: int = 0,
                 previews: int | None = None) -> MetricReport:
    from .trainer import load_model

    episodes = load_protocol_episodes(data_root, protocol)
    model = load_model(cfg, checkpoint)
    return evaluate_model(model, episodes, protocol, cfg, model_tag, out_dir, seed, previews=previews)


# -- semantic sanity probe ----------------------------------------------------------


def count_probe(model: AnimationModel, cfg: Config, n_pairs: int = 20, seed: int = 0) -> dict:
    """Foreground size under "one ..." versus "two ..." prompts on 2-subject references.

    Returns the fraction of pairs whose foreground pixel count (summed over
    frames) is larger with the "two" prompt.
    """
    d = cfg.data
    hits, rows = 0, []
    for i in range(n_pairs):
        ep = generate_episode(
            2, i % 8, Misalign(0.0, 0.0, 1.0), d.test_seed + 900_000 + i,
            height=d.height, width=d.width, frames=d.frames, text_len=cfg.model.text_len,
        )
        kinds = ep.meta["archetypes"]
        counts = {}
        for n in (1, 2):
            text = TextVocab.encode(prompt_words(n, kinds), cfg.model.text_len)
            probe = Episode(ep.reference, ep.masks, text, ep.driving, ep.gt_video, ep.meta, ep.envelopes,
                            ep.subject_poses)
            video = sample_episode(model, probe, cfg, seed=episode_seed(seed, 10_000 + i))
            counts[n] = int(foreground(video, ep.background).sum())
        hit = counts[2] > counts[1]
        hits += hit
        rows.append({"pair": i, "count_one": counts[1], "count_two": counts[2], "direction_ok": hit})
    return {"fraction": hits / max(n_pairs, 1), "pairs": rows}


# -- ablation ----------------------------------------------------------------------

VARIANTS = ("baseline", "unbind", "unbind_spatial", "full")
VARIANT_LABELS = {
    "baseline": "Baseline",
    "unbind": "B+Unbind",
    "unbind_spatial": "B+Unbind+SpatialRebind",
    "full": "Full",
}
VARIANT_FLAGS = {
    # name: (unbind, mask, text)
    "baseline": (False, False, False),
    "unbind": (True, False, False),
    "unbind_spatial": (True, True, False),
    "full": (True, True, True),
}


def ablation_variants(cfg: Config) -> dict[str, Config]:
    """Configs of the four variants. They differ only in unbind.enabled,
    train.use_mask, train.use_text and train.p_ani (text-off variants train on the
    animation task only, since text-to-video steps need text)."""
    out = {}
    for name, (unbind, mask, text) in VARIANT_FLAGS.items():
        out[name] = cfg.replace(
            unbind={"enabled": unbind},
            train={"use_mask": mask, "use_text": text, "p_ani": cfg.train.p_ani if text else 1.0},
        )
    return out


def config_diff(a: Config, b: Config) -> set[str]:
    da, db = a.to_dict(), b.to_dict()
    return {f"{s}.{k}" for s in da for k in da[s] if da[s][k] != db[s][k]}


def file_sha256(path: str | Path) -> str:
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except FileNotFoundError as exc:
        raise DataIOError(f"missing file: {path}") from exc


def budget(cfg: Config) -> dict:
    return {
        "pretrain_steps": cfg.train.pretrain_steps,
        "finetune_steps": cfg.train.finetune_steps,
        "train_episodes": cfg.data.train_episodes,
        "test_episodes": cfg.data.test_episodes,
        "batch_size": cfg.train.batch_size,
        "height": cfg.data.height,
        "width": cfg.data.width,
        "frames": cfg.data.frames,
        "model_width": cfg.model.width,
        "model_depth": cfg.model.depth,
        "sample_steps": cfg.diffusion.sample_steps,
        "seed": cfg.train.seed,
    }


def run_ablation(cfg: Config, *, data_root: str | Path, out_dir: str | Path,
                 pretrain_ckpt: str | Path | None = None, protocols: Sequence[str] = PROTOCOLS,
                 probe_pairs: int = 20, previews: int = 4) -> dict:
    """Train the four variants from one pretrain checkpoint and evaluate them.

    Writes ``ablation.md``, ``ablation.csv`` and ``summary.json`` to ``out_dir``.
    """
    from .trainer import finetune, load_model, pretrain

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    store = EpisodeStore(read_dataset(Path(data_root) / "train"))
    if pretrain_ckpt is None:
        pretrain_ckpt = out / "pretrain" / "pretrain.ckpt"
        if not pretrain_ckpt.exists():
            pretrain(cfg, store, out / "pretrain")
    pre_sum = file_sha256(pretrain_ckpt)
    tests = {p: load_protocol_episodes(data_root, p) for p in protocols}

    summary = {"budget": budget(cfg), "pretrain_checksum": pre_sum, "variants": {}}
    for name, vcfg in ablation_variants(cfg).items():
        vdir = out / name
        ckpt = vdir / "finetune.ckpt"
        if not ckpt.exists():
            finetune(vcfg, store, pretrain_ckpt, vdir)
        model = load_model(vcfg, ckpt)
        entry = {"flags": dict(zip(("unbind", "mask", "text"), VARIANT_FLAGS[name])),
                 "pretrain_checksum": pre_sum, "protocols": {}}
        for p in protocols:
            rep = evaluate_model(model, tests[p], p, vcfg, name, vdir, seed=cfg.train.seed, previews=previews)
            entry["protocols"][p] = rep.aggregate()
        if name == "full" and probe_pairs:
            entry["count_probe"] = count_probe(model, vcfg, probe_pairs, cfg.train.seed)
        summary["variants"][name] = entry
        log.info("variant %s done (%.0fs elapsed)", name, time.time() - t0)

    summary["wall_time_s"] = time.time() - t0
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    _write_ablation_tables(summary, out, protocols)
    return summary


def _write_ablation_tables(summary: dict, out: Path, protocols: Sequence[str]) -> None:
    metrics = ("psnr_db", "ssim", "l1", "iou_mean", "frac_iou_ge_0.5")
    header = ["variant"] + [f"{p}.{m}" for p in protocols for m in metrics]
    rows = []
    for name, entry in summary["variants"].items():
        rows.append([VARIANT_LABELS[name]] + [
            f"{entry['protocols'][p][m]:.4f}" for p in protocols for m in metrics
        ])
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    probe = summary["variants"].get("full", {}).get("count_probe")
    if probe:
        lines += ["", f"Count probe (Full): {probe['fraction']:.2f} of pairs in the expected direction."]
    b = summary["budget"]
    lines += ["", "Budget: " + ", ".join(f"{k}={v}" for k, v in b.items())]
    (out / "ablation.md").write_text("\n".join(lines) + "\n")
