"""Procedural multi-subject animation episodes.

Every episode is a pure function of its arguments: a flat background, ``N``
non-overlapping subjects (humanoid, blob or quadruped bodies sharing the
8-joint skeleton), one closed-form motion performed by all of them, the
skeleton(s) that drive the motion, and a short token prompt.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from . import skeleton as sk
from .config import DataConfig
from .errors import DataIOError, FormatError, InvalidArgumentError

FORMAT_VERSION = "1"
MAX_SUBJECTS = 6

ARCHETYPES = ("humanoid", "blob", "quadruped")
MOTIONS = ("wave", "squat", "spin", "sway", "jump", "lean", "kick", "bounce")
COUNT_WORDS = ("one", "two", "three", "four", "five", "six")


class TextVocab:
    """Closed prompt vocabulary. Id 0 is the null token used for unconditional
    text, id 1 pads prompts to a fixed length."""

    NULL = 0
    PAD = 1
    words = ("<null>", "<pad>") + COUNT_WORDS + ARCHETYPES + ("dancing",)
    ids = {w: i for i, w in enumerate(words)}
    size = len(words)

    @classmethod
    def encode(cls, words: Sequence[str], length: int = 8) -> tuple[int, ...]:
        try:
            ids = [cls.ids[w] for w in words]
        except KeyError as exc:
            raise InvalidArgumentError(f"word not in vocabulary: {exc}") from exc
        if len(ids) > length:
            raise InvalidArgumentError(f"prompt longer than {length} tokens")
        return tuple(ids + [cls.PAD] * (length - len(ids)))

    @classmethod
    def decode(cls, ids: Sequence[int]) -> list[str]:
        return [cls.words[i] for i in ids if i not in (cls.NULL, cls.PAD)]

    @classmethod
    def null(cls, length: int = 8) -> tuple[int, ...]:
        return (cls.NULL,) * length


def prompt_words(n_subjects: int, archetypes: Sequence[str]) -> list[str]:
    kinds = [a for a in ARCHETYPES if a in archetypes]
    return [COUNT_WORDS[n_subjects - 1], *kinds, "dancing"]


# -- bodies ----------------------------------------------------------------------

# child joint -> (parent, length, rest angle in degrees); 0 deg points right, 90 down.
# Lengths are in body units: a subject of unit u spans at most [-u/2, u/2] around
# its position over every motion (checked by the test suite).
_TEMPLATES = {
    "humanoid": {
        sk.NECK: (sk.TORSO, 0.14, -90),
        sk.HEAD: (sk.NECK, 0.11, -90),
        sk.PELVIS: (sk.TORSO, 0.14, 90),
        sk.L_HAND: (sk.NECK, 0.22, 120),
        sk.R_HAND: (sk.NECK, 0.22, 60),
        sk.L_FOOT: (sk.PELVIS, 0.21, 100),
        sk.R_FOOT: (sk.PELVIS, 0.21, 80),
    },
    "blob": {
        sk.NECK: (sk.TORSO, 0.10, -90),
        sk.HEAD: (sk.NECK, 0.07, -90),
        sk.PELVIS: (sk.TORSO, 0.10, 90),
        sk.L_HAND: (sk.NECK, 0.17, 160),
        sk.R_HAND: (sk.NECK, 0.17, 20),
        sk.L_FOOT: (sk.PELVIS, 0.15, 110),
        sk.R_FOOT: (sk.PELVIS, 0.15, 70),
    },
    "quadruped": {
        sk.NECK: (sk.TORSO, 0.15, 180),
        sk.HEAD: (sk.NECK, 0.10, -120),
        sk.PELVIS: (sk.TORSO, 0.15, 0),
        sk.L_HAND: (sk.NECK, 0.18, 100),
        sk.R_HAND: (sk.NECK, 0.18, 80),
        sk.L_FOOT: (sk.PELVIS, 0.18, 100),
        sk.R_FOOT: (sk.PELVIS, 0.18, 80),
    },
}
_TORSO_OFFSET = {"humanoid": (0.0, -0.03), "blob": (0.0, 0.0), "quadruped": (0.0, 0.02)}
_FK_ORDER = (sk.NECK, sk.PELVIS, sk.HEAD, sk.L_HAND, sk.R_HAND, sk.L_FOOT, sk.R_FOOT)


@dataclass(frozen=True)
class Skin:
    bone_radius: tuple[float, ...]  # per bone, body units
    head_radius: float
    torso_radius: float  # disk at torso_mid, 0 for none


SKINS = {
    "humanoid": Skin((0.035, 0.055, 0.055, 0.035, 0.035, 0.04, 0.04), 0.065, 0.0),
    "blob": Skin((0.025, 0.04, 0.04, 0.03, 0.03, 0.03, 0.03), 0.04, 0.16),
    "quadruped": Skin((0.04, 0.07, 0.07, 0.035, 0.035, 0.035, 0.035), 0.06, 0.0),
}


def _bump(phase: float, cycles: float) -> float:
    return 0.5 - 0.5 * math.cos(2 * math.pi * cycles * phase)


def motion_state(motion_id: int, phase: float) -> dict:
    """Closed-form pose offsets of a motion at ``phase`` in [0, 1)."""
    st = {"root": (0.0, 0.0), "delta": {}, "lean": 0.0, "squash": 1.0}
    s2 = _bump(phase, 2)
    if motion_id == 0:  # wave
        st["delta"] = {sk.R_HAND: -2.0 * s2, sk.L_HAND: -0.2 * math.sin(4 * math.pi * phase)}
    elif motion_id == 1:  # squat
        st["root"] = (0.0, 0.06 * s2)
        st["delta"] = {sk.L_FOOT: 0.5 * s2, sk.R_FOOT: -0.5 * s2, sk.L_HAND: 0.8 * s2, sk.R_HAND: -0.8 * s2}
    elif motion_id == 2:  # spin
        st["squash"] = math.cos(2 * math.pi * phase)
    elif motion_id == 3:  # sway
        st["lean"] = 0.3 * math.sin(4 * math.pi * phase)
    elif motion_id == 4:  # jump
        h = abs(math.sin(4 * math.pi * phase))
        st["root"] = (0.0, -0.08 * h)
        st["delta"] = {sk.L_HAND: 1.2 * h, sk.R_HAND: -1.2 * h}
    elif motion_id == 5:  # lean
        ramp = min(1.0, 4 * phase) if phase < 0.5 else min(1.0, 4 * (1 - phase))
        st["lean"] = 0.4 * ramp
    elif motion_id == 6:  # kick
        st["delta"] = {sk.R_FOOT: -1.3 * s2, sk.L_HAND: 0.5 * s2}
    elif motion_id == 7:  # bounce
        st["root"] = (0.0, 0.04 * math.sin(8 * math.pi * phase))
        w = math.sin(4 * math.pi * phase)
        st["delta"] = {sk.L_HAND: 0.6 * w, sk.R_HAND: -0.6 * w}
    else:
        raise InvalidArgumentError(f"motion_id must be in [0, {len(MOTIONS)}), got {motion_id}")
    return st


def body_joints(archetype: str, motion_id: int, phase: float) -> np.ndarray:
    """(8, 2) joint positions in body units, relative to the subject position."""
    template = _TEMPLATES[archetype]
    st = motion_state(motion_id, phase)
    pts = np.zeros((sk.N_JOINTS, 2))
    pts[sk.TORSO] = _TORSO_OFFSET[archetype]
    for child in _FK_ORDER:
        parent, length, angle = template[child]
        a = math.radians(angle) + st["delta"].get(child, 0.0)
        pts[child] = pts[parent] + length * np.array([math.cos(a), math.sin(a)])
    if st["lean"]:
        c, s = math.cos(st["lean"]), math.sin(st["lean"])
        rel = pts - pts[sk.PELVIS]
        pts = pts[sk.PELVIS] + rel @ np.array([[c, s], [-s, c]])
    if st["squash"] != 1.0:
        pts[:, 0] = pts[sk.TORSO, 0] + st["squash"] * (pts[:, 0] - pts[sk.TORSO, 0])
    return pts + np.array(st["root"])


def motion_sequence(archetype: str, motion_id: int, frames: int, position, unit: float) -> sk.PoseSequence:
    pts = np.stack([body_joints(archetype, motion_id, f / frames) for f in range(frames)])
    pts = np.asarray(position, dtype=np.float64) + unit * pts
    return sk.PoseSequence(pts, np.ones(pts.shape[:2], dtype=bool), sk.BONES)


# -- rendering -------------------------------------------------------------------


def _capsule(px: np.ndarray, py: np.ndarray, a, b, r: float) -> np.ndarray:
    ab = np.subtract(b, a)
    denom = float(ab @ ab)
    if denom == 0.0:
        t = np.zeros_like(px)
    else:
        t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
    dx = px - (a[0] + t * ab[0])
    dy = py - (a[1] + t * ab[1])
    return dx * dx + dy * dy <= r * r


def render_subject(joints: np.ndarray, archetype: str, unit: float, height: int, width: int):
    """Rasterize one body. Returns ``(silhouette, part_index)`` where part 1 is
    limbs, 2 trunk and 3 head."""
    skin = SKINS[archetype]
    py, px = np.mgrid[0:height, 0:width].astype(np.float64)
    px, py = px + 0.5, py + 0.5
    scale = np.array([width, height], dtype=np.float64)
    j = joints * scale
    s = unit * min(height, width)
    part = np.zeros((height, width), dtype=np.uint8)
    for e in (3, 4, 5, 6):  # limbs first so the trunk paints over them
        a, b = sk.BONES[e]
        part[_capsule(px, py, j[a], j[b], max(skin.bone_radius[e] * s, 0.75))] = 1
    for e in (0, 1, 2):
        a, b = sk.BONES[e]
        part[_capsule(px, py, j[a], j[b], max(skin.bone_radius[e] * s, 0.75))] = 2
    if skin.torso_radius:
        part[_capsule(px, py, j[sk.TORSO], j[sk.TORSO], skin.torso_radius * s)] = 2
    part[_capsule(px, py, j[sk.HEAD], j[sk.HEAD], max(skin.head_radius * s, 1.0))] = 3
    return part > 0, part


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap values in [0, 1] to the 8-bit grid used on disk."""
    return from_uint8(to_uint8(img))


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float32) / np.float32(255.0)


# -- episodes --------------------------------------------------------------------


class Misalign(NamedTuple):
    """Driving-pose displacement: scale about the canvas center, then shift."""

    dx: float = 0.0
    dy: float = 0.0
    scale: float = 1.0

    @property
    def is_zero(self) -> bool:
        return self.dx == 0.0 and self.dy == 0.0 and self.scale == 1.0


@dataclass(frozen=True)
class SubjectSpec:
    archetype: str
    base_position: tuple[float, float]
    base_scale: float
    body_color: tuple[float, float, float]
    unit: float  # body size as a canvas fraction


@dataclass(frozen=True, eq=False)
class Episode:
    """One sample: reference image, per-subject masks, prompt, driving poses and
    the ground-truth video in which every subject performs the motion.

    ``envelopes`` are the per-subject motion envelopes (union of the subject's
    silhouettes over all frames, dilated by one pixel); ``subject_poses`` are the
    ground-truth skeletons of each subject.
    """

    reference: np.ndarray  # (H, W, 3) float32
    masks: np.ndarray  # (N, H, W) bool
    text: tuple[int, ...]
    driving: sk.PoseSequence
    gt_video: np.ndarray  # (F, H, W, 3) float32
    meta: dict = field(default_factory=dict)
    envelopes: np.ndarray | None = None  # (N, H, W) bool
    subject_poses: tuple[sk.PoseSequence, ...] = ()

    @property
    def n_subjects(self) -> int:
        return int(self.masks.shape[0])

    @property
    def union_mask(self) -> np.ndarray:
        return self.masks.any(axis=0)

    @property
    def background(self) -> np.ndarray:
        return np.asarray(self.meta["background"], dtype=np.float32)

    def __eq__(self, other):
        if not isinstance(other, Episode):
            return NotImplemented
        return (
            np.array_equal(self.reference, other.reference)
            and np.array_equal(self.masks, other.masks)
            and tuple(self.text) == tuple(other.text)
            and self.driving == other.driving
            and np.array_equal(self.gt_video, other.gt_video)
            and self.meta == other.meta
            and _opt_equal(self.envelopes, other.envelopes)
            and tuple(self.subject_poses) == tuple(other.subject_poses)
        )


def _opt_equal(a, b) -> bool:
    if a is None or b is None:
        return a is b
    return np.array_equal(a, b)


_GRID = {1: (1, 1), 2: (1, 2), 3: (1, 3), 4: (2, 2), 5: (2, 3), 6: (2, 3)}


def _layout(rng: np.random.Generator, n: int, height: int, width: int, archetypes):
    rows, cols = _GRID[n]
    cw, ch = 1.0 / cols, 1.0 / rows
    margin = 3.0 / min(height, width)
    cells = rng.permutation(rows * cols)[:n]
    scales = rng.uniform(0.3, 0.8, size=n)
    units = scales * (min(cw, ch) - 2 * margin)
    centers = np.array([[(c % cols + 0.5) * cw, (c // cols + 0.5) * ch] for c in cells])
    slack = np.stack([(cw - units) / 2 - margin, (ch - units) / 2 - margin], axis=1).clip(min=0)
    for _ in range(64):
        pos = centers + rng.uniform(-1, 1, size=(n, 2)) * slack
        d = np.linalg.norm(pos[:, None] - pos[None], axis=-1) + np.eye(n)
        if d.min() >= 0.15:
            break
    else:
        pos = centers
    subjects = []
    for i in range(n):
        color = rng.uniform(0.45, 1.0, size=3)
        color[rng.integers(3)] = rng.uniform(0.8, 1.0)
        subjects.append(
            SubjectSpec(
                archetype=archetypes[i],
                base_position=(float(pos[i, 0]), float(pos[i, 1])),
                base_scale=float(scales[i]),
                body_color=tuple(float(c) for c in quantize(color)),
                unit=float(units[i]),
            )
        )
    return subjects


def generate_episode(
    n_subjects: int,
    motion_id: int,
    misalign: Misalign | Sequence[float] = Misalign(),
    seed: int = 0,
    *,
    height: int = 64,
    width: int = 64,
    frames: int = 16,
    driver: str = "per_subject",
    text_len: int = 8,
) -> Episode:
    """Render one episode.

    ``driver="per_subject"`` drives every subject with its own skeleton placed
    on top of it; ``driver="single"`` uses one skeleton at the canvas center
    with unit size 0.5. ``misalign`` is applied to the driving poses afterwards.
    """
    if not 1 <= n_subjects <= MAX_SUBJECTS:
        raise InvalidArgumentError(f"n_subjects must be in [1, {MAX_SUBJECTS}], got {n_subjects}")
    if not 0 <= motion_id < len(MOTIONS):
        raise InvalidArgumentError(f"motion_id must be in [0, {len(MOTIONS)}), got {motion_id}")
    if driver not in ("per_subject", "single"):
        raise InvalidArgumentError(f"unknown driver mode {driver!r}")
    if height < 16 or width < 16 or frames < 1:
        raise InvalidArgumentError("canvas must be at least 16x16 with >= 1 frame")
    misalign = Misalign(*misalign)
    if not misalign.scale > 0:
        raise InvalidArgumentError("misalign scale must be positive")

    rng = np.random.default_rng(seed)
    background = quantize(rng.uniform(0.0, 0.3, size=3))
    archetypes = [ARCHETYPES[i] for i in rng.integers(len(ARCHETYPES), size=n_subjects)]
    subjects = _layout(rng, n_subjects, height, width, archetypes)

    poses = tuple(
        motion_sequence(s.archetype, motion_id, frames, s.base_position, s.unit) for s in subjects
    )
    video = np.empty((frames, height, width, 3), dtype=np.float32)
    silhouettes = np.zeros((n_subjects, frames, height, width), dtype=bool)
    for f in range(frames):
        canvas = np.broadcast_to(background, (height, width, 3)).copy()
        for i, s in enumerate(subjects):
            sil, part = render_subject(poses[i].points[f], s.archetype, s.unit, height, width)
            color = np.asarray(s.body_color, dtype=np.float32)
            shades = np.stack([color, quantize(0.8 * color), color, quantize(0.5 * color + 0.5)])
            canvas[sil] = shades[part[sil]]
            silhouettes[i, f] = sil
        video[f] = canvas
    video = quantize(video)
    reference = video[0].copy()

    square = np.ones((3, 3), dtype=bool)
    masks = np.stack([ndimage.binary_dilation(s[0], square) for s in silhouettes])
    envelopes = np.stack([ndimage.binary_dilation(s.any(axis=0), square) for s in silhouettes])

    if driver == "per_subject":
        drivers = [
            motion_sequence("humanoid", motion_id, frames, s.base_position, s.unit) for s in subjects
        ]
    else:
        drivers = [motion_sequence("humanoid", motion_id, frames, (0.5, 0.5), 0.5)]
    driving = sk.PoseSequence.stack_persons(drivers)
    driving = apply_misalign(driving, misalign)

    text = TextVocab.encode(prompt_words(n_subjects, archetypes), text_len)
    meta = {
        "version": FORMAT_VERSION,
        "seed": int(seed),
        "n_subjects": n_subjects,
        "motion_id": motion_id,
        "misalign": [float(v) for v in misalign],
        "driver": driver,
        "archetypes": archetypes,
        "background": [float(c) for c in background],
        "height": height,
        "width": width,
        "frames": frames,
        "subjects": [
            {
                "archetype": s.archetype,
                "base_position": list(s.base_position),
                "base_scale": s.base_scale,
                "body_color": list(s.body_color),
                "unit": s.unit,
            }
            for s in subjects
        ],
    }
    meta = json.loads(json.dumps(meta))
    return Episode(reference, masks, text, driving, video, meta, envelopes, poses)


def apply_misalign(driving: sk.PoseSequence, misalign: Misalign) -> sk.PoseSequence:
    if misalign.scale != 1.0:
        driving = sk.scale_skeleton(driving, misalign.scale, (0.5, 0.5))
    if misalign.dx != 0.0 or misalign.dy != 0.0:
        driving = sk.translate_skeleton(driving, misalign.dx, misalign.dy)
    return driving


def subject_specs(episode: Episode) -> list[SubjectSpec]:
    return [
        SubjectSpec(
            d["archetype"], tuple(d["base_position"]), d["base_scale"], tuple(d["body_color"]), d["unit"]
        )
        for d in episode.meta["subjects"]
    ]


# -- on-disk format --------------------------------------------------------------


def _write_png(path: Path, img: np.ndarray) -> None:
    Image.fromarray(img).save(path, format="PNG")


def _read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im).copy()
    except FileNotFoundError as exc:
        raise DataIOError(f"missing file: {path}") from exc
    except OSError as exc:
        raise DataIOError(f"corrupt image file: {path}: {exc}") from exc


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise DataIOError(f"missing file: {path}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataIOError(f"corrupt file: {path}: {exc}") from exc


def write_episode(episode: Episode, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = dict(episode.meta)
    manifest.update(
        version=FORMAT_VERSION,
        n_subjects=episode.n_subjects,
        text=list(episode.text),
    )
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
    _write_png(d / "reference.png", to_uint8(episode.reference))
    for k, m in enumerate(episode.masks):
        _write_png(d / f"mask_{k}.png", m.astype(np.uint8) * 255)
    if episode.envelopes is not None:
        for k, m in enumerate(episode.envelopes):
            _write_png(d / f"envelope_{k}.png", m.astype(np.uint8) * 255)
    for f, frame in enumerate(episode.gt_video):
        _write_png(d / f"gt_{f:03d}.png", to_uint8(frame))
    sk.save_pose_sequence(episode.driving, d / "driving.json")
    for k, p in enumerate(episode.subject_poses):
        sk.save_pose_sequence(p, d / f"subject_{k}.json")
    return d


def read_episode(directory: str | Path) -> Episode:
    d = Path(directory)
    manifest = _read_json(d / "manifest.json")
    if not isinstance(manifest, dict):
        raise FormatError(f"{d / 'manifest.json'}: expected a JSON object")
    version = str(manifest.get("version"))
    if version != FORMAT_VERSION:
        raise FormatError(
            f"{d / 'manifest.json'}: format version {version!r}, reader supports {FORMAT_VERSION!r}"
        )
    try:
        n = int(manifest["n_subjects"])
        frames = int(manifest["frames"])
        text = tuple(int(t) for t in manifest["text"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{d / 'manifest.json'}: missing or bad field {exc}") from exc
    reference = from_uint8(_read_png(d / "reference.png"))
    masks = np.stack([_read_png(d / f"mask_{k}.png") > 127 for k in range(n)])
    envelopes = None
    if (d / "envelope_0.png").exists():
        envelopes = np.stack([_read_png(d / f"envelope_{k}.png") > 127 for k in range(n)])
    gt = np.stack([from_uint8(_read_png(d / f"gt_{f:03d}.png")) for f in range(frames)])
    driving = sk.load_pose_sequence(d / "driving.json")
    poses = []
    k = 0
    while (d / f"subject_{k}.json").exists():
        poses.append(sk.load_pose_sequence(d / f"subject_{k}.json"))
        k += 1
    meta = {k: v for k, v in manifest.items() if k != "text"}
    return Episode(reference, masks, text, driving, gt, meta, envelopes, tuple(poses))


def write_dataset(episodes: Sequence[Episode], root: str | Path, names: Sequence[str] | None = None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    names = list(names) if names is not None else [f"ep_{i:05d}" for i in range(len(episodes))]
    for name, ep in zip(names, episodes):
        write_episode(ep, root / name)
    (root / "index.json").write_text(json.dumps(names))
    return root


def dataset_index(root: str | Path) -> list[str]:
    root = Path(root)
    names = _read_json(root / "index.json")
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise FormatError(f"{root / 'index.json'}: expected a list of directory names")
    return names


def read_dataset(root: str | Path) -> list[Episode]:
    root = Path(root)
    return [read_episode(root / name) for name in dataset_index(root)]


# -- splits ----------------------------------------------------------------------

SPLITS = ("train", "test_aligned", "test_misaligned", "test_single_driver")


class EpisodeArgs(NamedTuple):
    n_subjects: int
    motion_id: int
    misalign: tuple[float, float, float]
    seed: int
    driver: str


def _split_args(split: str, seed: int, cfg: DataConfig) -> EpisodeArgs:
    rng = np.random.default_rng([seed, 7919])
    motion = int(rng.integers(len(MOTIONS)))
    if split == "test_single_driver":
        n = int(rng.integers(2, cfg.max_subjects + 1))
        return EpisodeArgs(n, motion, (0.0, 0.0, 1.0), seed, "single")
    n = int(rng.integers(1, cfg.max_subjects + 1))
    if split == "test_misaligned":
        mag = rng.uniform(cfg.misalign_min, cfg.misalign_max, size=2)
        sign = rng.choice([-1.0, 1.0], size=2)
        dx, dy = mag * sign
        s = rng.uniform(cfg.misalign_scale_lo, cfg.misalign_scale_hi)
        return EpisodeArgs(n, motion, (float(dx), float(dy), float(s)), seed, "per_subject")
    return EpisodeArgs(n, motion, (0.0, 0.0, 1.0), seed, "per_subject")


def split_seed_ranges(cfg: DataConfig) -> dict[str, range]:
    ranges = {"train": range(cfg.train_seed, cfg.train_seed + cfg.train_episodes)}
    for k, split in enumerate(SPLITS[1:]):
        start = cfg.test_seed + k * cfg.test_episodes
        ranges[split] = range(start, start + cfg.test_episodes)
    return ranges


def make_eval_split(cfg: DataConfig) -> dict[str, list[EpisodeArgs]]:
    """Episode arguments for the train split and the three test protocols.

    Raises InvalidArgumentError when any two splits share a seed.
    """
    if cfg.max_subjects < 2 or cfg.max_subjects > MAX_SUBJECTS:
        raise InvalidArgumentError(f"max_subjects must be in [2, {MAX_SUBJECTS}]")
    ranges = split_seed_ranges(cfg)
    names = list(ranges)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            ra, rb = ranges[a], ranges[b]
            if len(ra) and len(rb) and max(ra.start, rb.start) < min(ra.stop, rb.stop):
                raise InvalidArgumentError(f"seed ranges of {a} and {b} overlap")
    return {split: [_split_args(split, s, cfg) for s in ranges[split]] for split in names}


def build_episode(args: EpisodeArgs, cfg: DataConfig, text_len: int = 8) -> Episode:
    return generate_episode(
        args.n_subjects,
        args.motion_id,
        Misalign(*args.misalign),
        args.seed,
        height=cfg.height,
        width=cfg.width,
        frames=cfg.frames,
        driver=args.driver,
        text_len=text_len,
    )


def write_splits(cfg: DataConfig, root: str | Path, text_len: int = 8) -> dict[str, Path]:
    root = Path(root)
    manifests = make_eval_split(cfg)
    out = {}
    for split, items in manifests.items():
        episodes = [build_episode(a, cfg, text_len) for a in items]
        out[split] = write_dataset(episodes, root / split)
    (root / "splits.json").write_text(
        json.dumps({k: [list(a) for a in v] for k, v in manifests.items()}, indent=1)
    )
    return out
