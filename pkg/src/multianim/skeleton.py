"""Stick-figure keypoints, the affine moves used for pose augmentation, and
rasterization of skeletons into colored pose images.

Coordinates are canvas fractions: x grows to the right, y grows downwards, and
(0, 0) / (1, 1) are the top-left / bottom-right canvas corners. Invisible
joints always carry (0, 0) and are ignored by every geometric operation.

A :class:`PoseSequence` frame may hold several people. They are stored as one
combined keypoint graph of ``n_persons * N_JOINTS`` joints whose edge list is
the single-person list replicated with index offsets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DataIOError, FormatError, InvalidArgumentError

JOINT_NAMES = (
    "head",
    "neck",
    "pelvis",
    "l_hand",
    "r_hand",
    "l_foot",
    "r_foot",
    "torso_mid",
)
N_JOINTS = len(JOINT_NAMES)
HEAD, NECK, PELVIS, L_HAND, R_HAND, L_FOOT, R_FOOT, TORSO = range(N_JOINTS)

# (parent, child); a tree rooted at the torso.
BONES = (
    (HEAD, NECK),
    (NECK, TORSO),
    (TORSO, PELVIS),
    (NECK, L_HAND),
    (NECK, R_HAND),
    (PELVIS, L_FOOT),
    (PELVIS, R_FOOT),
)
N_BONES = len(BONES)

BONE_PALETTE = np.array(
    [
        [1.00, 0.00, 0.00],
        [1.00, 0.60, 0.00],
        [1.00, 1.00, 0.00],
        [0.00, 1.00, 0.00],
        [0.00, 1.00, 1.00],
        [0.00, 0.40, 1.00],
        [1.00, 0.00, 1.00],
    ],
    dtype=np.float32,
)


def person_edges(n_persons: int) -> tuple[tuple[int, int], ...]:
    """Edge list for ``n_persons`` skeletons stored side by side."""
    return tuple(
        (a + p * N_JOINTS, b + p * N_JOINTS) for p in range(n_persons) for (a, b) in BONES
    )


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def _validate(points: np.ndarray, visible: np.ndarray, edges) -> None:
    if points.shape[-1] != 2 or points.shape[:-1] != visible.shape:
        raise InvalidArgumentError(
            f"points {points.shape} and visibility {visible.shape} disagree"
        )
    if not np.all(np.isfinite(points)):
        raise InvalidArgumentError("keypoint coordinates must be finite")
    n = points.shape[-2]
    for a, b in edges:
        if a == b:
            raise InvalidArgumentError(f"self-edge at joint {a}")
        if not (0 <= a < n and 0 <= b < n):
            raise InvalidArgumentError(f"edge ({a}, {b}) out of range for {n} joints")


@dataclass(frozen=True, eq=False)
class Skeleton:
    """One keypoint graph: ``points`` (K, 2), ``visible`` (K,)."""

    points: np.ndarray
    visible: np.ndarray
    edges: tuple[tuple[int, int], ...] = BONES

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        vis = np.asarray(self.visible, dtype=bool)
        _validate(pts, vis, self.edges)
        pts = np.where(vis[..., None], pts, 0.0)
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "visible", _frozen(vis))
        object.__setattr__(self, "edges", tuple(tuple(map(int, e)) for e in self.edges))

    @property
    def n_joints(self) -> int:
        return self.points.shape[0]

    def bone_lengths(self) -> np.ndarray:
        return _bone_lengths(self.points, self.visible, self.edges)

    def __eq__(self, other):
        if not isinstance(other, Skeleton):
            return NotImplemented
        return (
            self.edges == other.edges
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.visible, other.visible)
        )


@dataclass(frozen=True, eq=False)
class PoseSequence:
    """F frames of a keypoint graph: ``points`` (F, K, 2), ``visible`` (F, K)."""

    points: np.ndarray
    visible: np.ndarray
    edges: tuple[tuple[int, int], ...] = BONES

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        vis = np.asarray(self.visible, dtype=bool)
        if pts.ndim != 3:
            raise InvalidArgumentError(f"expected (F, K, 2) points, got {pts.shape}")
        if pts.shape[0] < 1:
            raise InvalidArgumentError("a pose sequence needs at least one frame")
        _validate(pts, vis, self.edges)
        pts = np.where(vis[..., None], pts, 0.0)
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "visible", _frozen(vis))
        object.__setattr__(self, "edges", tuple(tuple(map(int, e)) for e in self.edges))

    @classmethod
    def from_frames(cls, frames: Sequence[Skeleton]) -> "PoseSequence":
        if not frames:
            raise InvalidArgumentError("a pose sequence needs at least one frame")
        edges = frames[0].edges
        if any(f.edges != edges for f in frames):
            raise InvalidArgumentError("all frames must share the same edge list")
        return cls(
            np.stack([f.points for f in frames]), np.stack([f.visible for f in frames]), edges
        )

    @classmethod
    def stack_persons(cls, persons: Sequence["PoseSequence"]) -> "PoseSequence":
        """Merge single-person sequences of equal length into one multi-person sequence."""
        if not persons:
            raise InvalidArgumentError("need at least one person")
        n_frames = persons[0].n_frames
        if any(p.n_frames != n_frames for p in persons):
            raise InvalidArgumentError("persons must have the same number of frames")
        return cls(
            np.concatenate([p.points for p in persons], axis=1),
            np.concatenate([p.visible for p in persons], axis=1),
            person_edges(len(persons)),
        )

    @property
    def n_frames(self) -> int:
        return self.points.shape[0]

    @property
    def n_joints(self) -> int:
        return self.points.shape[1]

    @property
    def n_persons(self) -> int:
        return self.n_joints // N_JOINTS

    @property
    def frames(self) -> list[Skeleton]:
        return [Skeleton(p, v, self.edges) for p, v in zip(self.points, self.visible)]

    def __iter__(self) -> Iterator[Skeleton]:
        return iter(self.frames)

    def __len__(self) -> int:
        return self.n_frames

    def person(self, index: int) -> "PoseSequence":
        sl = slice(index * N_JOINTS, (index + 1) * N_JOINTS)
        return PoseSequence(self.points[:, sl], self.visible[:, sl], BONES)

    def bone_lengths(self) -> np.ndarray:
        """(F, E) bone lengths; NaN where an endpoint is invisible."""
        return _bone_lengths(self.points, self.visible, self.edges)

    def bbox(self) -> tuple[float, float, float, float] | None:
        """(x0, y0, x1, y1) over visible joints of every frame, None if nothing is visible."""
        if not self.visible.any():
            return None
        pts = self.points[self.visible]
        return (
            float(pts[:, 0].min()),
            float(pts[:, 1].min()),
            float(pts[:, 0].max()),
            float(pts[:, 1].max()),
        )

    def __eq__(self, other):
        if not isinstance(other, PoseSequence):
            return NotImplemented
        return (
            self.edges == other.edges
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.visible, other.visible)
        )

    # JSON document: {"edges": [[i, j], ...], "frames": [[[x, y, visible], ...], ...]}
    def to_json(self) -> dict:
        frames = [
            [[float(x), float(y), bool(v)] for (x, y), v in zip(pts, vis)]
            for pts, vis in zip(self.points, self.visible)
        ]
        return {"edges": [list(e) for e in self.edges], "frames": frames}

    @classmethod
    def from_json(cls, doc: dict) -> "PoseSequence":
        try:
            edges = tuple((int(a), int(b)) for a, b in doc["edges"])
            frames = doc["frames"]
            pts = np.array([[[j[0], j[1]] for j in fr] for fr in frames], dtype=np.float64)
            vis = np.array([[bool(j[2]) for j in fr] for fr in frames], dtype=bool)
        except (KeyError, TypeError, IndexError, ValueError) as exc:
            raise FormatError(f"malformed pose sequence document: {exc}") from exc
        if pts.ndim != 3:
            raise FormatError("pose frames must all have the same joint count")
        return cls(pts, vis, edges)


def _bone_lengths(points, visible, edges) -> np.ndarray:
    a = np.array([e[0] for e in edges], dtype=int)
    b = np.array([e[1] for e in edges], dtype=int)
    d = np.linalg.norm(points[..., a, :] - points[..., b, :], axis=-1)
    ok = visible[..., a] & visible[..., b]
    return np.where(ok, d, np.nan)


def save_pose_sequence(seq: PoseSequence, path: str | Path) -> None:
    Path(path).write_text(json.dumps(seq.to_json()))


def load_pose_sequence(path: str | Path) -> PoseSequence:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise DataIOError(f"missing pose file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataIOError(f"corrupt pose file: {path}: {exc}") from exc
    return PoseSequence.from_json(doc)


# -- geometry ------------------------------------------------------------------


def _moved(pose, points):
    return type(pose)(np.where(pose.visible[..., None], points, 0.0), pose.visible, pose.edges)


def translate_skeleton(s, dx: float, dy: float):
    """Shift every visible joint by (dx, dy). Works on Skeleton and PoseSequence.

    Results may leave the canvas; clamping is up to the caller.
    """
    return _moved(s, s.points + np.array([dx, dy], dtype=np.float64))


def scale_skeleton(s, factor: float, center: Sequence[float] = (0.0, 0.0)):
    """Map every visible joint p to ``center + factor * (p - center)``."""
    if not factor > 0:
        raise InvalidArgumentError(f"scale factor must be positive, got {factor}")
    if factor == 1.0:
        return _moved(s, s.points)
    c = np.asarray(center, dtype=np.float64)
    return _moved(s, c + factor * (s.points - c))


# -- rasterization -------------------------------------------------------------


def default_thickness(height: int) -> int:
    return max(1, int(round(height / 64)))


def _line_pixels(x0: int, y0: int, x1: int, y1: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer pixels on the segment by uniform parametric sampling (DDA)."""
    n = max(abs(x1 - x0), abs(y1 - y0))
    if n == 0:
        return np.array([x0]), np.array([y0])
    t = np.arange(n + 1) / n
    xs = np.floor(x0 + t * (x1 - x0) + 0.5).astype(np.int64)
    ys = np.floor(y0 + t * (y1 - y0) + 0.5).astype(np.int64)
    return xs, ys


def to_pixel(x: float, y: float, height: int, width: int) -> tuple[int, int]:
    """Canvas fraction to (column, row); pixel i spans [i/W, (i+1)/W)."""
    return int(np.floor(x * width)), int(np.floor(y * height))


def rasterize(
    seq: PoseSequence,
    height: int,
    width: int,
    thickness: int | None = None,
    palette: np.ndarray = BONE_PALETTE,
) -> np.ndarray:
    """Draw each frame's bones into an (F, H, W, 3) float32 image, background 0.

    Bone ``e`` gets ``palette[e % len(palette)]``; later bones paint over earlier
    ones. Bones touching an invisible joint are skipped and pixels falling off the
    canvas are dropped.
    """
    if height < 16 or width < 16:
        raise InvalidArgumentError(f"canvas must be at least 16x16, got {height}x{width}")
    thickness = default_thickness(height) if thickness is None else int(thickness)
    if thickness < 1:
        raise InvalidArgumentError("thickness must be >= 1")
    out = np.zeros((seq.n_frames, height, width, 3), dtype=np.float32)
    lo = -((thickness - 1) // 2)
    offsets = np.arange(lo, lo + thickness)
    for f in range(seq.n_frames):
        pts, vis = seq.points[f], seq.visible[f]
        for e, (a, b) in enumerate(seq.edges):
            if not (vis[a] and vis[b]):
                continue
            c0 = to_pixel(pts[a, 0], pts[a, 1], height, width)
            c1 = to_pixel(pts[b, 0], pts[b, 1], height, width)
            xs, ys = _line_pixels(*c0, *c1)
            if thickness > 1:
                xs, ys = np.broadcast_arrays(
                    xs[:, None, None] + offsets[None, :, None],
                    ys[:, None, None] + offsets[None, None, :],
                )
                xs, ys = xs.ravel(), ys.ravel()
            keep = (xs >= 0) & (xs < width) & (ys >= 0) & (ys < height)
            out[f, ys[keep], xs[keep]] = palette[e % len(palette)]
    return out
