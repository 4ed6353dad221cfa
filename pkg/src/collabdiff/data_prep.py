"""Dataset construction: pose-file ingestion, video folding, homography augmentation.

Pose files follow the RealEstate10K text layout, one frame per line::

    timestamp_us fx fy cx cy k1 k2 r11 r12 r13 t1 r21 r22 r23 t2 r31 r32 r33 t3

with intrinsics normalized by image width/height and a world-to-camera
3x4 extrinsic. Lines whose first token is not a number (e.g. the video URL
header) are skipped.

Homographies act on pixel coordinates with the origin at the center of the
top-left pixel: pixel ``(row, col)`` has coordinates ``(x, y) = (col, row)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import CameraPose

N_POSE_FIELDS = 19


class MalformedLine(ValueError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class SingularHomography(ValueError):
    pass


class ExhaustedRetries(RuntimeError):
    pass


@dataclass(frozen=True)
class PoseFileRecord:
    timestamp: int
    intrinsics: tuple[float, float, float, float]  # fx, fy, cx, cy as fractions of width/height
    extrinsic: np.ndarray  # (3, 4) world-to-camera
    distortion: tuple[float, float] = (0.0, 0.0)

    def __eq__(self, other):
        if not isinstance(other, PoseFileRecord):
            return NotImplemented
        return (
            self.timestamp == other.timestamp
            and self.intrinsics == other.intrinsics
            and self.distortion == other.distortion
            and np.array_equal(self.extrinsic, other.extrinsic)
        )

    def pixel_intrinsics(self, width: int, height: int) -> tuple[float, float, float, float]:
        fx, fy, cx, cy = self.intrinsics
        return fx * width, fy * height, cx * width, cy * height

    def to_pose(self, width: int, height: int) -> CameraPose:
        """Camera pose at the given resolution; the rotation is snapped to SO(3)."""
        R = self.extrinsic[:, :3]
        U, _, Vt = np.linalg.svd(R)
        R = U @ Vt
        if np.linalg.det(R) < 0:
            R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
        return CameraPose(R, self.extrinsic[:, 3], *self.pixel_intrinsics(width, height), width, height)

    def to_line(self) -> str:
        vals = [*self.intrinsics, *self.distortion, *self.extrinsic.ravel().tolist()]
        return " ".join([str(self.timestamp), *(repr(float(v)) for v in vals)])


def _is_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def parse_pose_file(text: str) -> list[PoseFileRecord]:
    records = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens or not _is_number(tokens[0]):
            continue
        if len(tokens) != N_POSE_FIELDS:
            raise MalformedLine(line_no, f"expected {N_POSE_FIELDS} fields, got {len(tokens)}")
        try:
            timestamp = int(tokens[0])
        except ValueError:
            raise MalformedLine(line_no, f"timestamp {tokens[0]!r} is not an integer") from None
        try:
            vals = [float(tok) for tok in tokens[1:]]
        except ValueError as exc:
            raise MalformedLine(line_no, str(exc)) from None
        if not all(math.isfinite(v) for v in vals):
            raise MalformedLine(line_no, "non-finite value")
        ext = np.array(vals[6:], dtype=float).reshape(3, 4)
        R = ext[:, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-4, rtol=0):
            raise MalformedLine(line_no, "rotation is not orthonormal")
        records.append(PoseFileRecord(timestamp, tuple(vals[:4]), ext, tuple(vals[4:6])))
    return records


def format_pose_file(records: Sequence[PoseFileRecord], header: str | None = None) -> str:
    lines = [] if header is None else [header]
    lines.extend(r.to_line() for r in records)
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class FoldedClipPair:
    clip_a: tuple[int, ...]
    clip_b: tuple[int, ...]
    poses_a: tuple = ()
    poses_b: tuple = ()


def fold_sequence(frames: Sequence, poses: Sequence | None = None) -> FoldedClipPair:
    """Split 2N-1 frames at the middle into two N-frame clips sharing the middle frame.

    ``clip_a`` runs from the middle back to the start, ``clip_b`` from the
    middle to the end. Indices are 0-based into ``frames``.
    """
    L = len(frames)
    if L < 3 or L % 2 == 0:
        raise ValueError(f"need an odd number of frames >= 3, got {L}")
    if poses is not None and len(poses) != L:
        raise ValueError("poses are not aligned with frames")
    mid = L // 2
    clip_a = tuple(range(mid, -1, -1))
    clip_b = tuple(range(mid, L))
    if poses is None:
        return FoldedClipPair(clip_a, clip_b)
    return FoldedClipPair(clip_a, clip_b, tuple(poses[i] for i in clip_a), tuple(poses[i] for i in clip_b))


@dataclass(frozen=True)
class HomographyControls:
    t: tuple[float, float] = (0.0, 0.0)  # pixels
    theta: float = 0.0  # radians
    s: tuple[float, float] = (0.0, 0.0)
    sh: tuple[float, float] = (0.0, 0.0)
    p: tuple[float, float] = (0.0, 0.0)  # 1 / pixels

    def as_vector(self) -> np.ndarray:
        return np.array([*self.t, self.theta, *self.s, *self.sh, *self.p], dtype=float)

    @classmethod
    def from_vector(cls, v) -> "HomographyControls":
        v = [float(x) for x in v]
        if len(v) != 9 or not all(math.isfinite(x) for x in v):
            raise ValueError("controls need 9 finite values")
        return cls((v[0], v[1]), v[2], (v[3], v[4]), (v[5], v[6]), (v[7], v[8]))

    def to_dict(self) -> dict:
        return {"t": list(self.t), "theta": self.theta, "s": list(self.s), "sh": list(self.sh), "p": list(self.p)}

    @classmethod
    def from_dict(cls, d) -> "HomographyControls":
        return cls(tuple(d["t"]), float(d["theta"]), tuple(d["s"]), tuple(d["sh"]), tuple(d["p"]))


def homography_factors(c: HomographyControls) -> list[np.ndarray]:
    """The five factors [translation, rotation, scale, shear, projection]."""
    ct, st = math.cos(c.theta), math.sin(c.theta)
    return [
        np.array([[1.0, 0.0, c.t[0]], [0.0, 1.0, c.t[1]], [0.0, 0.0, 1.0]]),
        np.array([[ct, -st, 0.0], [st, ct, 0.0], [0.0, 0.0, 1.0]]),
        np.array([[1.0 + c.s[0], 0.0, 0.0], [0.0, 1.0 + c.s[1], 0.0], [0.0, 0.0, 1.0]]),
        np.array([[1.0, c.sh[0], 0.0], [c.sh[1], 1.0, 0.0], [0.0, 0.0, 1.0]]),
        np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [c.p[0], c.p[1], 1.0]]),
    ]


def build_homography(c: HomographyControls) -> np.ndarray:
    """H = H_t @ H_r @ H_s @ H_sh @ H_p."""
    Ht, Hr, Hs, Hsh, Hp = homography_factors(c)
    H = Ht @ Hr @ Hs @ Hsh @ Hp
    if not np.all(np.isfinite(H)) or abs(np.linalg.det(H)) < 1e-12:
        raise SingularHomography(f"homography is singular for {c}")
    return H


def interpolate_controls(c_final: HomographyControls, k: int, N: int) -> HomographyControls:
    """Controls for frame ``k`` (0-based) of N, ramping linearly from zero at k=0."""
    if N < 2:
        raise ValueError("need at least two frames")
    if not 0 <= k < N:
        raise ValueError(f"frame {k} outside 0..{N - 1}")
    f = k / (N - 1)
    return HomographyControls.from_vector(c_final.as_vector() * f)


def _source_coords(H: np.ndarray, h: int, w: int):
    if not np.all(np.isfinite(H)) or abs(np.linalg.det(H)) < 1e-12:
        raise SingularHomography("homography is singular")
    Hinv = np.linalg.inv(H)
    y, x = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    pts = np.stack([x, y, np.ones_like(x)], axis=-1) @ Hinv.T
    den = pts[..., 2]
    ok = den > 0
    safe = np.where(ok, den, 1.0)
    xs, ys = pts[..., 0] / safe, pts[..., 1] / safe
    valid = ok & (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    return xs, ys, valid


def valid_fraction(H: np.ndarray, size: tuple[int, int]) -> float:
    """Fraction of output pixels of an ``(h, w)`` frame that map inside the source."""
    return float(_source_coords(H, *size)[2].mean())


def warp_frame(image: np.ndarray, H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-warp ``image`` (h, w[, ch]) by H with bilinear sampling.

    Returns the warped float image and a boolean validity mask; samples that
    fall outside the source are zero and invalid.
    """
    img = np.asarray(image, dtype=float)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    h, w = img.shape[:2]
    xs, ys, valid = _source_coords(H, h, w)
    xs = np.where(valid, xs, 0.0)
    ys = np.where(valid, ys, 0.0)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    out = (
        (1 - fx) * (1 - fy) * img[y0, x0]
        + fx * (1 - fy) * img[y0, x1]
        + (1 - fx) * fy * img[y1, x0]
        + fx * fy * img[y1, x1]
    )
    out = np.where(valid[..., None], out, 0.0)
    return (out[..., 0] if squeeze else out), valid


DEFAULT_SCALES = {"t": 8.0, "theta": 0.05, "s": 0.05, "sh": 0.05, "p": 1e-4}


def sample_controls(
    rng: np.random.Generator,
    scales: dict | None = None,
    image_size: tuple[int, int] = (256, 256),
    min_valid: float = 0.5,
    max_tries: int = 100,
) -> HomographyControls:
    """Gaussian last-frame controls, redrawn while H is singular or mostly invalid."""
    sc = {**DEFAULT_SCALES, **(scales or {})}
    if any(v < 0 for v in sc.values()):
        raise ValueError("scales must be non-negative")
    std = np.array([sc["t"], sc["t"], sc["theta"], sc["s"], sc["s"], sc["sh"], sc["sh"], sc["p"], sc["p"]])
    for _ in range(max_tries):
        c = HomographyControls.from_vector(rng.normal(0.0, 1.0, size=9) * std)
        try:
            H = build_homography(c)
        except SingularHomography:
            continue
        if valid_fraction(H, image_size) >= min_valid:
            return c
    raise ExhaustedRetries(f"no acceptable controls after {max_tries} draws")


def augment_clip(frames: Sequence[np.ndarray], c_final: HomographyControls):
    """Warp each frame by its interpolated homography; frame 0 is returned unchanged."""
    N = len(frames)
    out = []
    for k, frame in enumerate(frames):
        H = build_homography(interpolate_controls(c_final, k, N))
        out.append(warp_frame(frame, H))
    return out
