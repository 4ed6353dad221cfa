"""Camera conventions, fundamental matrices and epipolar attention masks.

Conventions
-----------
* Poses are world-to-camera: ``x_cam = R @ x_world + t``.
* Pixel coordinates are ``(u, v)`` = (column, row) with the origin at the
  top-left corner; the center of grid cell ``(row, col)`` sits at
  ``(col + 0.5, row + 0.5)`` before scaling to image resolution.
* Grid resolutions are ``(height, width)`` tuples.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


# Keys closer than this to the tau boundary count as outside it, so that
# exact geometric ties are not decided by last-bit rounding.
TIE_TOLERANCE = 1e-9


class GeometryError(ValueError):
    pass


class CoincidentCameras(GeometryError):
    """Raised when two camera centers coincide and F is undefined."""


class DegenerateLine(GeometryError):
    """Raised when a query pixel is an epipole (F @ x has no direction)."""


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if R.shape != (3, 3):
            raise GeometryError(f"rotation must be 3x3, got {R.shape}")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9, rtol=0):
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise GeometryError("rotation determinant is not +1")
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise GeometryError("resolution must be at least 1x1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project (N, 3) world points; returns (N, 2) pixels and (N,) depths."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        cam = pts @ self.rotation.T + self.translation
        z = cam[:, 2]
        uv = np.stack([self.fx * cam[:, 0] / z + self.cx, self.fy * cam[:, 1] / z + self.cy], axis=1)
        return uv, z


@dataclass(frozen=True)
class Trajectory:
    poses: tuple[CameraPose, ...]

    def __post_init__(self):
        poses = tuple(self.poses)
        if not poses:
            raise GeometryError("trajectory needs at least one pose")
        res = {(p.width, p.height) for p in poses}
        if len(res) != 1:
            raise GeometryError(f"poses disagree on resolution: {sorted(res)}")
        object.__setattr__(self, "poses", poses)

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, k):
        return self.poses[k]


def same_pose(a: CameraPose, b: CameraPose, atol: float = 1e-9) -> bool:
    return bool(
        np.allclose(a.rotation, b.rotation, atol=atol, rtol=0)
        and np.allclose(a.translation, b.translation, atol=atol, rtol=0)
    )


def check_shared_first_pose(trajectories: Sequence[Trajectory], atol: float = 1e-9) -> bool:
    """True when every trajectory starts from the same extrinsics."""
    first = trajectories[0][0]
    return all(same_pose(first, tr[0], atol) for tr in trajectories[1:])


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def relative_pose(a: CameraPose, b: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    """Rigid transform taking camera-a coordinates to camera-b coordinates."""
    R_rel = b.rotation @ a.rotation.T
    t_rel = b.translation - R_rel @ a.translation
    return R_rel, t_rel


def _normalize_f(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    norm = np.linalg.norm(m)
    if norm == 0:
        raise GeometryError("fundamental matrix is zero")
    m = m / norm
    flat = m.ravel()
    nz = np.flatnonzero(np.abs(flat) > 1e-12)
    if flat[nz[0]] < 0:
        m = -m
    return m


@dataclass(frozen=True)
class FundamentalMatrix:
    """F with unit Frobenius norm and positive first nonzero entry (row-major)."""

    m: np.ndarray

    def __post_init__(self):
        m = _normalize_f(self.m)
        sv = np.linalg.svd(m, compute_uv=False)
        if sv[2] >= 1e-7 * sv[0]:
            raise GeometryError(f"fundamental matrix has rank 3 (singular values {sv})")
        object.__setattr__(self, "m", m)

    @property
    def T(self) -> "FundamentalMatrix":
        return FundamentalMatrix(self.m.T)


def fundamental_matrix(a: CameraPose, b: CameraPose) -> FundamentalMatrix:
    """F mapping pixels of camera a to epipolar lines in camera b (x_b^T F x_a = 0)."""
    R_rel, t_rel = relative_pose(a, b)
    if np.linalg.norm(t_rel) <= 1e-9:
        raise CoincidentCameras("camera centers coincide; fundamental matrix is undefined")
    E = skew(t_rel) @ R_rel
    return FundamentalMatrix(b.K_inv.T @ E @ a.K_inv)


def _unit_lines(lines: np.ndarray, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = np.hypot(lines[..., 0], lines[..., 1])
    scale = np.linalg.norm(points, axis=-1)
    ok = n > 1e-12 * scale
    safe = np.where(ok, n, 1.0)
    return lines / safe[..., None], ok


def epipolar_line(f: FundamentalMatrix, query) -> np.ndarray:
    """Epipolar line of a camera-a pixel in camera b, scaled so l1^2 + l2^2 = 1."""
    x = np.array([query[0], query[1], 1.0])
    line, ok = _unit_lines(f.m @ x, x)
    if not ok:
        raise DegenerateLine(f"query {tuple(query)} is an epipole")
    return line


def point_line_distance(lines: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Distance of (N, 2) points to (N, 3) lines (any scale)."""
    lines = np.asarray(lines, dtype=float)
    points = np.asarray(points, dtype=float)
    num = np.abs(lines[..., 0] * points[..., 0] + lines[..., 1] * points[..., 1] + lines[..., 2])
    return num / np.hypot(lines[..., 0], lines[..., 1])


def symmetric_epipolar_distance(f: FundamentalMatrix, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Mean of the two point-to-epipolar-line distances for (N, 2) matches."""
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    x2 = np.atleast_2d(np.asarray(x2, dtype=float))
    h1 = np.column_stack([x1, np.ones(len(x1))])
    h2 = np.column_stack([x2, np.ones(len(x2))])
    d2 = point_line_distance(h1 @ f.m.T, x2)
    d1 = point_line_distance(h2 @ f.m, x1)
    return 0.5 * (d1 + d2)


def grid_centers(feature_res: tuple[int, int], image_res: tuple[int, int]) -> np.ndarray:
    """Homogeneous image coordinates (H*W, 3) of feature-cell centers, row-major."""
    fh, fw = feature_res
    ih, iw = image_res
    v, u = np.meshgrid(np.arange(fh), np.arange(fw), indexing="ij")
    us = (u.ravel() + 0.5) * (iw / fw)
    vs = (v.ravel() + 0.5) * (ih / fh)
    return np.column_stack([us, vs, np.ones(fh * fw)])


@dataclass
class EpipolarMask:
    """Boolean attention mask; row = query cell, column = key cell (row-major grids)."""

    query_resolution: tuple[int, int]
    key_resolution: tuple[int, int]
    bits: np.ndarray
    tau: float
    pseudo: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        hq, wq = self.query_resolution
        hk, wk = self.key_resolution
        if self.bits.shape != (hq * wq, hk * wk):
            raise GeometryError(f"bits shape {self.bits.shape} does not match resolutions")
        self.bits = np.asarray(self.bits, dtype=bool)

    def row_image(self, q: int) -> np.ndarray:
        return self.bits[q].reshape(self.key_resolution)

    def to_pgm(self, path, query_index: int | None = None) -> None:
        """Write one query row as a key-grid image, or the full matrix when no row is given."""
        img = self.bits if query_index is None else self.row_image(query_index)
        write_pgm(path, img.astype(np.uint8) * 255)

    def to_csv(self, path) -> None:
        q, k = np.nonzero(self.bits)
        with open(path, "w", newline="\n") as fh:
            fh.write("q_index,k_index\n")
            for a, b in zip(q.tolist(), k.tolist()):
                fh.write(f"{a},{b}\n")

    @classmethod
    def from_csv(cls, path, query_resolution, key_resolution, tau) -> "EpipolarMask":
        bits = np.zeros((query_resolution[0] * query_resolution[1], key_resolution[0] * key_resolution[1]), bool)
        lines = Path(path).read_text().splitlines()[1:]
        for line in lines:
            a, b = line.split(",")
            bits[int(a), int(b)] = True
        return cls(tuple(query_resolution), tuple(key_resolution), bits, tau)


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    if tokens[0] != "P5":
        raise ValueError("not a binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    return np.frombuffer(data[pos : pos + w * h], dtype=np.uint8).reshape(h, w)


def epipolar_mask(
    f: FundamentalMatrix,
    query_res: tuple[int, int],
    key_res: tuple[int, int],
    image_res: tuple[int, int],
    tau: float = 3.0,
) -> EpipolarMask:
    """Mask bit (q, k) set iff key cell k lies within tau image pixels of q's epipolar line.

    "Within" means distance < tau - TIE_TOLERANCE. Epipole queries produce
    all-zero rows.
    """
    if tau <= 0:
        raise GeometryError("tau must be positive")
    for r in (query_res, key_res, image_res):
        if r[0] < 1 or r[1] < 1:
            raise GeometryError(f"invalid resolution {r}")
    xq = grid_centers(query_res, image_res)
    xk = grid_centers(key_res, image_res)
    lines, ok = _unit_lines(xq @ f.m.T, xq)
    dist = np.abs(lines @ xk.T)
    bits = (dist < tau - TIE_TOLERANCE) & ok[:, None]
    return EpipolarMask(tuple(query_res), tuple(key_res), bits, float(tau))


def pseudo_epipolar_mask(
    res: tuple[int, int],
    tau: float,
    rng: np.random.Generator,
    image_res: tuple[int, int] | None = None,
    angles: np.ndarray | None = None,
) -> EpipolarMask:
    """Random-slope lines through each query cell's own center.

    ``angles`` overrides the sampled slope angles (radians, one per query).
    """
    if tau <= 0:
        raise GeometryError("tau must be positive")
    image_res = tuple(res) if image_res is None else tuple(image_res)
    x = grid_centers(res, image_res)
    n = len(x)
    theta = rng.uniform(0.0, np.pi, size=n) if angles is None else np.broadcast_to(np.asarray(angles, float), (n,))
    # normal of a line with direction (cos, sin)
    nx, ny = -np.sin(theta), np.cos(theta)
    lines = np.column_stack([nx, ny, -(nx * x[:, 0] + ny * x[:, 1])])
    bits = np.abs(lines @ x.T) < tau - TIE_TOLERANCE
    return EpipolarMask(tuple(res), tuple(res), bits, float(tau), pseudo=True)


def frame_mask(
    a: CameraPose,
    b: CameraPose,
    feature_res: tuple[int, int],
    tau: float,
    rng: np.random.Generator,
) -> EpipolarMask:
    """Epipolar mask for a frame pair, falling back to pseudo lines for coincident cameras."""
    image_res = (a.height, a.width)
    try:
        f = fundamental_matrix(a, b)
    except CoincidentCameras:
        return pseudo_epipolar_mask(feature_res, tau, rng, image_res=image_res)
    return epipolar_mask(f, feature_res, feature_res, image_res, tau)


class PseudoMaskSource:
    """Hands out pseudo masks for a denoising loop.

    With ``resample=True`` (default) every call draws fresh slopes; otherwise the
    first mask is reused for the whole generation.
    """

    def __init__(self, res, tau, rng, image_res=None, resample=True):
        self.res = tuple(res)
        self.tau = tau
        self.rng = rng
        self.image_res = image_res
        self.resample = resample
        self._cached = None

    def __call__(self) -> EpipolarMask:
        if self.resample or self._cached is None:
            self._cached = pseudo_epipolar_mask(self.res, self.tau, self.rng, self.image_res)
        return self._cached
