"""Analytic Gaussian world with exact joint and pairwise denoisers.

M videos of dimension d, jointly ``N(0, Sigma)`` with ``Sigma_ii = I_d`` and
``Sigma_ij = rho * I_d``. Under the forward process the noisy marginal of any
subset S is ``N(0, C_t)`` with ``C_t = alpha_bar_t * Sigma_S + (1 - alpha_bar_t) * I``,
so the exact noise prediction is ``sqrt(1 - alpha_bar_t) * C_t^{-1} v_t``.

Sample arrays use the layout ``(M, n, d)``: leading video axis, then batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import linalg

from .noise_schedule import NoiseSchedule


@dataclass(frozen=True)
class GaussianToyWorld:
    M: int
    d: int
    rho: float
    seed: int | None = None
    sigma: np.ndarray = field(init=False, repr=False, compare=False)
    chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.M < 2 or self.d < 1:
            raise ValueError("need M >= 2 and d >= 1")
        if not -1.0 / (self.M - 1) < self.rho <= 1.0:
            raise ValueError(f"rho must lie in (-1/(M-1), 1], got {self.rho}")
        block = np.full((self.M, self.M), self.rho)
        np.fill_diagonal(block, 1.0)
        sigma = np.kron(block, np.eye(self.d))
        try:
            chol = linalg.cholesky(sigma, lower=True)
        except linalg.LinAlgError:
            # rho == 1 is PSD only; fall back to a symmetric square root
            w, V = np.linalg.eigh(sigma)
            if w.min() < -1e-12:
                raise ValueError("covariance is not positive semidefinite")
            chol = V * np.sqrt(np.clip(w, 0.0, None))
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "chol", chol)

    @property
    def dim(self) -> int:
        return self.M * self.d

    def block_indices(self, videos) -> np.ndarray:
        return np.concatenate([np.arange(k * self.d, (k + 1) * self.d) for k in videos])

    def marginal(self, videos) -> np.ndarray:
        idx = self.block_indices(videos)
        return self.sigma[np.ix_(idx, idx)]

    def to_config(self) -> dict:
        return {"M": self.M, "d": self.d, "rho": self.rho, "seed": self.seed}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_config(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "GaussianToyWorld":
        cfg = json.loads(Path(path).read_text())
        return cls(int(cfg["M"]), int(cfg["d"]), float(cfg["rho"]), cfg.get("seed"))


def flatten_videos(v: np.ndarray) -> np.ndarray:
    """(M, n, d) -> (n, M*d)."""
    M, n, d = v.shape
    return np.transpose(v, (1, 0, 2)).reshape(n, M * d)


def unflatten_videos(x: np.ndarray, M: int) -> np.ndarray:
    """(n, M*d) -> (M, n, d)."""
    n = x.shape[0]
    return np.transpose(x.reshape(n, M, -1), (1, 0, 2))


def sample_reference(world: GaussianToyWorld, n: int, rng: np.random.Generator) -> np.ndarray:
    z = rng.standard_normal((n, world.dim))
    return unflatten_videos(z @ world.chol.T, world.M)


def noisy_covariance(sigma: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    a = schedule[t]
    return a * sigma + (1.0 - a) * np.eye(len(sigma))


def _noise_matrix(sigma: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Matrix B with eps = v @ B for row-vector batches (B symmetric)."""
    a = schedule[t]
    if not a < 1.0:
        raise ValueError(f"alpha_bar[{t}] = 1; noise prediction undefined")
    C = noisy_covariance(sigma, t, schedule)
    C_inv = linalg.inv(C)
    assert np.all(np.isfinite(C_inv)), "singular noisy covariance"
    return np.sqrt(1.0 - a) * C_inv


def exact_pair_noise(world: GaussianToyWorld, pair, v_pair_t, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Exact noise prediction for the 2d-dimensional pair marginal."""
    i, j = pair
    if i == j:
        raise ValueError("pair needs two distinct videos")
    B = _noise_matrix(world.marginal((i, j)), t, schedule)
    return np.asarray(v_pair_t, dtype=float) @ B


def exact_joint_noise(world: GaussianToyWorld, v_t, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Exact noise prediction for the full M*d-dimensional state (flat layout)."""
    B = _noise_matrix(world.sigma, t, schedule)
    return np.asarray(v_t, dtype=float) @ B


def gaussian_log_density(x, cov: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    k = cov.shape[0]
    sign, logdet = np.linalg.slogdet(cov)
    quad = np.einsum("ni,ij,nj->n", x, linalg.inv(cov), x)
    return -0.5 * (quad + logdet + k * np.log(2.0 * np.pi))


class PairDenoiser:
    """Exact pair denoiser: ``(v_i, v_j, t, cond) -> (eps_i, eps_j)``.

    Works for any pair of the world; per-(pair, t) matrices are cached.
    """

    def __init__(self, world: GaussianToyWorld, schedule: NoiseSchedule):
        self.world = world
        self.schedule = schedule
        self._matrix = lru_cache(maxsize=None)(self._build)

    def _build(self, i: int, j: int, t: int) -> np.ndarray:
        return _noise_matrix(self.world.marginal((i, j)), t, self.schedule)

    def __call__(self, v_i, v_j, t: int, cond=None):
        i, j = cond if cond is not None else (0, 1)
        d = self.world.d
        B = self._matrix(int(i), int(j), int(t))
        eps = np.concatenate([v_i, v_j], axis=-1) @ B
        return eps[..., :d], eps[..., d:]


class JointDenoiser:
    """Exact joint noise prediction on (M, n, d) states."""

    def __init__(self, world: GaussianToyWorld, schedule: NoiseSchedule):
        self.world = world
        self.schedule = schedule
        self._matrix = lru_cache(maxsize=None)(lambda t: _noise_matrix(world.sigma, t, schedule))

    def __call__(self, v, t: int) -> np.ndarray:
        flat = flatten_videos(v) @ self._matrix(int(t))
        return unflatten_videos(flat, self.world.M)


def covariance_error(samples: np.ndarray, target: np.ndarray) -> float:
    """Relative Frobenius error of the empirical covariance of (n, D) samples."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 3:
        samples = flatten_videos(samples)
    if samples.shape[0] < 2:
        raise ValueError("need at least two samples")
    emp = np.cov(samples, rowvar=False)
    return float(np.linalg.norm(emp - target) / np.linalg.norm(target))
