"""Axis-aligned Normal densities and latent-space diagnostics.

The density fields may be plain numpy arrays or autodiff Tensors; the
closed forms below are written against operators both types share, so the
same KL expression feeds the training objective (differentiable) and the
test oracles (plain floats).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tensor

LOG_STD_MIN = -8.0
LOG_STD_MAX = 4.0


def _exp(x):
    return x.exp() if isinstance(x, Tensor) else np.exp(x)


def _log(x):
    return x.log() if isinstance(x, Tensor) else np.log(x)


def _last_dim(x) -> int:
    shape = x.data.shape if isinstance(x, Tensor) else np.shape(x)
    return shape[-1]


@dataclass
class DiagonalGaussian:
    """Mean and per-dimension log standard deviation; arrays or Tensors."""

    mean: object
    log_std: object

    def __post_init__(self):
        if not isinstance(self.mean, Tensor):
            self.mean = np.asarray(self.mean, dtype=np.float64)
        if not isinstance(self.log_std, Tensor):
            self.log_std = np.asarray(self.log_std, dtype=np.float64)
        if _last_dim(self.mean) != _last_dim(self.log_std):
            raise ValueError("DiagonalGaussian: mean and log_std dimensionality differ")

    @property
    def dim(self) -> int:
        return _last_dim(self.mean)

    def std(self):
        return _exp(self.log_std)

    def variances(self) -> np.ndarray:
        log_std = self.log_std.data if isinstance(self.log_std, Tensor) else self.log_std
        return np.exp(2.0 * np.asarray(log_std))


@dataclass
class LatentDiagnostics:
    """Sparsity summary of a latent variance vector."""

    gini: float
    effective_rank: float
    variance_vector: np.ndarray


def sample(g: DiagonalGaussian, noise):
    """Reparameterized draw mean + std * noise; differentiable for Tensor fields.

    `noise` must come from an external standard-Normal stream so that runs
    are reproducible; its trailing dimension must equal the density's.
    """
    if _last_dim(noise) != g.dim:
        raise ValueError(f"sample: noise dimension {_last_dim(noise)} != density dimension {g.dim}")
    return g.mean + _exp(g.log_std) * noise


def kl_divergence(q: DiagonalGaussian, p: DiagonalGaussian):
    """Closed-form KL[q || p] for axis-aligned Normals, summed over the last axis.

    0.5 * sum_i [ sq_i^2/sp_i^2 + (mp_i - mq_i)^2/sp_i^2 - 1 + ln(sp_i^2/sq_i^2) ]

    Returns a float for vector inputs, an array/Tensor of batch shape for
    batched inputs.
    """
    if q.dim != p.dim:
        raise ValueError(f"kl_divergence: dimension mismatch {q.dim} vs {p.dim}")
    dl = q.log_std - p.log_std
    ratio = _exp(2.0 * dl)
    mdiff = p.mean - q.mean
    mterm = mdiff * mdiff * _exp(-2.0 * p.log_std)
    per_dim = 0.5 * (ratio + mterm - 1.0) - dl
    out = per_dim.sum(axis=-1)
    if isinstance(out, Tensor):
        return out
    out = np.asarray(out)
    return float(out) if out.ndim == 0 else out


def gini_index(variances: np.ndarray) -> float:
    """Sparsity of a nonnegative vector via its Lorenz curve.

    Entries are sorted ascending, then
        1 - 2 * sum_k (v_k / ||v||_1) * ((d - k + 1/2) / d),   k = 1..d.
    0 for a constant vector, 1 - 1/d for a one-hot vector.
    """
    v = np.asarray(variances, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("gini_index: expected a 1-d vector")
    if np.any(v < 0):
        raise ValueError("gini_index: entries must be nonnegative")
    total = v.sum()
    if total == 0:
        raise ValueError("gini_index: undefined for the all-zero vector")
    d = v.size
    v = np.sort(v)
    k = np.arange(1, d + 1)
    return float(1.0 - 2.0 * np.sum((v / total) * ((d - k + 0.5) / d)))


def effective_rank(variances: np.ndarray) -> float:
    """exp of the entropy of the normalized variance vector, in [1, d]."""
    v = np.asarray(variances, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("effective_rank: expected a 1-d vector")
    if np.any(v < 0):
        raise ValueError("effective_rank: entries must be nonnegative")
    total = v.sum()
    if total == 0:
        raise ValueError("effective_rank: undefined for the all-zero vector")
    p = v / total
    nz = p[p > 0]
    return float(np.exp(-np.sum(nz * np.log(nz))))


def diagnostics(variances: np.ndarray) -> LatentDiagnostics:
    v = np.asarray(variances, dtype=np.float64)
    return LatentDiagnostics(gini=gini_index(v), effective_rank=effective_rank(v),
                             variance_vector=v)


def sensitivity_probe(decoder: Callable[[np.ndarray, np.ndarray], np.ndarray],
                      x: np.ndarray, z: np.ndarray, delta: float = 1e-3) -> np.ndarray:
    """Finite-difference relative condition number of the decoder per latent axis.

    For each latent dimension i,
        zeta_i = (||f(x, z + delta e_i) - f(x, z)|| / ||f(x, z)||) / (delta / ||z||).
    Raises if the base output or z has zero norm (the ratio is undefined).
    """
    z = np.asarray(z, dtype=np.float64)
    base = np.asarray(decoder(x, z), dtype=np.float64)
    base_norm = np.linalg.norm(base)
    z_norm = np.linalg.norm(z)
    if base_norm == 0.0:
        raise ValueError("sensitivity_probe: decoder output has zero norm")
    if z_norm == 0.0:
        raise ValueError("sensitivity_probe: z has zero norm")
    zeta = np.empty(z.size)
    for i in range(z.size):
        dz = z.copy()
        dz[i] += delta
        diff = np.asarray(decoder(x, dz), dtype=np.float64) - base
        zeta[i] = (np.linalg.norm(diff) / base_norm) / (delta / z_norm)
    return zeta
