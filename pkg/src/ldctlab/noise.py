"""Beer-Lambert physics, log transform, and low-dose noise simulation.

The low-dose model treats the detected photon count as approximately
normally distributed and perturbs clean line integrals y elementwise:

    y_noisy = y + sqrt( (1-a)/a * exp(y)/i0 *
                        (1 + (1+a)/a * sigma_e2 * exp(y)/i0) ) * xi

with xi ~ N(0, 1), dose factor a in (0, 1], full-dose incident photon
count i0, and electronic noise variance sigma_e2. A dose factor a means
the low-dose scan keeps an effective flux of a*i0. The same variance
expression evaluated at measured data provides the per-bin weights for
weighted least-squares reconstruction.

Randomness comes from numpy's PCG64 generator seeded through
``np.random.SeedSequence``, which makes realizations reproducible across
platforms and lets callers derive independent per-sample streams via
spawn keys.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import Sinogram

#: counts floor substituted for non-positive measurements in the log transform
EPS_COUNT = 0.1
#: positivity floor for estimated variances
EPS_VAR = 1e-12


class LowCountWarning(UserWarning):
    """Raised when non-positive photon counts were clamped before the log."""


@dataclass(frozen=True)
class NoiseModel:
    """Low-dose acquisition description.

    i0: full-dose incident photon count per detector bin.
    dose_factor: fraction a of full-dose flux, in (0, 1]; a = 1 is noiseless.
    sigma_e2: electronic noise variance in counts^2.
    seed: RNG seed for reproducible noise realizations.
    """

    i0: float
    dose_factor: float
    sigma_e2: float
    seed: int = 0

    def __post_init__(self):
        if not (self.i0 > 0):
            raise ValueError(f"i0 must be > 0, got {self.i0}")
        if not (0.0 < self.dose_factor <= 1.0):
            raise ValueError(f"dose_factor must be in (0, 1], got {self.dose_factor}")
        if self.sigma_e2 < 0:
            raise ValueError(f"sigma_e2 must be >= 0, got {self.sigma_e2}")


def beer_lambert(i0, p):
    """Detected photon count i0 * exp(-p) for line integral p."""
    i0 = np.asarray(i0, dtype=np.float64)
    if np.any(i0 <= 0):
        raise ValueError("i0 must be > 0")
    return i0 * np.exp(-np.asarray(p, dtype=np.float64))


def log_transform(i, i0, eps_count: float = EPS_COUNT):
    """Line integral -log(i / i0); inverse of :func:`beer_lambert`.

    Non-positive counts (possible under heavy noise) are clamped to
    ``eps_count`` and a :class:`LowCountWarning` is emitted.
    """
    i = np.asarray(i, dtype=np.float64)
    i0 = np.asarray(i0, dtype=np.float64)
    if np.any(i0 <= 0):
        raise ValueError("i0 must be > 0")
    clipped = i <= 0
    if np.any(clipped):
        warnings.warn(
            f"{np.count_nonzero(clipped)} non-positive count(s) clamped to "
            f"{eps_count}",
            LowCountWarning,
            stacklevel=2,
        )
        i = np.where(clipped, eps_count, i)
    return -np.log(i / i0)


def noise_sigma2(y, model: NoiseModel):
    """Per-bin noise variance of the low-dose model at line integrals y."""
    a = model.dose_factor
    rel = np.exp(np.asarray(y, dtype=np.float64)) / model.i0
    return (1.0 - a) / a * rel * (1.0 + (1.0 + a) / a * model.sigma_e2 * rel)


def simulate_low_dose(y: Sinogram, model: NoiseModel) -> Sinogram:
    """Add seeded Gaussian low-dose noise to a clean sinogram.

    Deterministic given (y, model): the same seed always produces the
    same realization. ``dose_factor == 1`` returns the input values
    bit-exactly.
    """
    rng = np.random.default_rng(np.random.SeedSequence(model.seed))
    xi = rng.standard_normal(y.values.shape)
    sigma = np.sqrt(noise_sigma2(y.values, model))
    return Sinogram(y.geometry, y.values + sigma * xi)


def estimate_variances(y_noisy: Sinogram, model: NoiseModel) -> np.ndarray:
    """Plug-in per-bin variance estimates from measured low-dose data.

    Evaluates the simulation variance expression at the measured values
    (the clean integrals are unavailable in practice); the result is
    floored at ``EPS_VAR`` so WLS weights 1/sigma^2 stay finite.
    """
    return np.maximum(noise_sigma2(y_noisy.values, model), EPS_VAR)
