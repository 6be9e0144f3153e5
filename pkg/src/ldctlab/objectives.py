"""Fidelity terms, regularizers, image-quality losses, and their gradients.

The weighted least-squares fidelity is

    Phi(x) = 1/2 * sum_i w_i * (y_i - (A x)_i)^2,      w_i = 1 / sigma_i^2,

with gradient A^T W (A x - y). Total variation uses 2-D forward
differences with replicate boundary (zero gradient across the border);
its proximal operator is solved by a fixed-iteration projected-gradient
scheme on the dual problem.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from .core import Image, Sinogram
from .projector import ProjectionOperator

LOSS_KINDS = (
    "mse",
    "mae",
    "tv_loss",
    "ssim_loss",
    "edge_incoherence",
    "projection_consistency",
)


@dataclass(frozen=True)
class WlsFidelity:
    """WLS data term bound to an operator, measured data, and weights."""

    operator: ProjectionOperator
    y_noisy: Sinogram
    weights: np.ndarray  # per-bin inverse variances, shape (n_views, n_dets)

    def __post_init__(self):
        self.operator.check_sinogram(self.y_noisy)
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != self.operator.geometry.shape:
            raise ValueError(
                f"weights shape {w.shape} does not match geometry "
                f"{self.operator.geometry.shape}"
            )
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("weights must be positive and finite")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def value_raw(self, x: np.ndarray) -> float:
        r = self.operator.apply_raw(x) - self.y_noisy.values
        return 0.5 * float(np.sum(self.weights * r * r))

    def gradient_raw(self, x: np.ndarray) -> np.ndarray:
        r = self.operator.apply_raw(x) - self.y_noisy.values
        return self.operator.adjoint_raw(self.weights * r)

    def normal_apply_raw(self, x: np.ndarray) -> np.ndarray:
        """(A^T W A) x, the WLS normal-equations operator."""
        return self.operator.adjoint_raw(self.weights * self.operator.apply_raw(x))


def wls_value(f: WlsFidelity, x: Image) -> float:
    """1/2 * sum w_i (y_i - (Ax)_i)^2; nonnegative."""
    f.operator.check_image(x)
    return f.value_raw(x.values)


def wls_gradient(f: WlsFidelity, x: Image) -> Image:
    """A^T W (A x - y)."""
    f.operator.check_image(x)
    return Image(x.grid, f.gradient_raw(x.values))


def power_method(
    f: WlsFidelity, n_iters: int = 50, seed: int = 0
) -> float:
    """Power-method estimate of the spectral norm of A^T W A."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    v = rng.standard_normal(f.operator.grid.shape)
    v /= np.linalg.norm(v)
    lam = 1.0
    for _ in range(n_iters):
        w = f.normal_apply_raw(v)
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        v = w / lam
    return lam


# ---------------------------------------------------------------------------
# total variation


@dataclass(frozen=True)
class TvRegularizer:
    """TV regularizer: strength, variant, forward differences, replicate edge."""

    strength: float = 1.0
    variant: str = "anisotropic"

    def __post_init__(self):
        if self.strength < 0:
            raise ValueError(f"strength must be >= 0, got {self.strength}")
        if self.variant not in ("anisotropic", "isotropic"):
            raise ValueError(f"unknown TV variant {self.variant!r}")


def tv_forward_diff(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward differences (d_cols, d_rows) with replicate boundary."""
    gx = np.zeros_like(x)
    gy = np.zeros_like(x)
    gx[:, :-1] = x[:, 1:] - x[:, :-1]
    gy[:-1, :] = x[1:, :] - x[:-1, :]
    return gx, gy


def tv_neg_divergence(px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`tv_forward_diff` (a negative divergence)."""
    out = np.zeros_like(px)
    out[:, :-1] -= px[:, :-1]
    out[:, 1:] += px[:, :-1]
    out[:-1, :] -= py[:-1, :]
    out[1:, :] += py[:-1, :]
    return out


def tv_value_raw(r: TvRegularizer, x: np.ndarray) -> float:
    gx, gy = tv_forward_diff(x)
    if r.variant == "anisotropic":
        return float(np.sum(np.abs(gx)) + np.sum(np.abs(gy)))
    return float(np.sum(np.hypot(gx, gy)))


def tv_value(r: TvRegularizer, x: Image) -> float:
    """Unweighted TV of the image under the regularizer's variant."""
    return tv_value_raw(r, x.values)


def tv_subgradient_raw(r: TvRegularizer, x: np.ndarray, eps: float = 1e-12):
    gx, gy = tv_forward_diff(x)
    if r.variant == "anisotropic":
        return tv_neg_divergence(np.sign(gx), np.sign(gy))
    mag = np.hypot(gx, gy)
    mag = np.where(mag > eps, mag, 1.0)
    return tv_neg_divergence(gx / mag, gy / mag)


def tv_prox_raw(
    r: TvRegularizer,
    x: np.ndarray,
    step: float,
    n_iters: int = 20,
    dual_step: float = 0.125,
) -> np.ndarray:
    tau = step * r.strength
    if tau == 0.0:
        return x.copy()

    def primal(v):
        return 0.5 * float(np.sum((v - x) ** 2)) + tau * tv_value_raw(r, v)

    px = np.zeros_like(x)
    py = np.zeros_like(x)
    best = x.copy()
    best_val = primal(best)
    for _ in range(n_iters):
        v = x - tv_neg_divergence(px, py)
        gx, gy = tv_forward_diff(v)
        px = px + dual_step * gx
        py = py + dual_step * gy
        if r.variant == "anisotropic":
            px = np.clip(px, -tau, tau)
            py = np.clip(py, -tau, tau)
        else:
            mag = np.hypot(px, py)
            scale = tau / np.maximum(mag, tau)
            px = px * scale
            py = py * scale
        # dual ascent does not guarantee primal descent; keep the best
        # iterate so the reported objective is non-increasing
        v = x - tv_neg_divergence(px, py)
        val = primal(v)
        if val < best_val:
            best, best_val = v, val
    return best


def tv_prox(r: TvRegularizer, x: Image, step: float, n_iters: int = 20) -> Image:
    """Approximate argmin_v 1/2 ||v - x||^2 + step * strength * TV(v).

    Solved by projected gradient on the dual with a fixed iteration
    budget; dual step 1/8 satisfies the stability bound for the 2-D
    forward-difference operator.
    """
    if not (step > 0):
        raise ValueError(f"step must be > 0, got {step}")
    return Image(x.grid, tv_prox_raw(r, x.values, step, n_iters=n_iters))


# ---------------------------------------------------------------------------
# image-comparison losses


def _check_same_grid(x: Image, ref: Image):
    if x.grid != ref.grid:
        raise ValueError(f"grid mismatch: {x.grid} vs {ref.grid}")


def mse(x: Image, ref: Image) -> float:
    """Mean squared difference."""
    _check_same_grid(x, ref)
    return float(np.mean((x.values - ref.values) ** 2))


def mae(x: Image, ref: Image) -> float:
    """Mean absolute difference."""
    _check_same_grid(x, ref)
    return float(np.mean(np.abs(x.values - ref.values)))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    g = np.exp(-((np.arange(size) - half) ** 2) / (2.0 * sigma**2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(x: Image, ref: Image, data_range: float) -> float:
    """Mean local structural similarity over valid 11x11 Gaussian windows.

    Stabilizers C1 = (0.01 * data_range)^2 and C2 = (0.03 * data_range)^2.
    Symmetric in its image arguments; 1.0 iff the images are identical.
    """
    _check_same_grid(x, ref)
    if not (data_range > 0):
        raise ValueError(f"data_range must be > 0, got {data_range}")
    win = _gaussian_window()
    if min(x.grid.shape) < win.shape[0]:
        raise ValueError("image smaller than the 11x11 SSIM window")
    a, b = x.values, ref.values
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a = convolve2d(a, win, mode="valid")
    mu_b = convolve2d(b, win, mode="valid")
    var_a = convolve2d(a * a, win, mode="valid") - mu_a**2
    var_b = convolve2d(b * b, win, mode="valid") - mu_b**2
    cov = convolve2d(a * b, win, mode="valid") - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


_SOBEL_X = np.array([[1.0, 0.0, -1.0], [2.0, 0.0, -2.0], [1.0, 0.0, -1.0]])


def _sobel_magnitude(x: np.ndarray) -> np.ndarray:
    gx = convolve2d(x, _SOBEL_X, mode="same", boundary="symm")
    gy = convolve2d(x, _SOBEL_X.T, mode="same", boundary="symm")
    return np.hypot(gx, gy)


def edge_incoherence(x: Image, ref: Image) -> float:
    """Mean absolute difference between Sobel gradient-magnitude maps."""
    _check_same_grid(x, ref)
    return float(np.mean(np.abs(_sobel_magnitude(x.values) - _sobel_magnitude(ref.values))))


def projection_consistency_loss(
    op: ProjectionOperator, x: Image, y_ref: Sinogram, mode: str = "mse"
) -> float:
    """MSE or MAE between the forward projection of x and reference data."""
    op.check_image(x)
    op.check_sinogram(y_ref)
    if mode not in ("mse", "mae"):
        raise ValueError(f"mode must be 'mse' or 'mae', got {mode!r}")
    d = op.apply_raw(x.values) - y_ref.values
    if mode == "mse":
        return float(np.mean(d * d))
    return float(np.mean(np.abs(d)))


def tv_loss(x: Image) -> float:
    """Anisotropic TV as an auxiliary training loss (unit strength)."""
    return tv_value_raw(TvRegularizer(1.0, "anisotropic"), x.values)


@dataclass(frozen=True)
class LossSpec:
    """Weighted combination of the supported training losses."""

    weights: dict = field(default_factory=lambda: {"mse": 1.0})

    def __post_init__(self):
        for kind in self.weights:
            if kind not in LOSS_KINDS:
                raise ValueError(f"unknown loss kind {kind!r}, expected {LOSS_KINDS}")
        vals = list(self.weights.values())
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be >= 0")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one loss weight must be positive")


def composite_loss(
    spec: LossSpec,
    x: Image,
    ref: Image,
    data_range: float | None = None,
    op: ProjectionOperator | None = None,
    y_ref: Sinogram | None = None,
) -> float:
    """Evaluate the weighted sum of losses named in the spec.

    ``ssim_loss`` is 1 - SSIM so every component is zero at x == ref;
    ``projection_consistency`` needs the operator and reference sinogram.
    """
    total = 0.0
    for kind, w in spec.weights.items():
        if w == 0.0:
            continue
        if kind == "mse":
            total += w * mse(x, ref)
        elif kind == "mae":
            total += w * mae(x, ref)
        elif kind == "tv_loss":
            total += w * tv_loss(x)
        elif kind == "ssim_loss":
            rng_ = data_range if data_range is not None else float(ref.values.max())
            total += w * (1.0 - ssim(x, ref, rng_))
        elif kind == "edge_incoherence":
            total += w * edge_incoherence(x, ref)
        elif kind == "projection_consistency":
            if op is None or y_ref is None:
                raise ValueError("projection_consistency needs op and y_ref")
            total += w * projection_consistency_loss(op, x, y_ref)
    return total
