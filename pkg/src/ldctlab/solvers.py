"""Iterative reconstruction: gradient descent, ADMM with TV, and
denoiser-driven loops with both training regimes.

The denoiser-driven iteration alternates a conjugate-gradient data
half-step

    x_half = argmin_x  Phi(x) + alpha/2 * ||x - x_t||^2

with a denoising step that either takes the denoiser output directly or
blends it convexly,

    x_{t+1} = (1 - lam/(beta+lam)) * x_half + lam/(beta+lam) * D(x_half).

Two training regimes are provided: a single denoiser fitted on FBP
initializations and reused at every iteration, or a fresh denoiser per
iteration fitted on the intermediate images the loop actually produces.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import Image, Sinogram
from .learned import AdamW, ConvDenoiser
from .noise import NoiseModel, estimate_variances
from .objectives import (
    TvRegularizer,
    WlsFidelity,
    power_method,
    tv_prox_raw,
    tv_subgradient_raw,
    tv_value_raw,
)
from .projector import FbpFilter, ProjectionOperator, fbp


class DivergenceError(RuntimeError):
    """Objective increased for several consecutive iterations."""


class CgWarning(UserWarning):
    """Inner conjugate-gradient solve stopped before reaching tolerance."""


@dataclass(frozen=True)
class SolverConfig:
    """Iteration counts, step sizes, and penalty weights for all solvers.

    ``step`` is either a float or "auto" (inverse power-method estimate
    of the WLS curvature norm). ``red_lambda``, ``alpha`` and ``beta``
    drive the denoiser-based loop; ``red_mode`` selects the direct
    denoiser update or the convex blend.
    """

    n_iters: int
    step: float | str = "auto"
    rho: float = 1.0
    red_lambda: float = 0.02
    alpha: float = 1.0
    beta: float = 1.0
    red_mode: str = "direct"
    cg_iters: int = 30
    tol: float = 1e-8
    tv_prox_iters: int = 20

    def __post_init__(self):
        if self.n_iters < 0:
            raise ValueError(f"n_iters must be >= 0, got {self.n_iters}")
        if isinstance(self.step, str) and self.step != "auto":
            raise ValueError(f"step must be a float or 'auto', got {self.step!r}")
        if not (self.rho > 0):
            raise ValueError(f"rho must be > 0, got {self.rho}")
        if self.red_lambda < 0 or self.alpha < 0 or self.beta < 0:
            raise ValueError("red_lambda, alpha, beta must be >= 0")
        if self.red_mode not in ("direct", "convex"):
            raise ValueError(f"red_mode must be 'direct' or 'convex', got {self.red_mode!r}")
        if self.cg_iters < 1:
            raise ValueError("cg_iters must be >= 1")


@dataclass(frozen=True)
class AdmmState:
    """Primal, auxiliary, and scaled-dual images of one ADMM iteration."""

    x: Image
    v: Image
    u: Image

    def __post_init__(self):
        if not (self.x.grid == self.v.grid == self.u.grid):
            raise ValueError("ADMM state images must share one grid")


@dataclass(frozen=True)
class DenoiserContract:
    """Shape-preserving denoiser D with opaque parameters.

    ``denoise`` maps an Image (or Sinogram, for projection-domain use)
    to the same type on the same grid/geometry.
    """

    denoise: Callable
    params: Any = None
    descriptor: str = "denoiser"


def IdentityDenoiser() -> DenoiserContract:
    return DenoiserContract(denoise=lambda img: img, descriptor="identity")


def GaussianDenoiser(sigma: float) -> DenoiserContract:
    """Gaussian smoothing denoiser; works on images and sinograms."""

    def denoise(obj):
        smoothed = gaussian_filter(obj.values, sigma=sigma, mode="nearest")
        if isinstance(obj, Sinogram):
            return Sinogram(obj.geometry, smoothed)
        return Image(obj.grid, smoothed)

    return DenoiserContract(denoise=denoise, params=sigma, descriptor=f"gaussian(sigma={sigma})")


# ---------------------------------------------------------------------------
# conjugate gradient


def cg_solve(
    apply_b: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    x0: np.ndarray,
    max_iters: int,
    tol: float,
) -> tuple[np.ndarray, bool, float]:
    """Conjugate gradient for SPD systems; returns (x, converged, rel_res)."""
    x = x0.copy()
    r = b - apply_b(x)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return np.zeros_like(b), True, 0.0
    p = r.copy()
    rs = float(np.sum(r * r))
    for _ in range(max_iters):
        if np.sqrt(rs) / b_norm <= tol:
            return x, True, float(np.sqrt(rs) / b_norm)
        ap = apply_b(p)
        alpha = rs / float(np.sum(p * ap))
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = float(np.sum(r * r))
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, np.sqrt(rs) / b_norm <= tol, float(np.sqrt(rs) / b_norm)


def _resolve_step(f: WlsFidelity, cfg: SolverConfig) -> float:
    if cfg.step == "auto":
        lam = power_method(f)
        if lam <= 0.0:
            raise ValueError("cannot auto-size the step: operator norm is zero")
        return 1.0 / lam
    return float(cfg.step)


# ---------------------------------------------------------------------------
# classic solvers


def gd_reconstruct(
    f: WlsFidelity, r: TvRegularizer, cfg: SolverConfig, x0: Image
) -> Image:
    """(Sub)gradient descent on the WLS + TV objective.

    Aborts with :class:`DivergenceError` if the objective increases for
    five consecutive iterations.
    """
    f.operator.check_image(x0)
    step = _resolve_step(f, cfg)
    x = x0.values.copy()

    def objective(z):
        val = f.value_raw(z)
        if r.strength > 0:
            val += r.strength * tv_value_raw(r, z)
        return val

    prev = objective(x)
    bad_streak = 0
    for it in range(cfg.n_iters):
        g = f.gradient_raw(x)
        if r.strength > 0:
            g = g + r.strength * tv_subgradient_raw(r, x)
        x = x - step * g
        cur = objective(x)
        if cur > prev:
            bad_streak += 1
            if bad_streak >= 5:
                raise DivergenceError(
                    f"objective rose for 5 consecutive iterations "
                    f"(iteration {it}, objective {cur:.6e}, step {step:.3e})"
                )
        else:
            bad_streak = 0
        prev = cur
    return Image(x0.grid, x)


def admm_reconstruct(
    f: WlsFidelity,
    r: TvRegularizer,
    cfg: SolverConfig,
    x0: Image,
    return_info: bool = False,
):
    """ADMM on the split WLS + TV problem.

    Per outer iteration: CG solve of (A^T W A + rho I) x = A^T W y +
    rho v - u, TV proximal update of v at x + u/rho, then the dual
    ascent u <- u + rho (x - v). A CG solve that misses its tolerance
    raises :class:`CgWarning` and the iteration continues.
    """
    f.operator.check_image(x0)
    rho = cfg.rho
    x = x0.values.copy()
    v = x.copy()
    u = np.zeros_like(x)
    at_wy = f.operator.adjoint_raw(f.weights * f.y_noisy.values)

    def apply_b(z):
        return f.normal_apply_raw(z) + rho * z

    residuals = []
    for _ in range(cfg.n_iters):
        rhs = at_wy + rho * v - u
        x, converged, rel = cg_solve(apply_b, rhs, x, cfg.cg_iters, cfg.tol)
        if not converged:
            warnings.warn(
                f"ADMM x-update CG stopped at relative residual {rel:.2e}",
                CgWarning,
                stacklevel=2,
            )
        v = tv_prox_raw(r, x + u / rho, 1.0 / rho, n_iters=cfg.tv_prox_iters)
        u = u + rho * (x - v)
        residuals.append(float(np.linalg.norm(x - v)))

    result = Image(x0.grid, x)
    if return_info:
        state = AdmmState(result, Image(x0.grid, v), Image(x0.grid, u))
        return result, {"primal_residuals": residuals, "state": state}
    return result


# ---------------------------------------------------------------------------
# denoiser-driven loop


def _red_half_step(f: WlsFidelity, x: np.ndarray, cfg: SolverConfig) -> np.ndarray:
    """argmin_z Phi(z) + alpha/2 ||z - x||^2 via CG, warm-started at x."""
    rhs = f.operator.adjoint_raw(f.weights * f.y_noisy.values) + cfg.alpha * x

    def apply_b(z):
        return f.normal_apply_raw(z) + cfg.alpha * z

    z, converged, rel = cg_solve(apply_b, rhs, x, cfg.cg_iters, cfg.tol)
    if not converged:
        warnings.warn(
            f"data half-step CG stopped at relative residual {rel:.2e}",
            CgWarning,
            stacklevel=2,
        )
    return z


def _red_denoise_step(
    x_half: np.ndarray, denoise_fn: Callable, grid, cfg: SolverConfig
) -> np.ndarray:
    denoised = denoise_fn(Image(grid, x_half)).values
    if not np.all(np.isfinite(denoised)):
        raise RuntimeError("denoiser produced non-finite output")
    if cfg.red_mode == "direct":
        return denoised
    if cfg.beta + cfg.red_lambda <= 0:
        raise ValueError("convex mode needs beta + red_lambda > 0")
    w = cfg.red_lambda / (cfg.beta + cfg.red_lambda)
    return (1.0 - w) * x_half + w * denoised


def red_reconstruct(
    f: WlsFidelity, d: DenoiserContract, cfg: SolverConfig, x0: Image
) -> Image:
    """Denoiser-regularized reconstruction (data half-step + denoise step)."""
    f.operator.check_image(x0)
    x = x0.values.copy()
    grid = x0.grid
    for _ in range(cfg.n_iters):
        x_half = _red_half_step(f, x, cfg)
        x = _red_denoise_step(x_half, d.denoise, grid, cfg)
    return Image(grid, x)


# ---------------------------------------------------------------------------
# denoiser training (both regimes of the two-branch training scheme)


def _fidelity_for(
    op: ProjectionOperator, y: Sinogram, noise_model: NoiseModel | None
) -> WlsFidelity:
    if noise_model is None:
        weights = np.ones(op.geometry.shape)
    else:
        weights = 1.0 / estimate_variances(y, noise_model)
    return WlsFidelity(op, y, weights)


def _fbp_init_batch(
    op: ProjectionOperator, sinos: list[Sinogram], filt: FbpFilter | None = None
) -> np.ndarray:
    return np.stack([fbp(op, s, filt).values for s in sinos])


def _train_denoiser_on_images(
    d: ConvDenoiser,
    inputs: np.ndarray,
    targets: np.ndarray,
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int,
    val_inputs: np.ndarray,
    val_targets: np.ndarray,
    weight_decay: float,
) -> np.ndarray:
    """Fit the flat denoiser parameters; returns the best-validation theta."""
    opt = AdamW(lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    theta = d.theta.copy()
    current = d.with_theta(theta)
    best_theta = theta.copy()
    best_val = float(np.mean((current.forward_batch(val_inputs) - val_targets) ** 2))
    n = inputs.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            current = current.with_theta(theta)
            _, grad = current.loss_and_grad(inputs[idx], targets[idx])
            theta = opt.step(theta, grad)
        current = current.with_theta(theta)
        val = float(np.mean((current.forward_batch(val_inputs) - val_targets) ** 2))
        if val < best_val:
            best_val = val
            best_theta = theta.copy()
    return best_theta


def train_denoiser_independent(
    pairs: list[tuple[Sinogram, Image]],
    d: ConvDenoiser,
    epochs: int,
    op: ProjectionOperator,
    lr: float = 1e-3,
    batch_size: int = 8,
    seed: int = 0,
    val_pairs: list[tuple[Sinogram, Image]] | None = None,
    weight_decay: float = 1e-4,
) -> np.ndarray:
    """Fit one denoiser on FBP initializations, reused at every iteration.

    Minimizes the mean squared error between D(FBP(y_i)) and the clean
    references; returns the parameters with the best validation MSE
    (validation defaults to the training set).
    """
    if len(pairs) < 1:
        raise ValueError("need at least one training pair")
    inputs = _fbp_init_batch(op, [p[0] for p in pairs])
    targets = np.stack([p[1].values for p in pairs])
    if val_pairs is None:
        val_inputs, val_targets = inputs, targets
    else:
        val_inputs = _fbp_init_batch(op, [p[0] for p in val_pairs])
        val_targets = np.stack([p[1].values for p in val_pairs])
    return _train_denoiser_on_images(
        d, inputs, targets, epochs, lr, batch_size, seed, val_inputs, val_targets,
        weight_decay,
    )


def train_denoiser_dependent(
    pairs: list[tuple[Sinogram, Image]],
    d: ConvDenoiser,
    cfg: SolverConfig,
    epochs: int,
    op: ProjectionOperator,
    noise_model: NoiseModel | None = None,
    lr: float = 1e-3,
    batch_size: int = 8,
    seed: int = 0,
    val_pairs: list[tuple[Sinogram, Image]] | None = None,
    weight_decay: float = 1e-4,
) -> list[np.ndarray]:
    """Fit one denoiser per iteration on the intermediates the loop produces.

    Stage t trains on the current images x_t_i, then every training
    sample advances through one loop iteration (data half-step + denoise
    with the just-trained parameters). Returns [theta_0 ... theta_{T-1}].
    """
    if len(pairs) < 1:
        raise ValueError("need at least one training pair")
    if cfg.n_iters < 1:
        raise ValueError("iteration-dependent training needs n_iters >= 1")
    fidelities = [_fidelity_for(op, y, noise_model) for y, _ in pairs]
    xs = _fbp_init_batch(op, [p[0] for p in pairs])
    targets = np.stack([p[1].values for p in pairs])
    grid = pairs[0][1].grid
    thetas = []
    for t in range(cfg.n_iters):
        theta_t = _train_denoiser_on_images(
            d, xs, targets, epochs, lr, batch_size, seed + t, xs, targets,
            weight_decay,
        )
        thetas.append(theta_t)
        trained = d.with_theta(theta_t)
        for i, f in enumerate(fidelities):
            x_half = _red_half_step(f, xs[i], cfg)
            xs[i] = _red_denoise_step(x_half, trained.denoise, grid, cfg)
    return thetas


def pnp_run(
    sinograms: list[Sinogram],
    d: ConvDenoiser,
    thetas: np.ndarray | list[np.ndarray],
    cfg: SolverConfig,
    op: ProjectionOperator,
    noise_model: NoiseModel | None = None,
) -> list[Image]:
    """Inference with trained parameters inside the denoiser loop.

    ``thetas`` is either one parameter vector (iteration-independent) or
    a list with exactly one vector per iteration; n_iters = 0 returns the
    FBP initializations unchanged.
    """
    if isinstance(thetas, list):
        if len(thetas) != cfg.n_iters:
            raise ValueError(
                f"{len(thetas)} parameter vectors for n_iters={cfg.n_iters}"
            )
        per_iter = thetas
    else:
        per_iter = [thetas] * cfg.n_iters

    grid = op.grid
    out = []
    for y in sinograms:
        x = fbp(op, y).values
        f = _fidelity_for(op, y, noise_model)
        for t in range(cfg.n_iters):
            x_half = _red_half_step(f, x, cfg)
            x = _red_denoise_step(
                x_half, d.with_theta(per_iter[t]).denoise, grid, cfg
            )
        out.append(Image(grid, x))
    return out
