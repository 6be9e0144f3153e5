"""Grids, fan-beam geometry, phantoms, and the shared linear-operator contract.

Conventions used throughout the package:

* images live on a square pixel lattice centered at the rotation
  isocenter, stored as 2-D float64 arrays of shape ``(ny, nx)`` in
  row-major order; entry ``[r, c]`` sits at physical position
  ``(xs[c], ys[r])`` in millimeters, with x increasing with the column
  index and y increasing with the row index,
* sinograms are ``(n_views, n_dets)`` arrays of dimensionless line
  integrals (attenuation in 1/mm times path length in mm),
* the x-ray source at view angle ``beta`` sits at
  ``source_to_iso * (cos beta, sin beta)`` and looks through the origin
  at a flat equispaced detector perpendicular to the central ray.

All types are immutable after construction and all operations are pure
functions of their inputs.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np


def _frozen_array(values, shape=None) -> np.ndarray:
    """Copy to a C-contiguous float64 array and make it read-only."""
    arr = np.array(values, dtype=np.float64, order="C")
    if shape is not None:
        arr = arr.reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ImageGrid:
    """Square-pixel lattice centered at the rotation isocenter."""

    nx: int
    ny: int
    pixel_size: float  # mm

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError(f"pixel counts must be >= 1, got {self.nx} x {self.ny}")
        if not (self.pixel_size > 0):
            raise ValueError(f"pixel_size must be > 0, got {self.pixel_size}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def n_pixels(self) -> int:
        return self.nx * self.ny

    @property
    def extent(self) -> tuple[float, float]:
        """Physical extent (width, height) in mm."""
        return (self.nx * self.pixel_size, self.ny * self.pixel_size)

    def xs(self) -> np.ndarray:
        """Pixel-center x coordinates (mm), one per column."""
        return (np.arange(self.nx) - (self.nx - 1) / 2.0) * self.pixel_size

    def ys(self) -> np.ndarray:
        """Pixel-center y coordinates (mm), one per row."""
        return (np.arange(self.ny) - (self.ny - 1) / 2.0) * self.pixel_size

    def meshgrid(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel-center coordinate arrays X, Y of shape ``(ny, nx)``."""
        return np.meshgrid(self.xs(), self.ys())


def make_grid(nx: int, ny: int, pixel_size: float) -> ImageGrid:
    """Create a centered image grid; raises ValueError on non-positive args."""
    return ImageGrid(nx=nx, ny=ny, pixel_size=pixel_size)


@dataclass(frozen=True)
class Image:
    """Attenuation map (1/mm) on a grid; values shape ``(ny, nx)``."""

    grid: ImageGrid
    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.size != self.grid.n_pixels:
            raise ValueError(
                f"image has {arr.size} values, grid expects {self.grid.n_pixels}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("image values must be finite")
        object.__setattr__(self, "values", _frozen_array(arr, self.grid.shape))

    @classmethod
    def zeros(cls, grid: ImageGrid) -> "Image":
        return cls(grid, np.zeros(grid.shape))


@dataclass(frozen=True)
class FanBeamGeometry:
    """Fan-beam scan with a flat equispaced detector.

    ``angles`` are the source angles in radians; the detector coordinate u
    runs along ``(-sin beta, cos beta)`` with u = 0 on the central ray.
    """

    n_views: int
    n_dets: int
    source_to_iso: float  # mm
    source_to_det: float  # mm
    det_spacing: float  # mm
    angles: np.ndarray  # radians, length n_views

    def __post_init__(self):
        ang = np.asarray(self.angles, dtype=np.float64).ravel()
        if self.n_views < 1 or self.n_dets < 1:
            raise ValueError("n_views and n_dets must be >= 1")
        if not (self.source_to_det > self.source_to_iso > 0):
            raise ValueError(
                "need source_to_det > source_to_iso > 0, got "
                f"{self.source_to_det} / {self.source_to_iso}"
            )
        if not (self.det_spacing > 0):
            raise ValueError(f"det_spacing must be > 0, got {self.det_spacing}")
        if ang.size != self.n_views:
            raise ValueError(f"{ang.size} angles given for n_views={self.n_views}")
        object.__setattr__(self, "angles", _frozen_array(ang))

    @classmethod
    def circular(
        cls,
        n_views: int,
        n_dets: int,
        source_to_iso: float,
        source_to_det: float,
        det_spacing: float,
    ) -> "FanBeamGeometry":
        """Equispaced full-circle scan over [0, 2*pi)."""
        angles = 2.0 * np.pi * np.arange(n_views) / n_views
        return cls(n_views, n_dets, source_to_iso, source_to_det, det_spacing, angles)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_views, self.n_dets)

    def det_coords(self) -> np.ndarray:
        """Detector-bin center offsets u (mm) along the detector."""
        return (np.arange(self.n_dets) - (self.n_dets - 1) / 2.0) * self.det_spacing

    def source_positions(self) -> np.ndarray:
        """Source positions, shape ``(n_views, 2)``."""
        return self.source_to_iso * np.stack(
            [np.cos(self.angles), np.sin(self.angles)], axis=1
        )

    def det_positions(self, view: int) -> np.ndarray:
        """Detector-bin center positions for one view, shape ``(n_dets, 2)``."""
        beta = self.angles[view]
        e_r = np.array([math.cos(beta), math.sin(beta)])
        t_hat = np.array([-math.sin(beta), math.cos(beta)])
        center = (self.source_to_iso - self.source_to_det) * e_r
        return center[None, :] + self.det_coords()[:, None] * t_hat[None, :]


def fan_geometry_for_grid(
    grid: ImageGrid,
    n_views: int,
    n_dets: int,
    source_to_iso: float | None = None,
    source_to_det: float | None = None,
    margin: float = 1.05,
) -> FanBeamGeometry:
    """Full-circle fan-beam geometry whose detector covers the grid.

    Defaults place the source at twice the grid half-diagonal and the
    detector at twice that, then size det_spacing so the fan covers the
    circle circumscribing the grid with a small margin.
    """
    half_diag = 0.5 * math.hypot(*grid.extent)
    if source_to_iso is None:
        source_to_iso = 2.0 * half_diag
    if source_to_det is None:
        source_to_det = 2.0 * source_to_iso
    r = margin * half_diag
    if r >= source_to_iso:
        raise ValueError("source_to_iso must exceed the grid half-diagonal")
    # widest detector offset hit by a ray tangent to the circle of radius r
    u_max = source_to_det * r / math.sqrt(source_to_iso**2 - r**2)
    det_spacing = 2.0 * u_max / n_dets
    return FanBeamGeometry.circular(
        n_views, n_dets, source_to_iso, source_to_det, det_spacing
    )


@dataclass(frozen=True)
class Sinogram:
    """Line-integral array of shape ``(n_views, n_dets)``, view-major."""

    geometry: FanBeamGeometry
    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.size != self.geometry.n_views * self.geometry.n_dets:
            raise ValueError(
                f"sinogram has {arr.size} values, geometry expects "
                f"{self.geometry.n_views} x {self.geometry.n_dets}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("sinogram values must be finite")
        object.__setattr__(self, "values", _frozen_array(arr, self.geometry.shape))

    @classmethod
    def zeros(cls, geometry: FanBeamGeometry) -> "Sinogram":
        return cls(geometry, np.zeros(geometry.shape))


@dataclass(frozen=True)
class Ellipse:
    """Elliptical density patch: the phantom building block."""

    center: tuple[float, float]  # mm
    semi_axes: tuple[float, float]  # mm
    rotation: float  # radians, counterclockwise
    density: float  # 1/mm, may be negative for nested ellipses

    def __post_init__(self):
        if not (self.semi_axes[0] > 0 and self.semi_axes[1] > 0):
            raise ValueError(f"semi-axes must be > 0, got {self.semi_axes}")


class LinearOperatorContract(ABC):
    """Forward/adjoint pair mapping images to sinograms and back.

    Implementations must satisfy the adjoint identity
    ``<apply(x), y> = <x, adjoint(y)>`` up to numerical tolerance.
    """

    @abstractmethod
    def apply(self, x: Image) -> Sinogram: ...

    @abstractmethod
    def adjoint(self, y: Sinogram) -> Image: ...


# Classic Shepp-Logan head phantom (Shepp & Logan 1974), in the unit disk:
# (x0, y0, semi_a, semi_b, rotation_deg, density). Density 2.0 skull with
# nested negative ellipses; this table is the fixture of record for the
# rasterizer and the analytic line-integral oracle.
SHEPP_LOGAN_TABLE: tuple[tuple[float, float, float, float, float, float], ...] = (
    (0.0, 0.0, 0.69, 0.92, 0.0, 2.0),
    (0.0, -0.0184, 0.6624, 0.874, 0.0, -0.98),
    (0.22, 0.0, 0.11, 0.31, -18.0, -0.02),
    (-0.22, 0.0, 0.16, 0.41, 18.0, -0.02),
    (0.0, 0.35, 0.21, 0.25, 0.0, 0.01),
    (0.0, 0.1, 0.046, 0.046, 0.0, 0.01),
    (0.0, -0.1, 0.046, 0.046, 0.0, 0.01),
    (-0.08, -0.605, 0.046, 0.023, 0.0, 0.01),
    (0.0, -0.605, 0.023, 0.023, 0.0, 0.01),
    (0.06, -0.605, 0.023, 0.046, 0.0, 0.01),
)


def shepp_logan_ellipses(half_extent: float, scale: float) -> list[Ellipse]:
    """Shepp-Logan ellipse set scaled to physical units.

    The unit-disk table is stretched so the unit circle maps to a circle
    of radius ``half_extent`` mm; densities are multiplied by ``scale``
    (1/mm).
    """
    if not (scale > 0):
        raise ValueError(f"scale must be > 0, got {scale}")
    if not (half_extent > 0):
        raise ValueError(f"half_extent must be > 0, got {half_extent}")
    out = []
    for x0, y0, a, b, rot_deg, density in SHEPP_LOGAN_TABLE:
        out.append(
            Ellipse(
                center=(x0 * half_extent, y0 * half_extent),
                semi_axes=(a * half_extent, b * half_extent),
                rotation=math.radians(rot_deg),
                density=density * scale,
            )
        )
    return out


def rasterize_ellipses(grid: ImageGrid, ellipses: list[Ellipse]) -> Image:
    """Sum of ellipse densities sampled at pixel centers (no anti-aliasing)."""
    X, Y = grid.meshgrid()
    values = np.zeros(grid.shape)
    for e in ellipses:
        ct, st = math.cos(e.rotation), math.sin(e.rotation)
        dx = X - e.center[0]
        dy = Y - e.center[1]
        u = (dx * ct + dy * st) / e.semi_axes[0]
        v = (-dx * st + dy * ct) / e.semi_axes[1]
        values += np.where(u * u + v * v <= 1.0, e.density, 0.0)
    return Image(grid, values)


def shepp_logan(grid: ImageGrid, scale: float) -> Image:
    """Rasterize the standard 10-ellipse Shepp-Logan phantom.

    ``scale`` converts the table's dimensionless densities to 1/mm; the
    phantom's unit circle is fit to the smaller grid extent.
    """
    half_extent = 0.5 * min(grid.extent)
    return rasterize_ellipses(grid, shepp_logan_ellipses(half_extent, scale))


def random_phantom(
    grid: ImageGrid,
    rng: np.random.Generator,
    n_ellipses: tuple[int, int] = (3, 8),
    density_scale: float = 0.02,
) -> tuple[list[Ellipse], Image]:
    """Random nested-ellipse phantom for dataset generation.

    A positive elliptical background holds a few smaller ellipses with
    signed density perturbations; all structures stay inside the circle
    inscribed in the grid. Returns both the ellipse list (for analytic
    projection) and the rasterized image.
    """
    half = 0.45 * min(grid.extent)
    ellipses = [
        Ellipse(
            center=(0.0, 0.0),
            semi_axes=(
                half * rng.uniform(0.75, 0.95),
                half * rng.uniform(0.75, 0.95),
            ),
            rotation=rng.uniform(0.0, math.pi),
            density=density_scale,
        )
    ]
    count = int(rng.integers(n_ellipses[0], n_ellipses[1] + 1))
    for _ in range(count):
        r = rng.uniform(0.0, 0.55) * half
        phi = rng.uniform(0.0, 2.0 * math.pi)
        ellipses.append(
            Ellipse(
                center=(r * math.cos(phi), r * math.sin(phi)),
                semi_axes=(
                    half * rng.uniform(0.05, 0.3),
                    half * rng.uniform(0.05, 0.3),
                ),
                rotation=rng.uniform(0.0, math.pi),
                density=density_scale * rng.uniform(-0.5, 0.8),
            )
        )
    return ellipses, rasterize_ellipses(grid, ellipses)


def analytic_sinogram(ellipses: list[Ellipse], geometry: FanBeamGeometry) -> Sinogram:
    """Exact fan-beam line integrals of an ellipse set.

    Each ray's value is the sum over ellipses of density times the exact
    ray-ellipse chord length; serves as the independent oracle for the
    discrete projector.
    """
    n_views, n_dets = geometry.shape
    values = np.zeros((n_views, n_dets))

    cos_b = np.cos(geometry.angles)
    sin_b = np.sin(geometry.angles)
    u = geometry.det_coords()

    # ray origins (sources) and unit directions, shape (n_views, n_dets, 2)
    sx = geometry.source_to_iso * cos_b
    sy = geometry.source_to_iso * sin_b
    dx = (geometry.source_to_iso - geometry.source_to_det) * cos_b[:, None] - u[
        None, :
    ] * sin_b[:, None] - sx[:, None]
    dy = (geometry.source_to_iso - geometry.source_to_det) * sin_b[:, None] + u[
        None, :
    ] * cos_b[:, None] - sy[:, None]
    norm = np.hypot(dx, dy)
    dx /= norm
    dy /= norm

    for e in ellipses:
        ct, st = math.cos(e.rotation), math.sin(e.rotation)
        a, b = e.semi_axes
        # shift to ellipse frame and scale axes to turn it into a unit circle
        ox = sx[:, None] - e.center[0]
        oy = sy[:, None] - e.center[1]
        o1 = (ox * ct + oy * st) / a
        o2 = (-ox * st + oy * ct) / b
        d1 = (dx * ct + dy * st) / a
        d2 = (-dx * st + dy * ct) / b
        # |o + t d|^2 = 1, chord length = |t2 - t1| in the original frame
        qa = d1 * d1 + d2 * d2
        qb = 2.0 * (o1 * d1 + o2 * d2)
        qc = o1 * o1 + o2 * o2 - 1.0
        disc = qb * qb - 4.0 * qa * qc
        hit = disc > 0.0
        sqrt_disc = np.sqrt(np.where(hit, disc, 0.0))
        chord = np.where(hit, sqrt_disc / qa, 0.0)
        values += e.density * chord

    return Sinogram(geometry, values)
