"""Experiment runner: dataset simulation, reconstruction, verification.

Subcommands
-----------
* ``simulate``: generate a phantom dataset (clean images, clean and
  low-dose sinograms) with a checksummed manifest,
* ``recon``: run a configured reconstruction method on a dataset,
  training on the train split and reporting test-split metrics,
* ``verify``: run the built-in oracle suite and print a check table,
* ``metrics``: recompute a metrics report from files on disk.

Configuration is a YAML file with explicit units in key names; unknown
keys are hard errors. Array data uses a small binary format (magic
"LDCT") with a YAML sidecar carrying geometry, noise parameters, and
provenance. Runs are deterministic: a fixed config and seed reproduce
every file byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import struct
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .core import (
    FanBeamGeometry,
    Image,
    ImageGrid,
    Sinogram,
    fan_geometry_for_grid,
    make_grid,
    random_phantom,
    shepp_logan,
)
from .learned import ConvDenoiser, UnrolledNet, AdamW, unrolled_forward, unrolled_train
from .noise import NoiseModel, estimate_variances, simulate_low_dose
from .objectives import TvRegularizer, WlsFidelity, power_method
from .pipeline import (
    DualDomainConfig,
    SumReducer,
    config_digest,
    dual_domain_run,
    evaluate,
)
from .projector import FbpFilter, ProjectionOperator, fbp, forward_project
from .solvers import (
    GaussianDenoiser,
    IdentityDenoiser,
    SolverConfig,
    admm_reconstruct,
    gd_reconstruct,
    pnp_run,
    train_denoiser_dependent,
    train_denoiser_independent,
)

MANIFEST_NAME = "manifest.json"
ARRAY_MAGIC = b"LDCT"
ARRAY_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


class ConfigError(ValueError):
    """Invalid configuration or manifest."""


# ---------------------------------------------------------------------------
# binary array format


def write_array(path, arr: np.ndarray, meta: dict | None = None):
    """Write an array in the LDCT binary format plus optional YAML sidecar."""
    arr = np.asarray(arr)
    if arr.dtype == np.float64:
        code = 0
    elif arr.dtype == np.float32:
        code = 1
    else:
        raise ValueError(f"unsupported dtype {arr.dtype}; use float64 or float32")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(ARRAY_MAGIC)
        fh.write(struct.pack("<HBB", ARRAY_VERSION, code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())
    if meta is not None:
        with open(path.with_suffix(path.suffix + ".meta"), "w") as fh:
            yaml.safe_dump(meta, fh, sort_keys=True)


def read_array(path) -> tuple[np.ndarray, dict | None]:
    """Read an LDCT binary array; returns (array, sidecar metadata or None)."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != ARRAY_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version, code, ndim = struct.unpack("<HBB", fh.read(4))
        if version != ARRAY_VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        if code not in _DTYPE_CODES:
            raise ValueError(f"{path}: unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        payload = fh.read()
    dtype = _DTYPE_CODES[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) != expected:
        raise ValueError(
            f"{path}: payload is {len(payload)} bytes, dims need {expected}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    meta_path = path.with_suffix(path.suffix + ".meta")
    meta = None
    if meta_path.exists():
        with open(meta_path) as fh:
            meta = yaml.safe_load(fh)
    return arr.copy(), meta


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# configuration


_SCHEMA = {
    "grid": {"nx", "ny", "pixel_size_mm"},
    "geometry": {
        "n_views",
        "n_dets",
        "source_to_iso_mm",
        "source_to_det_mm",
        "det_spacing_mm",
    },
    "noise": {"i0", "dose_factor", "sigma_e2", "seed"},
    "dataset": {"n_train", "n_val", "n_test", "phantom_seed"},
}

_METHOD_KEYS = {
    "fbp": {"filter"},
    "gd": {"n_iters", "step", "tv_strength", "tv_variant"},
    "admm": {"n_iters", "rho", "tv_strength", "tv_variant", "cg_iters", "tol"},
    "red": {
        "n_iters",
        "alpha",
        "beta",
        "red_lambda",
        "red_mode",
        "cg_iters",
        "tol",
        "training",
        "epochs",
        "lr",
        "batch_size",
        "width",
        "n_layers",
        "train_seed",
    },
    "unrolled": {
        "n_stages",
        "width",
        "n_layers",
        "epochs",
        "lr",
        "batch_size",
        "weight_decay",
        "train_seed",
    },
    "dual_domain": {"transform", "filter", "proj_denoiser", "image_denoiser"},
}

_DENOISER_KEYS = {"kind", "sigma"}


def _check_keys(block: dict, allowed: set, where: str):
    unknown = set(block) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description (see the README for the format)."""

    grid: ImageGrid
    geometry: FanBeamGeometry
    noise: NoiseModel
    n_train: int
    n_val: int
    n_test: int
    phantom_seed: int
    method: dict
    output_dir: str
    raw: dict


def load_config(path, seed_override: int | None = None, out_override: str | None = None) -> ExperimentConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    _check_keys(raw, {"grid", "geometry", "noise", "dataset", "method", "output_dir"}, "config")
    for block in ("grid", "geometry", "noise", "dataset", "method"):
        if block not in raw:
            raise ConfigError(f"missing config block: {block}")
        if not isinstance(raw[block], dict):
            raise ConfigError(f"config block {block} must be a mapping")
        if block in _SCHEMA:
            _check_keys(raw[block], _SCHEMA[block], block)

    g = raw["grid"]
    for key in ("nx", "ny", "pixel_size_mm"):
        if key not in g:
            raise ConfigError(f"grid block needs {key}")
    grid = make_grid(int(g["nx"]), int(g["ny"]), float(g["pixel_size_mm"]))

    geo = raw["geometry"]
    for key in ("n_views", "n_dets"):
        if key not in geo:
            raise ConfigError(f"geometry block needs {key}")
    if {"source_to_iso_mm", "source_to_det_mm", "det_spacing_mm"} <= set(geo):
        geometry = FanBeamGeometry.circular(
            int(geo["n_views"]),
            int(geo["n_dets"]),
            float(geo["source_to_iso_mm"]),
            float(geo["source_to_det_mm"]),
            float(geo["det_spacing_mm"]),
        )
    else:
        geometry = fan_geometry_for_grid(
            grid,
            int(geo["n_views"]),
            int(geo["n_dets"]),
            source_to_iso=float(geo["source_to_iso_mm"]) if "source_to_iso_mm" in geo else None,
            source_to_det=float(geo["source_to_det_mm"]) if "source_to_det_mm" in geo else None,
        )

    nz = raw["noise"]
    for key in ("i0", "dose_factor", "sigma_e2", "seed"):
        if key not in nz:
            raise ConfigError(f"noise block needs {key}")
    seed = int(nz["seed"]) if seed_override is None else int(seed_override)
    noise = NoiseModel(float(nz["i0"]), float(nz["dose_factor"]), float(nz["sigma_e2"]), seed)

    ds = raw["dataset"]
    for key in ("n_train", "n_val", "n_test", "phantom_seed"):
        if key not in ds:
            raise ConfigError(f"dataset block needs {key}")

    method = dict(raw["method"])
    if "name" not in method:
        raise ConfigError("method block needs a name")
    name = method["name"]
    if name not in _METHOD_KEYS:
        raise ConfigError(
            f"unknown method {name!r}, expected one of {sorted(_METHOD_KEYS)}"
        )
    _check_keys({k: v for k, v in method.items() if k != "name"}, _METHOD_KEYS[name], f"method {name}")
    for deno_key in ("proj_denoiser", "image_denoiser"):
        if deno_key in method:
            _check_keys(method[deno_key], _DENOISER_KEYS, deno_key)

    output_dir = raw.get("output_dir", "out")
    if out_override is not None:
        output_dir = out_override

    return ExperimentConfig(
        grid=grid,
        geometry=geometry,
        noise=noise,
        n_train=int(ds["n_train"]),
        n_val=int(ds["n_val"]),
        n_test=int(ds["n_test"]),
        phantom_seed=int(ds["phantom_seed"]),
        method=method,
        output_dir=str(output_dir),
        raw=raw,
    )


def _sample_seed(base_seed: int, index: int) -> int:
    """Derived per-sample noise seed; stable across platforms."""
    return int(np.random.SeedSequence(base_seed, spawn_key=(index,)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(cfg: ExperimentConfig, out_dir: Path) -> Path:
    """Generate the phantom dataset and write a checksummed manifest."""
    out_dir.mkdir(parents=True, exist_ok=True)
    n_total = cfg.n_train + cfg.n_val + cfg.n_test
    op = ProjectionOperator(cfg.grid, cfg.geometry, "joseph")
    rng = np.random.default_rng(np.random.SeedSequence(cfg.phantom_seed))

    geom_meta = {
        "n_views": cfg.geometry.n_views,
        "n_dets": cfg.geometry.n_dets,
        "source_to_iso_mm": cfg.geometry.source_to_iso,
        "source_to_det_mm": cfg.geometry.source_to_det,
        "det_spacing_mm": cfg.geometry.det_spacing,
    }
    noise_meta = {
        "i0": cfg.noise.i0,
        "dose_factor": cfg.noise.dose_factor,
        "sigma_e2": cfg.noise.sigma_e2,
        "seed": cfg.noise.seed,
    }

    files = []
    for i in range(n_total):
        _, phantom = random_phantom(cfg.grid, rng)
        y = forward_project(op, phantom)
        sample_seed = _sample_seed(cfg.noise.seed, i)
        model_i = NoiseModel(cfg.noise.i0, cfg.noise.dose_factor, cfg.noise.sigma_e2, sample_seed)
        y_low = simulate_low_dose(y, model_i)
        triplet = {
            f"phantom_{i:04d}.ldct": phantom.values,
            f"sino_clean_{i:04d}.ldct": y.values,
            f"sino_lowdose_{i:04d}.ldct": y_low.values,
        }
        for name, arr in triplet.items():
            meta = {
                "producer": "ldctlab simulate",
                "sample": i,
                "geometry": geom_meta,
                "noise": {**noise_meta, "sample_seed": sample_seed},
            }
            write_array(out_dir / name, arr, meta)
            files.append(
                {
                    "path": name,
                    "sha256": _sha256(out_dir / name),
                    "sample": i,
                    "role": name.rsplit("_", 1)[0],
                }
            )

    ids = list(range(n_total))
    manifest = {
        "format_version": ARRAY_VERSION,
        "grid": {"nx": cfg.grid.nx, "ny": cfg.grid.ny, "pixel_size_mm": cfg.grid.pixel_size},
        "geometry": geom_meta,
        "noise": noise_meta,
        "phantom_seed": cfg.phantom_seed,
        "splits": {
            "train": ids[: cfg.n_train],
            "val": ids[cfg.n_train : cfg.n_train + cfg.n_val],
            "test": ids[cfg.n_train + cfg.n_val :],
        },
        "files": files,
        "config_digest": config_digest(cfg.raw),
    }
    manifest_path = out_dir / MANIFEST_NAME
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(files)} files + manifest to {out_dir}")
    return manifest_path


# ---------------------------------------------------------------------------
# recon


def load_manifest(dataset_dir: Path) -> dict:
    path = dataset_dir / MANIFEST_NAME
    if not path.exists():
        raise ConfigError(f"no manifest at {path}")
    with open(path) as fh:
        manifest = json.load(fh)
    for entry in manifest["files"]:
        fpath = dataset_dir / entry["path"]
        if not fpath.exists():
            raise ConfigError(f"manifest lists missing file {entry['path']}")
        if _sha256(fpath) != entry["sha256"]:
            raise ConfigError(f"checksum mismatch for {entry['path']}")
    return manifest


def _load_split(dataset_dir: Path, manifest: dict, split: str, geometry, grid):
    pairs = []
    for i in manifest["splits"][split]:
        y, _ = read_array(dataset_dir / f"sino_lowdose_{i:04d}.ldct")
        x, _ = read_array(dataset_dir / f"phantom_{i:04d}.ldct")
        pairs.append((Sinogram(geometry, y), Image(grid, x)))
    return pairs


def _manifest_geometry(manifest: dict) -> FanBeamGeometry:
    g = manifest["geometry"]
    return FanBeamGeometry.circular(
        int(g["n_views"]),
        int(g["n_dets"]),
        float(g["source_to_iso_mm"]),
        float(g["source_to_det_mm"]),
        float(g["det_spacing_mm"]),
    )


def _manifest_grid(manifest: dict) -> ImageGrid:
    g = manifest["grid"]
    return make_grid(int(g["nx"]), int(g["ny"]), float(g["pixel_size_mm"]))


def _build_denoiser(spec: dict | None):
    if spec is None or spec.get("kind", "identity") == "identity":
        return IdentityDenoiser()
    if spec["kind"] == "gaussian":
        return GaussianDenoiser(float(spec.get("sigma", 1.0)))
    raise ConfigError(f"unknown denoiser kind {spec.get('kind')!r}")


def _fidelity(op, y, noise_model):
    return WlsFidelity(op, y, 1.0 / estimate_variances(y, noise_model))


def cmd_recon(cfg: ExperimentConfig, dataset_dir: Path, out_dir: Path) -> Path:
    """Run the configured method; train on train split, report on test."""
    manifest = load_manifest(dataset_dir)
    geometry = _manifest_geometry(manifest)
    grid = _manifest_grid(manifest)
    op = ProjectionOperator(grid, geometry, "joseph")
    method = cfg.method
    name = method["name"]
    out_dir.mkdir(parents=True, exist_ok=True)

    test_pairs = _load_split(dataset_dir, manifest, "test", geometry, grid)
    test_sinos = [p[0] for p in test_pairs]
    refs = [p[1] for p in test_pairs]

    outputs: list[Image] = []
    if name == "fbp":
        filt = FbpFilter(method.get("filter", "ram-lak"))
        outputs = [fbp(op, y, filt) for y in test_sinos]
    elif name == "gd":
        reg = TvRegularizer(float(method.get("tv_strength", 0.0)), method.get("tv_variant", "anisotropic"))
        solver_cfg = SolverConfig(
            n_iters=int(method.get("n_iters", 100)), step=method.get("step", "auto")
        )
        for y in test_sinos:
            f = _fidelity(op, y, cfg.noise)
            outputs.append(gd_reconstruct(f, reg, solver_cfg, fbp(op, y)))
    elif name == "admm":
        reg = TvRegularizer(float(method.get("tv_strength", 1.0)), method.get("tv_variant", "anisotropic"))
        for y in test_sinos:
            f = _fidelity(op, y, cfg.noise)
            rho = method.get("rho", "auto")
            rho = 0.05 * power_method(f) if rho == "auto" else float(rho)
            solver_cfg = SolverConfig(
                n_iters=int(method.get("n_iters", 20)),
                rho=rho,
                cg_iters=int(method.get("cg_iters", 30)),
                tol=float(method.get("tol", 1e-8)),
            )
            outputs.append(admm_reconstruct(f, reg, solver_cfg, fbp(op, y)))
    elif name == "red":
        outputs = _recon_red(cfg, op, dataset_dir, manifest, method, test_sinos, out_dir)
    elif name == "unrolled":
        outputs = _recon_unrolled(cfg, op, dataset_dir, manifest, method, test_sinos, out_dir)
    elif name == "dual_domain":
        dd_cfg = DualDomainConfig(
            operator=op,
            proj_denoiser=_build_denoiser(method.get("proj_denoiser")),
            transform=method.get("transform", "fbp"),
            image_denoiser=(
                SumReducer()
                if method.get("transform") == "vvbp"
                and method.get("image_denoiser") is None
                else _build_denoiser(method.get("image_denoiser"))
            ),
            fbp_filter=FbpFilter(method.get("filter", "ram-lak")),
        )
        outputs = [dual_domain_run(dd_cfg, y) for y in test_sinos]

    digest = config_digest(cfg.raw)
    report = evaluate(outputs, refs, method=name, digest=digest)
    for i, img in zip(manifest["splits"]["test"], outputs):
        write_array(out_dir / f"recon_{i:04d}.ldct", img.values, {"producer": f"ldctlab recon ({name})", "sample": i})
    report.write_csv(out_dir / "metrics.csv")
    with open(out_dir / "summary.txt", "w") as fh:
        fh.write(report.summary() + "\n")
    print(report.summary())
    return out_dir / "metrics.csv"


def _recon_red(cfg, op, dataset_dir, manifest, method, test_sinos, out_dir):
    grid = op.grid
    geometry = op.geometry
    train_pairs = _load_split(dataset_dir, manifest, "train", geometry, grid)
    val_pairs = _load_split(dataset_dir, manifest, "val", geometry, grid) or None
    d = ConvDenoiser(
        n_layers=int(method.get("n_layers", 3)),
        width=int(method.get("width", 8)),
        seed=int(method.get("train_seed", 0)),
    )
    solver_cfg = SolverConfig(
        n_iters=int(method.get("n_iters", 5)),
        alpha=float(method.get("alpha", 1.0)),
        beta=float(method.get("beta", 1.0)),
        red_lambda=float(method.get("red_lambda", 0.02)),
        red_mode=method.get("red_mode", "direct"),
        cg_iters=int(method.get("cg_iters", 30)),
        tol=float(method.get("tol", 1e-8)),
    )
    epochs = int(method.get("epochs", 50))
    lr = float(method.get("lr", 1e-3))
    batch_size = int(method.get("batch_size", 8))
    seed = int(method.get("train_seed", 0))
    if method.get("training", "independent") == "dependent":
        thetas = train_denoiser_dependent(
            train_pairs, d, solver_cfg, epochs, op, noise_model=cfg.noise,
            lr=lr, batch_size=batch_size, seed=seed, val_pairs=val_pairs,
        )
        for t, th in enumerate(thetas):
            write_array(out_dir / f"denoiser_theta_{t:02d}.ldct", th,
                        {"producer": "ldctlab recon (red)", "stage": t,
                         "layers": d.layers, "train_seed": seed})
    else:
        theta = train_denoiser_independent(
            train_pairs, d, epochs, op, lr=lr, batch_size=batch_size,
            seed=seed, val_pairs=val_pairs,
        )
        thetas = theta
        write_array(out_dir / "denoiser_theta.ldct", theta,
                    {"producer": "ldctlab recon (red)",
                     "layers": d.layers, "train_seed": seed})
    return pnp_run(test_sinos, d, thetas, solver_cfg, op, noise_model=cfg.noise)


def _recon_unrolled(cfg, op, dataset_dir, manifest, method, test_sinos, out_dir):
    grid = op.grid
    geometry = op.geometry
    train_pairs = _load_split(dataset_dir, manifest, "train", geometry, grid)
    val_pairs = _load_split(dataset_dir, manifest, "val", geometry, grid) or None
    weights_ref = np.ones(geometry.shape)
    net = UnrolledNet.build(
        op,
        weights_ref,
        n_stages=int(method.get("n_stages", 5)),
        width=int(method.get("width", 8)),
        n_layers=int(method.get("n_layers", 3)),
        seed=int(method.get("train_seed", 0)),
    )
    optimizer = AdamW(
        lr=float(method.get("lr", 1e-3)),
        weight_decay=float(method.get("weight_decay", 1e-4)),
    )
    net = unrolled_train(
        net,
        train_pairs,
        epochs=int(method.get("epochs", 100)),
        optimizer=optimizer,
        val_pairs=val_pairs,
        batch_size=int(method.get("batch_size", 8)),
        seed=int(method.get("train_seed", 0)),
    )
    write_array(out_dir / "unrolled_theta.ldct", net.get_theta(),
                {"producer": "ldctlab recon (unrolled)",
                 "n_stages": len(net.stages),
                 "layers": net.stages[0].layers,
                 "train_seed": int(method.get("train_seed", 0))})
    return [unrolled_forward(net, y) for y in test_sinos]


# ---------------------------------------------------------------------------
# verify


class _CorruptedOperator(ProjectionOperator):
    """Test hook: forward projection deliberately mismatched from the adjoint."""

    def apply_raw(self, values):
        out = super().apply_raw(values)
        return out + 1e-3 * np.roll(out, 1, axis=-1)


def _verify_checks(corrupt_projector: bool = False):
    rng = np.random.default_rng(np.random.SeedSequence(123))
    checks = []

    # adjoint identity, both modes
    grid = make_grid(32, 32, 1.0)
    geom = fan_geometry_for_grid(grid, 60, 48)
    for mode in ("joseph", "distance_driven"):
        op_cls = _CorruptedOperator if corrupt_projector else ProjectionOperator
        op = op_cls(grid, geom, mode)
        worst = 0.0
        for _ in range(20):
            x = rng.standard_normal(grid.shape)
            y = rng.standard_normal(geom.shape)
            ax = op.apply_raw(x)
            aty = op.adjoint_raw(y)
            rel = abs(float(np.vdot(ax, y)) - float(np.vdot(x, aty))) / (
                np.linalg.norm(ax) * np.linalg.norm(y)
            )
            worst = max(worst, rel)
        checks.append((f"adjoint identity ({mode})", worst < 1e-10, f"rel err {worst:.2e}"))

    # ellipse oracle (regression bound at this resolution)
    from .core import analytic_sinogram, rasterize_ellipses, shepp_logan_ellipses

    grid = make_grid(64, 64, 1.4)
    geom = fan_geometry_for_grid(grid, 120, 96)
    op = ProjectionOperator(grid, geom, "joseph")
    ells = shepp_logan_ellipses(0.5 * min(grid.extent), 0.02)
    ana = analytic_sinogram(ells, geom)
    yv = forward_project(op, rasterize_ellipses(grid, ells))
    rel = np.linalg.norm(yv.values - ana.values) / np.linalg.norm(ana.values)
    checks.append(("ellipse oracle (64^2)", rel < 0.032, f"rel L2 {rel:.4f}"))

    # noise Monte Carlo
    geom_n = FanBeamGeometry.circular(2, 4, 100.0, 200.0, 1.0)
    y0 = Sinogram(geom_n, np.linspace(0.5, 4.0, 8).reshape(2, 4))
    model = NoiseModel(1e5, 0.2, 8.2, seed=0)
    draws = np.stack(
        [
            simulate_low_dose(y0, NoiseModel(1e5, 0.2, 8.2, seed=k)).values - y0.values
            for k in range(2000)
        ]
    )
    from .noise import noise_sigma2

    rel = np.max(np.abs(draws.var(axis=0) - noise_sigma2(y0.values, model)) / noise_sigma2(y0.values, model))
    checks.append(("noise Monte Carlo", rel < 0.10, f"max var err {rel:.3f}"))

    # gradient check on a tiny margin-certified denoiser
    from .learned import param_init

    d = ConvDenoiser(n_layers=2, width=3)
    theta = param_init(d.layers, seed=11) * 0.1
    pos = 0
    for c_in, c_out in d.layers:
        pos += c_out * c_in * 9
        theta[pos : pos + c_out] = np.where(np.arange(c_out) % 2 == 0, 0.3, -0.3)
        pos += c_out
    d = d.with_theta(theta)
    x = rng.standard_normal((1, 16, 16)) * 0.3
    t = rng.standard_normal((1, 16, 16)) * 0.3
    _, grad = d.loss_and_grad(x, t)
    h = 1e-4
    worst = 0.0
    for i in range(d.theta.size):
        tp = d.theta.copy()
        tp[i] += h
        lp, _ = d.with_theta(tp).loss_and_grad(x, t)
        tp[i] -= 2 * h
        lm, _ = d.with_theta(tp).loss_and_grad(x, t)
        fd = (lp - lm) / (2 * h)
        worst = max(worst, abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-8))
    checks.append(("denoiser gradients", worst < 1e-4, f"worst FD rel err {worst:.2e}"))

    # solver cross-check
    from .solvers import cg_solve

    grid = make_grid(16, 16, 2.0)
    geom = fan_geometry_for_grid(grid, 120, 48)
    op = ProjectionOperator(grid, geom, "joseph")
    phantom = shepp_logan(grid, 0.02)
    y = forward_project(op, phantom)
    model = NoiseModel(1e5, 0.5, 8.2, seed=4)
    yn = simulate_low_dose(y, model)
    w = 1.0 / estimate_variances(yn, model)
    w = w / w.mean()
    f = WlsFidelity(op, yn, w)
    b = op.adjoint_raw(w * yn.values)
    x_cg, _, _ = cg_solve(f.normal_apply_raw, b, np.zeros(grid.shape), 500, 1e-13)
    gd = gd_reconstruct(f, TvRegularizer(0.0), SolverConfig(n_iters=1500, step="auto"), Image.zeros(grid))
    rel = np.linalg.norm(gd.values - x_cg) / np.linalg.norm(x_cg)
    checks.append(("solver cross-check (GD vs CG)", rel < 1e-4, f"rel {rel:.2e}"))

    return checks


def cmd_verify(corrupt_projector: bool = False) -> int:
    checks = _verify_checks(corrupt_projector)
    width = max(len(name) for name, _, _ in checks)
    all_ok = True
    for name, ok, detail in checks:
        status = "PASS" if ok else "FAIL"
        all_ok = all_ok and ok
        print(f"{name:<{width}}  {status}  {detail}")
    return 0 if all_ok else 1


# ---------------------------------------------------------------------------
# metrics


def cmd_metrics(dataset_dir: Path, recon_dir: Path) -> int:
    """Recompute the metrics report from reconstruction files on disk."""
    manifest = load_manifest(dataset_dir)
    grid = _manifest_grid(manifest)
    outputs, refs = [], []
    for i in manifest["splits"]["test"]:
        rec_path = recon_dir / f"recon_{i:04d}.ldct"
        if not rec_path.exists():
            raise ConfigError(f"missing reconstruction {rec_path}")
        rec, _ = read_array(rec_path)
        ref, _ = read_array(dataset_dir / f"phantom_{i:04d}.ldct")
        outputs.append(Image(grid, rec))
        refs.append(Image(grid, ref))
    report = evaluate(outputs, refs, method="metrics", digest=config_digest(manifest["config_digest"]))
    report.write_csv(recon_dir / "metrics.csv")
    print(report.summary())
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ldctlab",
        description="desk-scale low-dose fan-beam CT reconstruction laboratory",
    )
    parser.add_argument("--threads", type=int, default=1,
                        help="reserved; this build always runs single-threaded")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="generate a phantom dataset")
    p_sim.add_argument("--config", required=True, help="YAML experiment config")
    p_sim.add_argument("--seed", type=int, default=None, help="override the noise seed")
    p_sim.add_argument("--out", default=None, help="override the output directory")

    p_rec = sub.add_parser("recon", help="reconstruct a dataset and report metrics")
    p_rec.add_argument("--config", required=True)
    p_rec.add_argument("--dataset", required=True, help="directory with manifest.json")
    p_rec.add_argument("--seed", type=int, default=None)
    p_rec.add_argument("--out", default=None)

    p_ver = sub.add_parser("verify", help="run the built-in oracle suite")
    p_ver.add_argument("--corrupt-projector", action="store_true",
                       help=argparse.SUPPRESS)  # negative-control test hook

    p_met = sub.add_parser("metrics", help="recompute a report from files")
    p_met.add_argument("--dataset", required=True)
    p_met.add_argument("--recon-dir", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads != 1:
        print("note: this build is single-threaded; --threads ignored")
    try:
        if args.command == "simulate":
            cfg = load_config(args.config, args.seed, args.out)
            cmd_simulate(cfg, Path(cfg.output_dir))
            return 0
        if args.command == "recon":
            cfg = load_config(args.config, args.seed, args.out)
            cmd_recon(cfg, Path(args.dataset), Path(cfg.output_dir))
            return 0
        if args.command == "verify":
            return cmd_verify(args.corrupt_projector)
        if args.command == "metrics":
            return cmd_metrics(Path(args.dataset), Path(args.recon_dir))
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
