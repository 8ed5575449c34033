"""Deterministic multi-fidelity data generation from canonical PDE solvers.

Three benchmark problems produce 2-D solution fields over regular grids:

* viscous Burgers, ``u_t + u u_x = v u_xx`` on x in [0,1], t in [0,3],
  initial ``u = sin(pi x / 2)``, homogeneous Dirichlet walls; hat-function
  finite elements in space, backward Euler in time, Picard iteration for the
  nonlinearity.  Input: viscosity in [0.001, 0.1].  Field axes: (x, t).
* Poisson/Laplace on the unit square with constant Dirichlet values on the
  four borders and a pinned center, all five in [0.1, 0.9]; five-point
  center differencing.  Field axes: (x, y).
* heat, ``u_t = k u_xx`` on x in [0,1], t in [0,5], Neumann flux boundaries,
  box initial condition ``H(x - 0.25) - H(x - 0.75)``; conservative vertex
  finite differences, backward Euler.  Inputs: left flux in [0, 1], right
  flux in [-1, 0], conductivity in [0.01, 0.1].  Field axes: (x, t).

A fidelity is a per-axis node count; the "main" variant uses 8x8 (low) and
32x32 (high) meshes for every problem, the "appendix" variant coarsens
Burgers and heat at 16x16 instead.  Fields are recorded on the solver's own
grid unless a record grid is set on the spec, in which case they are
resampled bilinearly.  Everything here is deterministic: identical inputs
produce bit-identical fields.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import solve_banded
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import spsolve
from scipy.stats import qmc

from .gar import MultiFidelityDataset

PDE_KINDS = ("burgers", "poisson", "heat")

# Per-problem record grids used by the fine-grid variants of the benchmark;
# dataset generation keeps each fidelity on its native solver grid so that
# unaligned output experiments stay meaningful.
FINE_RECORD_GRIDS = {"burgers": (128, 128), "poisson": (32, 32), "heat": (100, 100)}

INPUT_RANGES = {
    "burgers": [(0.001, 0.1)],
    "poisson": [(0.1, 0.9)] * 5,
    "heat": [(0.0, 1.0), (-1.0, 0.0), (0.01, 0.1)],
}

TIME_SPAN = {"burgers": 3.0, "heat": 5.0}


@dataclass(frozen=True)
class PdeSpec:
    """One benchmark problem with its meshes and input box."""

    kind: str
    input_ranges: tuple
    mesh_low: tuple
    mesh_high: tuple
    record_grid: tuple | None = None

    def __post_init__(self):
        if self.kind not in PDE_KINDS:
            raise ValueError(f"unknown pde kind {self.kind!r}")
        if any(h <= l for l, h in zip(self.mesh_low, self.mesh_high)):
            raise ValueError("the high-fidelity mesh must be strictly finer per axis")

    @property
    def input_dim(self) -> int:
        return len(self.input_ranges)

    def mesh(self, fidelity):
        if isinstance(fidelity, (tuple, list)):
            return tuple(int(m) for m in fidelity)
        if fidelity == "low":
            return self.mesh_low
        if fidelity == "high":
            return self.mesh_high
        if fidelity == "reference":
            return tuple(4 * m for m in self.mesh_high)
        raise ValueError(f"unknown fidelity {fidelity!r}")

    def grid_axes(self, mesh) -> tuple:
        """Physical node coordinates per field axis for a mesh."""
        if self.kind == "poisson":
            return tuple(np.linspace(0.0, 1.0, m) for m in mesh)
        span = TIME_SPAN[self.kind]
        return np.linspace(0.0, 1.0, mesh[0]), np.linspace(0.0, span, mesh[1])


def pde_spec(kind: str, mesh_variant: str = "main") -> PdeSpec:
    """Canonical spec for one problem; meshes per the selected variant."""
    if mesh_variant not in ("main", "appendix"):
        raise ValueError(f"unknown mesh variant {mesh_variant!r}")
    low = 8
    if mesh_variant == "appendix" and kind in ("burgers", "heat"):
        low = 16
    return PdeSpec(
        kind=kind,
        input_ranges=tuple(INPUT_RANGES[kind]),
        mesh_low=(low, low),
        mesh_high=(32, 32),
    )


@dataclass
class FieldSample:
    """One solved field: the input vector and the recorded solution values."""

    input: np.ndarray
    field: np.ndarray
    axes: tuple = ()

    def __post_init__(self):
        self.input = np.atleast_1d(np.asarray(self.input, dtype=float))
        self.field = np.asarray(self.field, dtype=float)
        if not np.all(np.isfinite(self.field)):
            raise ValueError("field contains non-finite values")


# ---------------------------------------------------------------------------
# Solvers
# ---------------------------------------------------------------------------


def _tridiag_solve(lower, diag, upper, rhs):
    ab = np.zeros((3, diag.size))
    ab[0, 1:] = upper
    ab[1] = diag
    ab[2, :-1] = lower
    return solve_banded((1, 1), ab, rhs)


def solve_burgers(viscosity: float, spec: PdeSpec, fidelity="high") -> FieldSample:
    """Viscous Burgers via hat-function finite elements and backward Euler.

    The nonlinear term is handled by Picard iteration inside each implicit
    step (tolerance 1e-8, at most 50 sweeps); a step that fails to converge
    raises. Homogeneous Dirichlet values are imposed for t > 0; the initial
    profile is kept verbatim at t = 0.
    """
    lo, hi = spec.input_ranges[0]
    if not lo <= viscosity <= hi:
        raise ValueError(f"viscosity {viscosity} outside [{lo}, {hi}]")
    n_x, n_t = spec.mesh(fidelity)
    x = np.linspace(0.0, 1.0, n_x)
    h = x[1] - x[0]
    dt = TIME_SPAN["burgers"] / (n_t - 1)
    u = np.sin(np.pi * x / 2.0)
    out = np.empty((n_x, n_t))
    out[:, 0] = u

    # interior assembly (Dirichlet walls eliminate the boundary rows)
    n_i = n_x - 2
    mass_d = np.full(n_i, 4.0 * h / 6.0)
    mass_o = np.full(n_i - 1, h / 6.0)
    stiff_d = np.full(n_i, 2.0 / h)
    stiff_o = np.full(n_i - 1, -1.0 / h)

    nodes = np.arange(1, n_x - 1)

    def picard_step(u_old, dt_step):
        """One backward-Euler step via Picard sweeps; None if not contracting."""
        u_new = u_old.copy()
        u_new[0] = 0.0
        u_new[-1] = 0.0
        # mass term of the old state, including its boundary columns (the
        # initial profile is nonzero at x = 1)
        rhs = _mass_apply(mass_d, mass_o, u_old[1:-1])
        rhs[0] += h / 6.0 * u_old[0]
        rhs[-1] += h / 6.0 * u_old[-1]
        for _ in range(50):
            # Convection row i: int phi_i u_h phi_j' over the two neighbor
            # elements; with the left/right element averages
            #   I_L = u_{i-1}/6 + u_i/3,   I_R = u_i/3 + u_{i+1}/6
            # the tridiagonal entries are (-I_L, I_L - I_R, I_R).
            int_left = u_new[nodes - 1] / 6.0 + u_new[nodes] / 3.0
            int_right = u_new[nodes] / 3.0 + u_new[nodes + 1] / 6.0
            cd = int_left - int_right
            cu = int_right[:-1]
            cl = -int_left[1:]
            diag = mass_d + dt_step * (viscosity * stiff_d + cd)
            lowr = mass_o + dt_step * (viscosity * stiff_o + cl)
            uppr = mass_o + dt_step * (viscosity * stiff_o + cu)
            candidate = _tridiag_solve(lowr, diag, uppr, rhs)
            change = float(np.max(np.abs(candidate - u_new[1:-1])))
            u_new[1:-1] = candidate
            if not np.all(np.isfinite(candidate)):
                return None
            if change < 1e-8:
                return u_new
        return None

    def advance(u_old, dt_step, depth=0):
        """Advance by dt_step, halving the substep while Picard stalls.

        Coarse meshes pair sharp convection with large nodal time steps, for
        which the fixed-point sweep has no contraction; deterministic
        bisection restores it without changing the recorded grid.
        """
        done = picard_step(u_old, dt_step)
        if done is not None:
            return done
        if depth >= 12:
            raise RuntimeError("Picard iteration did not converge at the smallest substep")
        half = advance(u_old, dt_step / 2.0, depth + 1)
        return advance(half, dt_step / 2.0, depth + 1)

    for step in range(1, n_t):
        u = advance(u, dt)
        out[:, step] = u

    return _record(spec, np.asarray([viscosity]), out, spec.mesh(fidelity))


def _mass_apply(diag, off, v):
    out = diag * v
    out[1:] += off * v[:-1]
    out[:-1] += off * v[1:]
    return out


def solve_poisson(values, spec: PdeSpec, fidelity="high") -> FieldSample:
    """Laplace solve with constant border values and a pinned center block.

    Five-point differencing on an n x n grid; the nodes nearest (0.5, 0.5)
    (a 2x2 block on even meshes, one node on odd meshes) are pinned to the
    center value so the constraint set is mirror symmetric. Field axis 0 is
    x (left/right borders are the first/last rows), axis 1 is y.
    """
    values = np.asarray(values, dtype=float)
    if values.shape != (5,):
        raise ValueError("poisson expects 5 values: left, right, bottom, top, center")
    lo, hi = spec.input_ranges[0]
    if np.any(values < lo) or np.any(values > hi):
        raise ValueError(f"boundary/center values outside [{lo}, {hi}]")
    left, right, bottom, top, center = values
    n, m = spec.mesh(fidelity)

    u = np.zeros((n, m))
    fixed = np.zeros((n, m), dtype=bool)
    u[0, :], fixed[0, :] = left, True
    u[-1, :], fixed[-1, :] = right, True
    u[1:-1, 0], fixed[1:-1, 0] = bottom, True
    u[1:-1, -1], fixed[1:-1, -1] = top, True
    for i in _center_indices(n):
        for j in _center_indices(m):
            u[i, j], fixed[i, j] = center, True

    free = ~fixed
    n_free = int(free.sum())
    if n_free:
        idx = -np.ones((n, m), dtype=int)
        idx[free] = np.arange(n_free)
        free_r, free_c = np.nonzero(free)
        k = idx[free_r, free_c]
        rows = [k]
        cols = [k]
        data = [np.full(n_free, 4.0)]
        rhs = np.zeros(n_free)
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            rr, cc = free_r + dr, free_c + dc
            nb_fixed = fixed[rr, cc]
            np.add.at(rhs, k[nb_fixed], u[rr[nb_fixed], cc[nb_fixed]])
            rows.append(k[~nb_fixed])
            cols.append(idx[rr[~nb_fixed], cc[~nb_fixed]])
            data.append(np.full((~nb_fixed).sum(), -1.0))
        A = coo_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n_free, n_free),
        ).tocsr()
        u[free] = spsolve(A, rhs)
    return _record(spec, values, u, spec.mesh(fidelity))


def _center_indices(n: int):
    # nodes nearest coordinate 0.5 on a linspace(0, 1, n) grid
    if n % 2 == 1:
        return [n // 2]
    return [n // 2 - 1, n // 2]


def solve_heat(flux_left: float, flux_right: float, conductivity: float, spec: PdeSpec, fidelity="high") -> FieldSample:
    """1-D heat equation with Neumann flux boundaries, backward Euler in time.

    The vertex-centered discretization is conservative: with zero boundary
    fluxes the trapezoid-weighted total heat is preserved exactly by every
    implicit step.  Fluxes are signed as incoming heat rates.
    """
    ranges = spec.input_ranges
    for value, (lo, hi), name in zip(
        (flux_left, flux_right, conductivity), ranges, ("flux_left", "flux_right", "conductivity")
    ):
        if not lo <= value <= hi:
            raise ValueError(f"{name} {value} outside [{lo}, {hi}]")
    n_x, n_t = spec.mesh(fidelity)
    x = np.linspace(0.0, 1.0, n_x)
    h = x[1] - x[0]
    dt = TIME_SPAN["heat"] / (n_t - 1)
    u = np.where((x >= 0.25) & (x < 0.75), 1.0, 0.0)
    out = np.empty((n_x, n_t))
    out[:, 0] = u

    w = np.full(n_x, h)
    w[0] = w[-1] = h / 2.0
    k = conductivity
    diag = w / dt + 2.0 * k / h
    diag[0] = w[0] / dt + k / h
    diag[-1] = w[-1] / dt + k / h
    off = np.full(n_x - 1, -k / h)
    b = np.zeros(n_x)
    b[0] = flux_left
    b[-1] = flux_right

    for step in range(1, n_t):
        rhs = w / dt * u + b
        u = _tridiag_solve(off, diag, off, rhs)
        out[:, step] = u

    return _record(
        spec, np.asarray([flux_left, flux_right, conductivity]), out, spec.mesh(fidelity)
    )


def solve_field(spec: PdeSpec, params, fidelity="high") -> FieldSample:
    """Dispatch one input vector to the problem's solver."""
    params = np.atleast_1d(np.asarray(params, dtype=float))
    if spec.kind == "burgers":
        return solve_burgers(params[0], spec, fidelity)
    if spec.kind == "poisson":
        return solve_poisson(params, spec, fidelity)
    return solve_heat(params[0], params[1], params[2], spec, fidelity)


def _record(spec: PdeSpec, params, values, mesh) -> FieldSample:
    axes = spec.grid_axes(mesh)
    if spec.record_grid is not None:
        target = spec.grid_axes(spec.record_grid)
        values = interp_grid(values, axes, target)
        axes = target
    return FieldSample(params, values, axes)


# ---------------------------------------------------------------------------
# Grid interpolation
# ---------------------------------------------------------------------------


def interp_grid(values: np.ndarray, src_axes, dst_axes) -> np.ndarray:
    """Separable linear interpolation on a regular product grid.

    Exact on multilinear fields; raises when a target coordinate leaves the
    source domain.
    """
    out = np.asarray(values, dtype=float)
    for ax, (src, dst) in enumerate(zip(src_axes, dst_axes)):
        src = np.asarray(src, dtype=float)
        dst = np.asarray(dst, dtype=float)
        if dst.min() < src.min() - 1e-12 or dst.max() > src.max() + 1e-12:
            raise ValueError("target grid extends outside the source domain")
        pos = np.clip(np.searchsorted(src, dst, side="right") - 1, 0, src.size - 2)
        t = (dst - src[pos]) / (src[pos + 1] - src[pos])
        moved = np.moveaxis(out, ax, 0)
        interped = (1.0 - t)[:, None] * moved[pos].reshape(dst.size, -1) + t[:, None] * moved[
            pos + 1
        ].reshape(dst.size, -1)
        out = np.moveaxis(interped.reshape((dst.size,) + moved.shape[1:]), 0, ax)
    return out


def upsample_bilinear(sample: FieldSample, target_axes) -> FieldSample:
    """Resample a recorded field onto a finer (or equal) regular grid."""
    return FieldSample(
        sample.input, interp_grid(sample.field, sample.axes, target_axes), tuple(target_axes)
    )


# ---------------------------------------------------------------------------
# Input sampling
# ---------------------------------------------------------------------------

SOBOL_MAX_DIM = 21201  # direction-number table limit


def sobol_points(n: int, dims: int) -> np.ndarray:
    """First ``n`` points of the standard Sobol sequence in [0,1]^dims.

    The all-zeros index-0 point is dropped, so the sequence starts at the
    0.5 midpoint (1-D: 0.5, 0.75, 0.25, ...); deterministic, no scrambling.
    """
    if dims < 1 or dims > SOBOL_MAX_DIM:
        raise ValueError(f"dims must be in [1, {SOBOL_MAX_DIM}]")
    if n == 0:
        return np.empty((0, dims))
    eng = qmc.Sobol(d=dims, scramble=False)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pts = eng.random(n + 1)
    return pts[1:]


def _map_to_ranges(unit: np.ndarray, ranges) -> np.ndarray:
    lo = np.array([r[0] for r in ranges])
    hi = np.array([r[1] for r in ranges])
    return lo + unit * (hi - lo)


def sample_inputs(spec: PdeSpec, n: int, sampler: str, seed: int, skip: int = 0) -> np.ndarray:
    """Draw design points in the problem's input box.

    ``skip`` advances the deterministic stream so that successive draws from
    the same seed are disjoint (used for independent high-fidelity designs
    and test sets).
    """
    if sampler == "sobol":
        pts = sobol_points(n + skip, spec.input_dim)[skip:]
    elif sampler == "uniform":
        rng = np.random.default_rng(seed)
        if skip:
            rng.uniform(size=(skip, spec.input_dim))
        pts = rng.uniform(size=(n, spec.input_dim))
    else:
        raise ValueError(f"unknown sampler {sampler!r}")
    return _map_to_ranges(pts, spec.input_ranges)


# ---------------------------------------------------------------------------
# Dataset assembly and disk format
# ---------------------------------------------------------------------------


def make_dataset(
    spec: PdeSpec,
    n_low: int,
    n_high: int,
    sampler: str = "uniform",
    structure: str = "subset",
    aligned: bool = False,
    seed: int = 0,
) -> MultiFidelityDataset:
    """Generate a two-fidelity dataset by running both solvers.

    Subset structure takes the high-fidelity inputs to be the first
    ``n_high`` low-fidelity inputs; non-subset samples them independently
    (continuing the same deterministic stream, so the designs are disjoint).
    ``aligned`` upsamples the low-fidelity fields onto the high-fidelity
    grid so both levels share mode sizes.
    """
    if structure not in ("subset", "nonsubset"):
        raise ValueError(f"unknown structure {structure!r}")
    if structure == "subset" and n_high > n_low:
        raise ValueError("subset structure needs n_high <= n_low")
    X_low = sample_inputs(spec, n_low, sampler, seed)
    if structure == "subset":
        X_high = X_low[:n_high]
    else:
        X_high = sample_inputs(spec, n_high, sampler, seed, skip=n_low)

    low_fields = [solve_field(spec, x, "low") for x in X_low]
    high_fields = [solve_field(spec, x, "high") for x in X_high]
    if aligned:
        target = high_fields[0].axes if high_fields else spec.grid_axes(spec.mesh("high"))
        low_fields = [upsample_bilinear(s, target) for s in low_fields]
    Y_low = np.stack([s.field for s in low_fields])
    Y_high = np.stack([s.field for s in high_fields])
    return MultiFidelityDataset([(X_low, Y_low), (X_high, Y_high)])


def make_test_set(spec: PdeSpec, n_test: int, sampler: str = "uniform", seed: int = 0, skip: int = 0):
    """High-fidelity evaluation set: inputs and solved fields."""
    X = sample_inputs(spec, n_test, sampler, seed, skip=skip)
    Y = np.stack([solve_field(spec, x, "high").field for x in X])
    return X, Y


DATASET_FORMAT = "mfgar/dataset-1"


def spec_to_dict(spec: PdeSpec) -> dict:
    return {
        "kind": spec.kind,
        "input_ranges": [list(r) for r in spec.input_ranges],
        "mesh_low": list(spec.mesh_low),
        "mesh_high": list(spec.mesh_high),
        "record_grid": None if spec.record_grid is None else list(spec.record_grid),
    }


def spec_from_dict(doc: dict) -> PdeSpec:
    return PdeSpec(
        kind=doc["kind"],
        input_ranges=tuple(tuple(r) for r in doc["input_ranges"]),
        mesh_low=tuple(doc["mesh_low"]),
        mesh_high=tuple(doc["mesh_high"]),
        record_grid=None if doc["record_grid"] is None else tuple(doc["record_grid"]),
    )


def save_dataset(dataset: MultiFidelityDataset, out_dir, manifest_extra: dict | None = None):
    """Write the on-disk dataset: a JSON manifest, per-level input CSVs, and
    per-level field arrays in NumPy binary format (a flat binary with a
    self-describing shape header).  Byte-identical for identical inputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": DATASET_FORMAT,
        "n_levels": dataset.n_levels,
        "levels": [],
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    for i, lv in enumerate(dataset.levels):
        inputs_name = f"level_{i}_inputs.csv"
        fields_name = f"level_{i}_fields.npy"
        with open(out / inputs_name, "w") as fh:
            fh.write(",".join(f"x{j}" for j in range(lv.X.shape[1])) + "\n")
            for row in lv.X:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
        np.save(out / fields_name, lv.Y)
        manifest["levels"].append(
            {
                "inputs": inputs_name,
                "fields": fields_name,
                "n_samples": lv.n_samples,
                "mode_sizes": list(lv.mode_sizes),
            }
        )
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return out / "manifest.json"


def load_dataset(out_dir) -> tuple:
    """Read a dataset directory back; returns (dataset, manifest)."""
    out = Path(out_dir)
    with open(out / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"unsupported dataset format {manifest.get('format')!r}")
    levels = []
    for entry in manifest["levels"]:
        X = np.loadtxt(out / entry["inputs"], delimiter=",", skiprows=1, ndmin=2)
        Y = np.load(out / entry["fields"])
        levels.append((X, Y))
    return MultiFidelityDataset(levels), manifest
