"""Multi-fidelity fusion by generalized autoregression over tensor-variate GPs.

Model: the level-(i+1) observation tensor is a per-mode linear transform of
the level-i observation plus an independent residual tensor GP,

    Y[i+1] = Y[i][matched rows] x_1 W_1 x_2 .. x_M W_M + R[i],

so the joint over all levels is Gaussian.  When every higher-fidelity input
also appears among the lower-fidelity inputs (subset structure), the joint
likelihood separates exactly into independent tensor-GP likelihoods, one for
the lowest level and one per residual, and the fit runs as independent
stages.  When some high-fidelity inputs have no lower-fidelity twin, the
missing low-fidelity observations are treated as latent (an imaginary
subset), imputed from the low model's posterior, and marginalized in closed
form: the residual likelihood keeps its Gaussian shape with covariance
inflated by the propagated imputation uncertainty.

Observation noise rides along the chain: each level's transform acts on the
*noisy* lower-level observation, which is exactly the reading under which
the subset decomposition stays an identity at nonzero noise.  The dense
joint builders in this module implement the same chain and serve as the
exponential-cost validation oracles.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .hogp import (
    FitConfig,
    JITTER,
    LOG2PI,
    PosteriorField,
    TgpModel,
    _TgpPack,
    _mean_factors,
    _predict_parts,
    tgp_fit,
    tgp_from_dict,
    tgp_nll,
    tgp_predict,
    tgp_to_dict,
)
from .kernels import ArdKernelParams, LaplacePrior, LatentFeatures, ard_gram
from .optim import OptimConfig, minimize
from .tensalg import kron_all, sym_eig, tucker_apply, vec

# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass
class FidelityLevel:
    """Inputs and tensorized outputs of one fidelity."""

    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Y = np.asarray(self.Y, dtype=float)
        if self.Y.ndim == 1:
            self.Y = self.Y[:, None]
        if self.Y.shape[0] != self.X.shape[0]:
            raise ValueError("sample counts of X and Y differ")

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def mode_sizes(self) -> tuple:
        return self.Y.shape[1:]


@dataclass
class MultiFidelityDataset:
    """Ordered fidelity levels, lowest first.

    Output tensors are padded with trailing size-1 modes so every level has
    the same mode count; sample counts must be non-increasing with fidelity
    and the input dimension identical across levels.
    """

    levels: list

    def __post_init__(self):
        self.levels = [
            lv if isinstance(lv, FidelityLevel) else FidelityLevel(*lv) for lv in self.levels
        ]
        if len(self.levels) < 1:
            raise ValueError("dataset needs at least one level")
        dims = {lv.X.shape[1] for lv in self.levels}
        if len(dims) != 1:
            raise ValueError("input dimension must be identical across levels")
        counts = [lv.n_samples for lv in self.levels]
        if any(a < b for a, b in zip(counts, counts[1:])):
            raise ValueError("sample counts must be non-increasing with fidelity")
        n_modes = max(len(lv.mode_sizes) for lv in self.levels)
        for lv in self.levels:
            pad = n_modes - len(lv.mode_sizes)
            if pad:
                lv.Y = lv.Y.reshape(lv.Y.shape + (1,) * pad)

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def input_dim(self) -> int:
        return self.levels[0].X.shape[1]


# ---------------------------------------------------------------------------
# Subset plans
# ---------------------------------------------------------------------------


@dataclass
class SubsetPlan:
    """Index bookkeeping for one adjacent fidelity pair.

    ``matched_high[k]`` is a high-fidelity row whose input equals low row
    ``matched_low[k]``; ``unmatched_high`` lists the high rows with no low
    twin (the imaginary set).  ``permutation`` orders high rows matched-first,
    which is the row order every residual quantity uses.
    """

    matched_high: np.ndarray
    matched_low: np.ndarray
    unmatched_high: np.ndarray

    def __post_init__(self):
        self.matched_high = np.asarray(self.matched_high, dtype=int)
        self.matched_low = np.asarray(self.matched_low, dtype=int)
        self.unmatched_high = np.asarray(self.unmatched_high, dtype=int)
        if self.matched_high.shape != self.matched_low.shape:
            raise ValueError("matched index arrays must have equal length")

    @property
    def n_matched(self) -> int:
        return self.matched_high.size

    @property
    def n_unmatched(self) -> int:
        return self.unmatched_high.size

    @property
    def fully_matched(self) -> bool:
        return self.n_unmatched == 0

    @property
    def permutation(self) -> np.ndarray:
        return np.concatenate([self.matched_high, self.unmatched_high])


def build_subset_plan(dataset: MultiFidelityDataset, level: int = 0, tol: float = 0.0) -> SubsetPlan:
    """Match high-fidelity inputs to identical low-fidelity inputs.

    Matching is exact (bitwise) by default; a positive ``tol`` matches each
    high row to its nearest low row within euclidean distance ``tol``.
    Raises when duplicate low rows make a match ambiguous.
    """
    if not 0 <= level < dataset.n_levels - 1:
        raise ValueError("level must index an adjacent pair")
    X_low = dataset.levels[level].X
    X_high = dataset.levels[level + 1].X
    matched_high, matched_low, unmatched = [], [], []
    if tol == 0.0:
        table: dict = {}
        for i, row in enumerate(X_low):
            table.setdefault(row.tobytes(), []).append(i)
        for j, row in enumerate(X_high):
            hits = table.get(row.tobytes(), [])
            if len(hits) > 1:
                raise ValueError(f"high row {j} matches {len(hits)} duplicate low rows")
            if hits:
                matched_high.append(j)
                matched_low.append(hits[0])
            else:
                unmatched.append(j)
    else:
        d = np.sqrt(((X_high[:, None, :] - X_low[None, :, :]) ** 2).sum(axis=2))
        for j in range(X_high.shape[0]):
            within = np.flatnonzero(d[j] <= tol)
            if within.size == 0:
                unmatched.append(j)
                continue
            best = within[np.argmin(d[j, within])]
            ties = within[np.abs(d[j, within] - d[j, best]) <= 1e-15]
            if ties.size > 1:
                raise ValueError(f"high row {j} is equidistant to {ties.size} low rows")
            matched_high.append(j)
            matched_low.append(int(best))
    return SubsetPlan(np.array(matched_high, int), np.array(matched_low, int), np.array(unmatched, int))


# ---------------------------------------------------------------------------
# Tucker weights
# ---------------------------------------------------------------------------


@dataclass
class TuckerWeights:
    """Per-mode linear maps carrying a low-fidelity field to the next level."""

    factors: list

    def __post_init__(self):
        self.factors = [np.atleast_2d(np.asarray(f, dtype=float)) for f in self.factors]

    @property
    def high_sizes(self) -> tuple:
        return tuple(f.shape[0] for f in self.factors)

    @property
    def low_sizes(self) -> tuple:
        return tuple(f.shape[1] for f in self.factors)

    @classmethod
    def initial(cls, high_sizes, low_sizes) -> "TuckerWeights":
        """Identity when square, ones on the main diagonal otherwise."""
        return cls([np.eye(dh, dl) for dh, dl in zip(high_sizes, low_sizes)])

    def apply(self, tensor: np.ndarray) -> np.ndarray:
        """Transform output modes of a (samples, d_1, ..) tensor."""
        return tucker_apply(tensor, self.factors, mode_offset=1)

    def dense(self) -> np.ndarray:
        return kron_all(self.factors)


# ---------------------------------------------------------------------------
# Model containers
# ---------------------------------------------------------------------------


@dataclass
class NonSubsetWorkspace:
    """Imaginary-subset quantities for one non-subset transition.

    ``imputed_mean`` is the low posterior mean at the unmatched inputs,
    ``s_hat`` the input-space posterior covariance there, and ``aug_low`` the
    low model augmented with the imputed rows as pseudo-observations (the
    operator behind the corrected prediction).
    """

    x_hat: np.ndarray
    imputed_mean: np.ndarray
    s_hat: np.ndarray
    aug_low: TgpModel


@dataclass
class GarTransition:
    """One fidelity step: weights, residual model, plan, optional workspace."""

    weights: TuckerWeights
    residual: TgpModel
    plan: SubsetPlan
    workspace: NonSubsetWorkspace | None = None
    low_stack: np.ndarray | None = None

    @property
    def is_subset(self) -> bool:
        return self.workspace is None


@dataclass
class GarModel:
    """Chain of fitted transitions on top of the lowest-fidelity TGP."""

    low: TgpModel
    transitions: list
    kind: str = "gar"
    rho: float | None = None  # populated for the scalar-transfer baseline


@dataclass(frozen=True)
class GarConfig:
    """Fusion fit settings shared by all model kinds."""

    optim: OptimConfig = OptimConfig()
    latent_rank: int | None = None
    laplace: LaplacePrior = LaplacePrior(0.0)
    identity_outputs: bool = False
    w_mode: str = "free"  # free | scalar | identity | orthonormal
    share_latents: bool | None = None
    match_tol: float = 0.0
    nonsubset_exact_cap: int = 2048
    center: bool = True

    def fit_config(self) -> FitConfig:
        return FitConfig(
            optim=self.optim,
            latent_rank=self.latent_rank,
            laplace=self.laplace,
            identity_outputs=self.identity_outputs,
            center=self.center,
        )


# ---------------------------------------------------------------------------
# Weight parameterizations for the stage-2 objective
# ---------------------------------------------------------------------------


class _WParam:
    """Flat packing of the transition weights under a structural constraint."""

    def __init__(self, init: TuckerWeights, mode: str):
        if mode not in ("free", "scalar", "identity", "orthonormal"):
            raise ValueError(f"unknown weight mode {mode!r}")
        self.mode = mode
        self.shapes = [f.shape for f in init.factors]
        if mode == "scalar" and any(s[0] != s[1] for s in self.shapes):
            raise ValueError("scalar transfer requires aligned output dimensions")
        if mode in ("free", "orthonormal"):
            self.size = sum(a * b for a, b in self.shapes)
        elif mode == "scalar":
            self.size = 1
        else:
            self.size = 0
        self._init = init

    def pack(self) -> np.ndarray:
        if self.mode in ("free", "orthonormal"):
            return np.concatenate([f.ravel() for f in self._init.factors]) if self.size else np.empty(0)
        if self.mode == "scalar":
            return np.array([1.0])
        return np.empty(0)

    def unpack(self, p: np.ndarray) -> TuckerWeights:
        if self.mode in ("free", "orthonormal"):
            facs, idx = [], 0
            for a, b in self.shapes:
                facs.append(p[idx : idx + a * b].reshape(a, b))
                idx += a * b
            return TuckerWeights(facs)
        if self.mode == "scalar":
            rho = float(p[0])
            facs = [np.eye(*self.shapes[0]) * rho] + [np.eye(*s) for s in self.shapes[1:]]
            return TuckerWeights(facs)
        return TuckerWeights([np.eye(*s) for s in self.shapes])

    def chain(self, w_grads) -> np.ndarray:
        """Map per-factor gradients to the packed parameter gradient."""
        if self.mode in ("free", "orthonormal"):
            return (
                np.concatenate([g.ravel() for g in w_grads]) if self.size else np.empty(0)
            )
        if self.mode == "scalar":
            return np.array([float(np.trace(w_grads[0]))])
        return np.empty(0)

    def project(self, p: np.ndarray) -> np.ndarray:
        """Retraction for the orthonormal mode (polar factor per mode)."""
        if self.mode != "orthonormal":
            return p
        from .cigar import orthonormalize  # deferred: cigar depends on gar

        w = orthonormalize(self.unpack(p))
        return np.concatenate([f.ravel() for f in w.factors]) if self.size else p


def _tucker_without_mode(tensor: np.ndarray, weights: TuckerWeights, skip: int) -> np.ndarray:
    facs = [None if m == skip else f for m, f in enumerate(weights.factors)]
    return tucker_apply(tensor, facs, mode_offset=1)


def _w_factor_grads(alpha: np.ndarray, low_stack: np.ndarray, weights: TuckerWeights):
    """d(residual NLL)/dW_m through the residual tensor Y_h - lowstack x W."""
    grads = []
    n_modes = len(weights.factors)
    axes = list(range(alpha.ndim))
    for m in range(n_modes):
        z = _tucker_without_mode(low_stack, weights, m)
        other = [a for a in axes if a != m + 1]
        grads.append(-np.tensordot(alpha, z, axes=(other, other)))
    return grads


# ---------------------------------------------------------------------------
# Stage-2 objectives
# ---------------------------------------------------------------------------


class _ResidualPack:
    """Joint objective over {W, residual hyperparameters} for subset data.

    The residual tensor is rebuilt from W at every evaluation; the NLL and
    all gradients run through the eigendecomposition pipeline.
    """

    def __init__(
        self,
        low_stack: np.ndarray,
        y_high: np.ndarray,
        template: TgpModel,
        w_init: TuckerWeights,
        w_mode: str,
        laplace: LaplacePrior,
        freeze_coords: bool = False,
    ):
        self.low_stack = low_stack
        self.y_high = y_high
        self.w = _WParam(w_init, w_mode)
        self.tgp = _TgpPack(template, laplace, freeze_coords=freeze_coords)
        self.size = self.w.size + self.tgp.size

    def split(self, p):
        return p[: self.w.size], p[self.w.size :]

    def pack(self) -> np.ndarray:
        return np.concatenate([self.w.pack(), self.tgp.pack(self.tgp.template)])

    def unpack(self, p: np.ndarray):
        pw, pt = self.split(p)
        weights = self.w.unpack(pw)
        resid = self.y_high - weights.apply(self.low_stack)
        model = replace(self.tgp.unpack(pt), Y=resid, _eig=None)
        return weights, model

    def objective(self, p: np.ndarray):
        weights, model = self.unpack(p)
        value, g_t, extras = self.tgp.value_and_grad(model)
        alpha = extras["alpha"]
        g_w = self.w.chain(_w_factor_grads(alpha, self.low_stack, weights))
        return value, np.concatenate([g_w, g_t])

    def project(self, p: np.ndarray) -> np.ndarray:
        pw, pt = self.split(p)
        return np.concatenate([self.w.project(pw), pt])


def _kron_partial(T_blocks: np.ndarray, mats: list, open_idx: int) -> np.ndarray:
    """Open-factor contraction of ``<T, mats_0 (x) mats_1 (x) ..>``.

    ``T_blocks`` has one row axis and one column axis per factor; all factors
    except ``open_idx`` are contracted away, returning the matrix that pairs
    with a perturbation of the open factor.
    """
    n_f = len(mats)
    letters = "abcdefghijklmnopqrstuvwx"
    rows, cols = letters[:n_f], letters[n_f : 2 * n_f]
    subs, operands = [rows + cols], [T_blocks]
    for k, mat in enumerate(mats):
        if k == open_idx:
            continue
        subs.append(rows[k] + cols[k])
        operands.append(mat)
    expr = ",".join(subs) + "->" + rows[open_idx] + cols[open_idx]
    return np.einsum(expr, *operands, optimize=True)


class _NonsubsetPack:
    """Exact corrected objective for a non-subset transition (dense algebra).

    Evaluates the closed-form marginal likelihood: the residual Gaussian with
    covariance  K_r (x) S_r + noise I + embed(S_hat) (x) W S_low W^T  on the
    matched-first row order, with the imputed low mean standing in for the
    missing observations.  Dense matrices are capped by configuration; the
    per-parameter gradients come from the standard trace/quadratic adjoints.
    """

    def __init__(
        self,
        low_stack: np.ndarray,
        y_high: np.ndarray,
        template: TgpModel,
        w_init: TuckerWeights,
        w_mode: str,
        laplace: LaplacePrior,
        s_hat: np.ndarray,
        s_low_mats: list,
        n_matched: int,
        freeze_coords: bool = False,
    ):
        self.low_stack = low_stack
        self.y_high = y_high
        self.w = _WParam(w_init, w_mode)
        self.tgp = _TgpPack(template, laplace, freeze_coords=freeze_coords)
        self.size = self.w.size + self.tgp.size
        n_high = y_high.shape[0]
        emb = np.zeros((n_high, s_hat.shape[0]))
        emb[n_matched:, :] = np.eye(s_hat.shape[0])
        self.b_input = emb @ s_hat @ emb.T  # embedded imputation covariance
        self.s_low_mats = [np.eye(s) if isinstance(s, int) else s for s in s_low_mats]
        self.mode_sizes_high = y_high.shape[1:]

    def split(self, p):
        return p[: self.w.size], p[self.w.size :]

    def pack(self) -> np.ndarray:
        return np.concatenate([self.w.pack(), self.tgp.pack(self.tgp.template)])

    def unpack(self, p: np.ndarray):
        pw, pt = self.split(p)
        weights = self.w.unpack(pw)
        resid = self.y_high - weights.apply(self.low_stack)
        model = replace(self.tgp.unpack(pt), Y=resid, _eig=None)
        return weights, model

    def objective(self, p: np.ndarray):
        weights, model = self.unpack(p)
        n_high = self.y_high.shape[0]
        d_high = int(np.prod(self.mode_sizes_high))
        n = n_high * d_high
        n_modes = len(self.mode_sizes_high)

        from .kernels import ard_gram_input_grad, ard_gram_param_grads
        from .kernels import laplace_log_prior, laplace_log_prior_grad

        K_r = ard_gram(model.input_kernel, model.X, model.X)
        s_mats = [np.eye(s) if isinstance(s, int) else s for s in model.output_covs()]
        sand = [w @ s @ w.T for w, s in zip(weights.factors, self.s_low_mats)]
        sigma = (
            kron_all([K_r] + s_mats)
            + kron_all([self.b_input] + sand)
            + model.noise * np.eye(n)
        )

        phi = vec(model.centered)
        chol = np.linalg.cholesky(sigma)
        alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, phi))
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        value = 0.5 * (float(phi @ alpha) + logdet + n * LOG2PI)

        inv = np.linalg.solve(chol.T, np.linalg.solve(chol, np.eye(n)))
        T = 0.5 * (inv - np.outer(alpha, alpha))
        shape_blocks = (n_high, *self.mode_sizes_high, n_high, *self.mode_sizes_high)
        T_blocks = T.reshape(shape_blocks)

        g = np.zeros(self.size)
        off = self.w.size
        pt_slices = self.tgp.slices

        # residual kernel parameters (through K_r)
        q_k = _kron_partial(T_blocks, [None] + s_mats, 0)
        _, k_grads = ard_gram_param_grads(model.input_kernel, model.X, model.X)
        g[off + pt_slices["input"].start : off + pt_slices["input"].stop] = [
            float(np.sum(q_k * dk)) for dk in k_grads
        ]
        # residual output covariances
        if model.output_features is not None:
            for m in range(n_modes):
                q_m = _kron_partial(T_blocks, [K_r] + s_mats, m + 1)
                kern = model.output_features.kernels[m]
                V = model.output_features.coords[m]
                _, s_grads = ard_gram_param_grads(kern, V, V)
                sl = pt_slices[f"kern{m}"]
                g[off + sl.start : off + sl.stop] = [float(np.sum(q_m * ds)) for ds in s_grads]
                if f"coords{m}" in self.tgp.active:
                    cl = pt_slices[f"coords{m}"]
                    g[off + cl.start : off + cl.stop] = ard_gram_input_grad(kern, V, q_m).ravel()
        # noise
        nl = pt_slices["noise"]
        g[off + nl.start : off + nl.stop] = float(np.trace(T)) * model.noise
        # weights: through the residual tensor and through the covariance
        alpha_t = alpha.reshape(n_high, *self.mode_sizes_high)
        w_grads = _w_factor_grads(alpha_t, self.low_stack, weights)
        for m in range(n_modes):
            q_m = _kron_partial(T_blocks, [self.b_input] + sand, m + 1)
            w_grads[m] = w_grads[m] + (q_m + q_m.T) @ weights.factors[m] @ self.s_low_mats[m]
        g[: self.w.size] = self.w.chain(w_grads)

        # Laplace penalty on residual latents, matching _TgpPack.
        if self.tgp.laplace.scale > 0 and model.output_features is not None:
            value -= laplace_log_prior(model.output_features, self.tgp.laplace)
            for m, gv in enumerate(laplace_log_prior_grad(model.output_features, self.tgp.laplace)):
                if f"coords{m}" in self.tgp.active:
                    cl = pt_slices[f"coords{m}"]
                    g[off + cl.start : off + cl.stop] -= gv.ravel()
        return value, g

    def project(self, p: np.ndarray) -> np.ndarray:
        pw, pt = self.split(p)
        return np.concatenate([self.w.project(pw), pt])


class _IdentityOutputNonsubsetPack:
    """Corrected non-subset objective for identity output covariances.

    With ``S = I`` everywhere and per-mode projectors ``P_m = W_m W_m^T``,
    the corrected covariance is ``G0 (x) I + B (x) P`` whose inverse is
    ``G0^{-1} (x) (I - P) + (G0 + B)^{-1} (x) P``; everything reduces to two
    N x N factorizations per evaluation regardless of output dimension, and
    the log-determinant splits by weight-column-space membership.  This is
    the production path for the conditional-independent model; the dense
    pack evaluates the identical objective and serves as its oracle in the
    tests.
    """

    def __init__(
        self,
        low_stack: np.ndarray,
        y_high: np.ndarray,
        template: TgpModel,
        w_init: TuckerWeights,
        w_mode: str,
        s_hat: np.ndarray,
        n_matched: int,
    ):
        if template.output_features is not None:
            raise ValueError("identity-output pack requires identity output covariances")
        self.low_stack = low_stack
        self.y_high = y_high
        self.w = _WParam(w_init, w_mode)
        self.tgp = _TgpPack(template, LaplacePrior(0.0))
        self.size = self.w.size + self.tgp.size
        n_high = y_high.shape[0]
        emb = np.zeros((n_high, s_hat.shape[0]))
        emb[n_matched:, :] = np.eye(s_hat.shape[0])
        self.b_input = emb @ s_hat @ emb.T

    def split(self, p):
        return p[: self.w.size], p[self.w.size :]

    def pack(self) -> np.ndarray:
        return np.concatenate([self.w.pack(), self.tgp.pack(self.tgp.template)])

    def unpack(self, p: np.ndarray):
        pw, pt = self.split(p)
        weights = self.w.unpack(pw)
        resid = self.y_high - weights.apply(self.low_stack)
        model = replace(self.tgp.unpack(pt), Y=resid, _eig=None)
        return weights, model

    def objective(self, p: np.ndarray):
        from scipy.linalg import cho_factor, cho_solve

        from .kernels import ard_gram_param_grads

        weights, model = self.unpack(p)
        n_high = model.n_samples
        d_high = model.output_size
        d_low = int(np.prod(weights.low_sizes))
        K_r = ard_gram(model.input_kernel, model.X, model.X)
        g0 = K_r + model.noise * np.eye(n_high)
        g1 = g0 + self.b_input

        R = model.centered
        rho = tucker_apply(R, [f.T for f in weights.factors], mode_offset=1)
        c0 = cho_factor(g0, lower=True)
        c1 = cho_factor(g1, lower=True)

        def mat(t):
            return t.reshape(n_high, -1)

        a_r = cho_solve(c0, mat(R))
        a_r0 = cho_solve(c0, mat(rho))
        a_r1 = cho_solve(c1, mat(rho))
        quad = float(np.sum(mat(R) * a_r) - np.sum(mat(rho) * a_r0) + np.sum(mat(rho) * a_r1))
        ld0 = 2.0 * float(np.sum(np.log(np.diag(c0[0]))))
        ld1 = 2.0 * float(np.sum(np.log(np.diag(c1[0]))))
        logdet = (d_high - d_low) * ld0 + d_low * ld1
        n = n_high * d_high
        value = 0.5 * (quad + logdet + n * LOG2PI)

        # Gradient w.r.t. the residual input Gram (enters both g0 and g1).
        inv0 = cho_solve(c0, np.eye(n_high))
        inv1 = cho_solve(c1, np.eye(n_high))
        gbar_k = 0.5 * (
            (d_high - d_low) * inv0
            + d_low * inv1
            - a_r @ a_r.T
            + a_r0 @ a_r0.T
            - a_r1 @ a_r1.T
        )
        g = np.zeros(self.size)
        off = self.w.size
        sl = self.tgp.slices["input"]
        _, k_grads = ard_gram_param_grads(model.input_kernel, model.X, model.X)
        g[off + sl.start : off + sl.stop] = [float(np.sum(gbar_k * dk)) for dk in k_grads]
        nl = self.tgp.slices["noise"]
        g[off + nl.start : off + nl.stop] = float(np.trace(gbar_k)) * model.noise

        # Gradient w.r.t. the weights: through the residual tensor and the
        # explicit projection (the log-determinant is weight-independent
        # because orthonormality fixes the column-space split).
        gamma = (a_r1 - a_r0).reshape(rho.shape)
        alpha_eff = a_r.reshape(R.shape) + tucker_apply(
            gamma, list(weights.factors), mode_offset=1
        )
        w_grads = _w_factor_grads(alpha_eff, self.low_stack, weights)
        axes = list(range(R.ndim))
        for m in range(len(weights.factors)):
            facs = [None] * len(weights.factors)
            for j, f in enumerate(weights.factors):
                if j != m:
                    facs[j] = f.T
            r_minus = tucker_apply(R, facs, mode_offset=1)
            other = [a for a in axes if a != m + 1]
            w_grads[m] = w_grads[m] + np.tensordot(r_minus, gamma, axes=(other, other))
        g[: self.w.size] = self.w.chain(w_grads)
        return value, g

    def project(self, p: np.ndarray) -> np.ndarray:
        pw, pt = self.split(p)
        return np.concatenate([self.w.project(pw), pt])


# ---------------------------------------------------------------------------
# Transition fitting
# ---------------------------------------------------------------------------


def _residual_template(X_res, mode_sizes_high, low_model, config: GarConfig, resid0=0.0):
    """Initial residual model; latents optionally shared with the low level."""
    share = config.share_latents
    aligned = (
        low_model is not None
        and low_model.output_features is not None
        and tuple(mode_sizes_high) == low_model.mode_sizes
    )
    if share is None:
        share = aligned and not config.identity_outputs
    if share and not aligned:
        raise ValueError("latent features can only be shared across aligned levels")
    span = np.maximum(X_res.max(axis=0) - X_res.min(axis=0), 1e-3)
    feats = None
    if not config.identity_outputs:
        if share:
            feats = LatentFeatures(
                [V.copy() for V in low_model.output_features.coords],
                [ArdKernelParams.default(V.shape[1]) for V in low_model.output_features.coords],
            )
        else:
            feats = LatentFeatures.initialize(
                tuple(mode_sizes_high), rank=config.latent_rank, seed=config.optim.seed
            )
    # scale the initial amplitude and noise to the residual at the initial
    # weights, mirroring the data-scaled init of the plain TGP fit
    var0 = max(float(np.var(resid0)), 1e-8)
    template = TgpModel(
        input_kernel=ArdKernelParams(np.log(var0), np.log(span)),
        output_features=feats,
        log_noise=np.log(1e-2 * var0 + JITTER),
        X=X_res,
        Y=np.zeros((X_res.shape[0], *mode_sizes_high)),
    )
    return template, share


def _impute(low_model: TgpModel, x_hat: np.ndarray):
    """Posterior mean at the imaginary inputs plus the input-space factor."""
    x_hat = np.atleast_2d(np.asarray(x_hat, dtype=float))
    mean = tgp_predict(low_model, x_hat).mean
    K = ard_gram(low_model.input_kernel, low_model.X, low_model.X)
    k_hat = ard_gram(low_model.input_kernel, x_hat, low_model.X)
    k_hh = ard_gram(low_model.input_kernel, x_hat, x_hat)
    chol = np.linalg.cholesky(K + low_model.noise * np.eye(K.shape[0]))
    half = np.linalg.solve(chol, k_hat.T)
    s_hat = k_hh - half.T @ half
    s_hat = 0.5 * (s_hat + s_hat.T)
    return mean, s_hat


def _low_s_dense(low_model: TgpModel) -> np.ndarray:
    mats = [
        np.eye(s) if isinstance(s, int) else s for s in low_model.output_covs()
    ]
    return kron_all(mats)


def _fit_transition(
    low_model: TgpModel,
    level_low: FidelityLevel,
    level_high: FidelityLevel,
    plan: SubsetPlan,
    config: GarConfig,
):
    """Stage-2 fit of one transition: weights plus residual hyperparameters."""
    perm = plan.permutation
    X_res = level_high.X[perm]
    Y_res = level_high.Y[perm]
    w_init = TuckerWeights.initial(level_high.mode_sizes, level_low.mode_sizes)
    workspace = None

    if plan.fully_matched:
        low_stack = level_low.Y[plan.matched_low]
        template, shared = _residual_template(
            X_res, level_high.mode_sizes, low_model, config,
            resid0=Y_res - w_init.apply(low_stack),
        )
        pack = _ResidualPack(
            low_stack, Y_res, template, w_init, config.w_mode, config.laplace, freeze_coords=shared
        )
    else:
        imputed, s_hat = _impute(low_model, level_high.X[plan.unmatched_high])
        low_stack = np.concatenate([level_low.Y[plan.matched_low], imputed], axis=0)
        template, shared = _residual_template(
            X_res, level_high.mode_sizes, low_model, config,
            resid0=Y_res - w_init.apply(low_stack),
        )
        aug_low = replace(
            low_model,
            X=np.vstack([low_model.X, level_high.X[plan.unmatched_high]]),
            Y=np.concatenate([low_model.Y, imputed], axis=0),
            _eig=None,
        )
        workspace = NonSubsetWorkspace(
            x_hat=level_high.X[plan.unmatched_high],
            imputed_mean=imputed,
            s_hat=s_hat,
            aug_low=aug_low,
        )
        n_block = Y_res.size
        if config.identity_outputs and config.w_mode == "orthonormal":
            # Collapsed exact objective: input-space factorizations only.
            pack = _IdentityOutputNonsubsetPack(
                low_stack, Y_res, template, w_init, config.w_mode, s_hat, plan.n_matched
            )
        elif n_block <= config.nonsubset_exact_cap:
            pack = _NonsubsetPack(
                low_stack,
                Y_res,
                template,
                w_init,
                config.w_mode,
                config.laplace,
                s_hat,
                low_model.output_covs(),
                plan.n_matched,
                freeze_coords=shared,
            )
        else:
            # Imputed-residual approximation (exact when the imputation
            # uncertainty vanishes); the exact corrected NLL remains
            # available through gar_nll_nonsubset.
            pack = _ResidualPack(
                low_stack, Y_res, template, w_init, config.w_mode, config.laplace,
                freeze_coords=shared,
            )

    project = pack.project if config.w_mode == "orthonormal" else None
    p_opt, trace = minimize(pack.objective, pack.pack(), config.optim, project=project)
    weights, residual = pack.unpack(p_opt)
    return (
        GarTransition(
            weights=weights,
            residual=residual,
            plan=plan,
            workspace=workspace,
            low_stack=low_stack,
        ),
        trace,
    )


def gar_fit_recursive(dataset: MultiFidelityDataset, config: GarConfig = GarConfig()) -> GarModel:
    """Fit the full fidelity chain, dispatching subset/non-subset per pair.

    Stage 1 fits the lowest level alone; each transition then fits its
    weights and residual hyperparameters with the lower level frozen (the
    subset decomposition makes this staging exact; the non-subset objective
    conditions on the low model by construction).  For non-subset transitions
    above the bottom pair, the imputation uses a standalone fit of that
    level's own data.
    """
    if dataset.n_levels < 2:
        raise ValueError("multi-fidelity fit needs at least two levels")
    fit_cfg = config.fit_config()
    low_model, _ = tgp_fit(dataset.levels[0].X, dataset.levels[0].Y, fit_cfg)
    transitions = []
    for i in range(dataset.n_levels - 1):
        plan = build_subset_plan(dataset, i, config.match_tol)
        if i == 0:
            pair_low = low_model
        elif not plan.fully_matched:
            pair_low, _ = tgp_fit(dataset.levels[i].X, dataset.levels[i].Y, fit_cfg)
        else:
            pair_low = None  # subset transitions above the base need data only
        try:
            trans, _ = _fit_transition(
                pair_low, dataset.levels[i], dataset.levels[i + 1], plan, config
            )
        except Exception as exc:
            raise RuntimeError(f"fit failed at fidelity transition {i} -> {i + 1}") from exc
        transitions.append(trans)
    model = GarModel(low=low_model, transitions=transitions)
    if config.w_mode == "scalar":
        model.kind = "ar"
        model.rho = float(transitions[-1].weights.factors[0][0, 0])
    return model


def gar_fit_subset(dataset: MultiFidelityDataset, config: GarConfig = GarConfig()) -> GarModel:
    """Two-or-more-level fit requiring strict subset structure."""
    for i in range(dataset.n_levels - 1):
        plan = build_subset_plan(dataset, i, config.match_tol)
        if not plan.fully_matched:
            raise ValueError(
                f"transition {i}: {plan.n_unmatched} high-fidelity inputs have no "
                "low-fidelity twin; use the non-subset path (gar_fit_recursive)"
            )
    return gar_fit_recursive(dataset, config)


def ar_baseline_fit(dataset: MultiFidelityDataset, config: GarConfig = GarConfig()) -> GarModel:
    """Classic scalar-transfer autoregression as a constrained special case.

    The transform is a single trainable scalar times the identity, so output
    dimensions must align across fidelities.
    """
    for a, b in zip(dataset.levels, dataset.levels[1:]):
        if a.mode_sizes != b.mode_sizes:
            raise ValueError(
                "scalar-transfer baseline requires aligned output dimensions across "
                "fidelities; regenerate the dataset with aligned outputs"
            )
    return gar_fit_recursive(dataset, replace(config, w_mode="scalar"))


# ---------------------------------------------------------------------------
# Dense joint oracle (subset chains)
# ---------------------------------------------------------------------------


def gar_joint_nll_dense(model: GarModel, dataset: MultiFidelityDataset, cap: int = 400) -> float:
    """Joint NLL of all levels under the dense block covariance.

    Exponential-cost validation path: builds the full chain covariance
    explicitly (low block, cross blocks through the selection-and-transform
    map, residual blocks) and evaluates the stacked Gaussian density. Only
    valid for subset chains and guarded by a total-dimension cap.
    """
    sizes = [lv.Y.size for lv in dataset.levels]
    total = sum(sizes)
    if total > cap:
        raise ValueError(f"total dimension {total} exceeds the dense-oracle cap {cap}")
    cov = _dense_level_cov(model.low)
    mean = np.tile(vec(model.low.offset), model.low.n_samples)
    blocks = [cov]
    means = [mean]
    cross: dict = {}
    for i, trans in enumerate(model.transitions):
        if not trans.plan.fully_matched:
            raise ValueError("dense joint oracle requires subset structure at every level")
        sel = np.zeros((trans.plan.n_matched, dataset.levels[i].n_samples))
        sel[np.arange(trans.plan.n_matched), trans.plan.matched_low] = 1.0
        G = np.kron(sel, trans.weights.dense())
        res_cov = _dense_level_cov(trans.residual)
        prev = blocks[i]
        blocks.append(G @ prev @ G.T + res_cov)
        means.append(G @ means[i] + np.tile(vec(trans.residual.offset), trans.residual.n_samples))
        for j in range(i + 1):
            base = prev if j == i else cross[(i, j)]
            cross[(i + 1, j)] = G @ base

    n_levels = len(blocks)
    big = np.zeros((total, total))
    offs = np.concatenate([[0], np.cumsum(sizes)])
    for i in range(n_levels):
        big[offs[i] : offs[i + 1], offs[i] : offs[i + 1]] = blocks[i]
        for j in range(i):
            c = cross[(i, j)]
            big[offs[i] : offs[i + 1], offs[j] : offs[j + 1]] = c
            big[offs[j] : offs[j + 1], offs[i] : offs[i + 1]] = c.T
    y = np.concatenate(
        [vec(dataset.levels[0].Y)]
        + [vec(dataset.levels[i + 1].Y[t.plan.permutation]) for i, t in enumerate(model.transitions)]
    )
    mu = np.concatenate(means)
    r = y - mu
    sign, logdet = np.linalg.slogdet(big)
    if sign <= 0:
        raise np.linalg.LinAlgError("dense joint covariance not positive definite")
    return 0.5 * (r @ np.linalg.solve(big, r) + logdet + total * LOG2PI)


def _dense_level_cov(model: TgpModel) -> np.ndarray:
    K = ard_gram(model.input_kernel, model.X, model.X)
    S = _low_s_dense(model)
    n = model.n_samples * model.output_size
    return np.kron(K, S) + model.noise * np.eye(n)


# ---------------------------------------------------------------------------
# Non-subset likelihood (production evaluation)
# ---------------------------------------------------------------------------


def _correction_roots(model: GarModel, trans: GarTransition):
    """Rank factors of the imputation correction ``emb(S_hat) (x) W S W^T``.

    Returns per-factor root matrices whose Kronecker product is a square
    root of the correction; the input-space factor is embedded into the
    matched-first high row order, and each output root has only the low
    mode size worth of columns.
    """
    ws = trans.workspace
    res = trans.residual
    V, a = sym_eig(ws.s_hat)
    root_hat = V * np.sqrt(np.clip(a, 0.0, None))
    emb_root = np.zeros((res.n_samples, root_hat.shape[1]))
    emb_root[trans.plan.n_matched :, :] = root_hat
    roots = [emb_root]
    for w_m, s in zip(trans.weights.factors, model.low.output_covs()):
        if isinstance(s, int):
            roots.append(w_m.copy())
        else:
            U, lam = sym_eig(s)
            roots.append(w_m @ (U * np.sqrt(np.clip(lam, 0.0, None))))
    return roots


def _root_columns(roots, idx):
    """Materialize the selected Kronecker-root columns as stacked tensors."""
    col_shape = tuple(r.shape[1] for r in roots)
    multi = np.unravel_index(idx, col_shape)
    out = roots[0][:, multi[0]].T.reshape(len(idx), -1, *([1] * (len(roots) - 1)))
    for m, r in enumerate(roots[1:]):
        col = r[:, multi[m + 1]]
        shape = [len(idx)] + [1] * len(roots)
        shape[m + 2] = r.shape[0]
        out = out * np.moveaxis(col, -1, 0).reshape(shape)
    return out


def gar_nll_nonsubset(
    model: GarModel, dataset: MultiFidelityDataset | None = None, dense_cap: int = 4096
) -> float:
    """Exact marginal NLL of a fitted two-level model with unmatched points.

    Low-level NLL plus the corrected residual Gaussian whose covariance is
    inflated by the propagated imputation uncertainty.  Falls back to the
    plain subset objective when the plan is fully matched.  Small residual
    blocks are evaluated densely; larger ones treat the correction as a
    low-rank update of the eigen-solvable base covariance (matrix
    determinant lemma plus Woodbury), which only ever factorizes a matrix
    of the correction's rank (unmatched count times low output size).
    """
    if len(model.transitions) != 1:
        raise ValueError("non-subset evaluation covers a single transition")
    trans = model.transitions[0]
    low_part = tgp_nll(model.low)
    res = trans.residual
    if trans.is_subset:
        return low_part + tgp_nll(res)
    ws = trans.workspace
    n_high = res.n_samples
    d_high = res.output_size
    n = n_high * d_high

    if n <= dense_cap:
        emb = np.zeros((n_high, ws.s_hat.shape[0]))
        emb[trans.plan.n_matched :, :] = np.eye(ws.s_hat.shape[0])
        b_input = emb @ ws.s_hat @ emb.T
        w_dense = trans.weights.dense()
        sandwich = w_dense @ _low_s_dense(model.low) @ w_dense.T
        K_r = ard_gram(res.input_kernel, res.X, res.X)
        s_dense = _low_s_dense(res)
        sigma = np.kron(K_r, s_dense) + np.kron(b_input, sandwich) + res.noise * np.eye(n)
        phi = vec(res.centered)
        sign, logdet = np.linalg.slogdet(sigma)
        if sign <= 0:
            raise np.linalg.LinAlgError("corrected covariance not positive definite")
        return low_part + 0.5 * (phi @ np.linalg.solve(sigma, phi) + logdet + n * LOG2PI)

    # Low-rank route: Sigma_c = Sigma_r + L L^T with Kronecker-factored L.
    roots = _correction_roots(model, trans)
    rank = int(np.prod([r.shape[1] for r in roots]))
    eigs = res.eigenfactors()
    A = eigs.joint_values(res.noise)
    phi_t = res.centered
    base_proj = eigs.project(phi_t)
    quad_base = float(np.sum(base_proj * base_proj / A))
    logdet_base = float(np.sum(np.log(A)))
    alpha = eigs.unproject(base_proj / A)

    def lt_apply(tensor, batched=False):
        """L^T applied to one tensor (or a batch with a leading axis)."""
        facs = [r.T for r in roots]
        return tucker_apply(tensor, facs, mode_offset=1 if batched else 0)

    lt_alpha = vec(lt_apply(alpha))
    cap = np.eye(rank)
    chunk = max(1, min(256, rank))
    for start in range(0, rank, chunk):
        idx = np.arange(start, min(start + chunk, rank))
        cols = _root_columns(roots, idx)
        solved = eigs.unproject(eigs.project(cols, mode_offset=1) / A, mode_offset=1)
        block = lt_apply(solved, batched=True).reshape(len(idx), rank)
        cap[:, idx] += block.T
    sign, logdet_cap = np.linalg.slogdet(cap)
    if sign <= 0:
        raise np.linalg.LinAlgError("corrected covariance not positive definite")
    quad = quad_base - float(lt_alpha @ np.linalg.solve(cap, lt_alpha))
    logdet = logdet_base + logdet_cap
    return low_part + 0.5 * (quad + logdet + n * LOG2PI)


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------


def _res_mean_and_terms(res: TgpModel, Xs: np.ndarray):
    mean, terms = _predict_parts(res, Xs)
    return mean + res.offset, terms


def _gamma_variance(trans: GarTransition, Xs: np.ndarray, downstream, out_shape, chunk=64):
    """Diagonal of the imputation-uncertainty term of the predictive variance.

    Streams over the columns of a square root of the imputation covariance
    ``S_hat (x) S_low``: each column is pushed through the prediction-mean
    operator's sensitivity to the imputed block (augmented-low path minus
    residual path), transformed by every downstream weight, squared, and
    accumulated.
    """
    ws = trans.workspace
    aug = ws.aug_low
    res = trans.residual
    n_star = Xs.shape[0]
    n_m = ws.s_hat.shape[0]
    n_low = aug.n_samples - n_m
    n_matched = trans.plan.n_matched

    # Square-root factors of the imputation covariance.
    V, a = sym_eig(ws.s_hat)
    root_hat = V * np.sqrt(np.clip(a, 0.0, None))
    low_covs = aug.output_covs()
    roots = []
    for s in low_covs:
        if isinstance(s, int):
            roots.append(None)  # identity factor
        else:
            U, lam = sym_eig(s)
            roots.append(U * np.sqrt(np.clip(lam, 0.0, None)))
    low_sizes = aug.mode_sizes

    # Prediction-mean operators (projected-basis form), with downstream
    # weights composed into the per-mode output factors.
    def compose(mean_facs, pre=None):
        k_fac = mean_facs[0]
        out_facs = mean_facs[1:]
        chain_facs = []
        for m, f in enumerate(out_facs):
            mat = f
            if pre is not None:
                w_m = pre.factors[m]
                mat = w_m if mat is None else w_m @ mat
            for w in downstream:
                w_m = w.factors[m]
                mat = w_m if mat is None else w_m @ mat
            chain_facs.append(mat)
        return k_fac, chain_facs

    k_aug = ard_gram(aug.input_kernel, Xs, aug.X)
    k_res = ard_gram(res.input_kernel, Xs, res.X)
    k_fac_aug, facs_aug = compose(_mean_factors(aug, k_aug), pre=trans.weights)
    k_fac_res, facs_res = compose(_mean_factors(res, k_res))
    eig_aug = aug.eigenfactors()
    A_aug = eig_aug.joint_values(aug.noise)
    eig_res = res.eigenfactors()
    A_res = eig_res.joint_values(res.noise)

    total = np.zeros((n_star, *out_shape))
    b_total = n_m * int(np.prod(low_sizes))
    col_shape = (n_m, *low_sizes)
    for start in range(0, b_total, chunk):
        idx = np.arange(start, min(start + chunk, b_total))
        multi = np.unravel_index(idx, col_shape)
        cols = root_hat[:, multi[0]].T.reshape(len(idx), n_m, *([1] * len(low_sizes)))
        for m, r in enumerate(roots):
            sel = multi[m + 1]
            col_m = np.eye(low_sizes[m])[:, sel] if r is None else r[:, sel]
            shape = [len(idx)] + [1] * (1 + len(low_sizes))
            shape[m + 2] = low_sizes[m]
            cols = cols * np.moveaxis(col_m, -1, 0).reshape(shape)

        # Augmented-low path: embed into the pseudo-observation rows.
        t_aug = np.zeros((len(idx), aug.n_samples, *low_sizes))
        t_aug[:, n_low:] = cols
        proj = eig_aug.project(t_aug, mode_offset=1) / A_aug
        term1 = tucker_apply(proj, [k_fac_aug] + facs_aug, mode_offset=1)

        # Residual path: the same perturbation enters the residual data as
        # minus its weight transform on the unmatched rows.
        pert = tucker_apply(cols, trans.weights.factors, mode_offset=2)
        t_res = np.zeros((len(idx), res.n_samples, *res.mode_sizes))
        t_res[:, n_matched:] = pert
        proj_r = eig_res.project(t_res, mode_offset=1) / A_res
        term2 = tucker_apply(proj_r, [k_fac_res] + facs_res, mode_offset=1)

        diff = term1 - term2
        total += np.sum(diff * diff, axis=0)
    return total


def gar_predict(model: GarModel, x_star) -> PosteriorField:
    """Predict the top-fidelity field at one input (or a batch).

    Means compose exactly through the chain; predictive covariances are
    carried as structured Kronecker terms that stay closed under the
    per-mode weight transforms, so the reported variance diagonal is exact
    at any depth.  Observation noise of the top level is added at the end.
    """
    Xs = np.atleast_2d(np.asarray(x_star, dtype=float))
    single = np.asarray(x_star).ndim == 1

    first = model.transitions[0] if model.transitions else None
    base = first.workspace.aug_low if (first is not None and first.workspace) else model.low
    mean, terms = _predict_parts(base, Xs)
    mean = mean + base.offset
    gamma_jobs = []

    for i, trans in enumerate(model.transitions):
        if i > 0 and trans.workspace is not None:
            # Non-subset above the bottom pair: restart from the transition's
            # own augmented low model (the objective conditioned on it).
            mean, terms = _predict_parts(trans.workspace.aug_low, Xs)
            mean = mean + trans.workspace.aug_low.offset
            gamma_jobs = []
        res = trans.residual
        res_mean, res_terms = _res_mean_and_terms(res, Xs)
        mean = trans.weights.apply(mean) + res_mean
        terms = [t.sandwich(trans.weights.factors) for t in terms] + res_terms
        for job in gamma_jobs:
            job[1].append(trans.weights)
        if trans.workspace is not None:
            gamma_jobs.append((trans, []))

    out_shape = model.transitions[-1].residual.mode_sizes if model.transitions else model.low.mode_sizes
    var = sum(t.diag() for t in terms)
    for trans, downstream in gamma_jobs:
        var = var + _gamma_variance(trans, Xs, downstream, out_shape)
    var = np.clip(var, 0.0, None)
    top_noise = model.transitions[-1].residual.noise if model.transitions else model.low.noise
    var = var + top_noise
    if single:
        return PosteriorField(mean[0], var[0])
    return PosteriorField(mean, var)


def gar_predict_nonsubset(model: GarModel, x_star, plan: SubsetPlan | None = None) -> PosteriorField:
    """Alias of :func:`gar_predict`; the model carries its imaginary-subset
    workspace, and a fully matched plan degenerates to the subset posterior."""
    return gar_predict(model, x_star)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

GAR_SCHEMA = "mfgar/gar-1"


def gar_to_dict(model: GarModel, dataset_ref: str | None = None) -> dict:
    doc = {
        "schema": GAR_SCHEMA,
        "kind": model.kind,
        "rho": model.rho,
        "low": tgp_to_dict(model.low),
        "transitions": [],
        "dataset_ref": dataset_ref,
    }
    for t in model.transitions:
        entry = {
            "weights": [f.tolist() for f in t.weights.factors],
            "residual": tgp_to_dict(t.residual),
            "plan": {
                "matched_high": t.plan.matched_high.tolist(),
                "matched_low": t.plan.matched_low.tolist(),
                "unmatched_high": t.plan.unmatched_high.tolist(),
            },
            "low_stack": None if t.low_stack is None else t.low_stack.tolist(),
            "workspace": None,
        }
        if t.workspace is not None:
            entry["workspace"] = {
                "x_hat": t.workspace.x_hat.tolist(),
                "imputed_mean": t.workspace.imputed_mean.tolist(),
                "s_hat": t.workspace.s_hat.tolist(),
                "aug_low": tgp_to_dict(t.workspace.aug_low),
            }
        doc["transitions"].append(entry)
    return doc


def gar_from_dict(doc: dict) -> GarModel:
    if doc.get("schema") != GAR_SCHEMA:
        raise ValueError(f"unsupported model schema {doc.get('schema')!r}")
    transitions = []
    for entry in doc["transitions"]:
        ws = None
        if entry["workspace"] is not None:
            w = entry["workspace"]
            ws = NonSubsetWorkspace(
                x_hat=np.asarray(w["x_hat"]),
                imputed_mean=np.asarray(w["imputed_mean"]),
                s_hat=np.asarray(w["s_hat"]),
                aug_low=tgp_from_dict(w["aug_low"]),
            )
        transitions.append(
            GarTransition(
                weights=TuckerWeights([np.asarray(f) for f in entry["weights"]]),
                residual=tgp_from_dict(entry["residual"]),
                plan=SubsetPlan(
                    np.asarray(entry["plan"]["matched_high"], int),
                    np.asarray(entry["plan"]["matched_low"], int),
                    np.asarray(entry["plan"]["unmatched_high"], int),
                ),
                workspace=ws,
                low_stack=None if entry["low_stack"] is None else np.asarray(entry["low_stack"]),
            )
        )
    return GarModel(
        low=tgp_from_dict(doc["low"]),
        transitions=transitions,
        kind=doc.get("kind", "gar"),
        rho=doc.get("rho"),
    )


def save_gar(model: GarModel, path, dataset_ref: str | None = None):
    with open(path, "w") as fh:
        json.dump(gar_to_dict(model, dataset_ref), fh)


def load_gar(path) -> GarModel:
    with open(path) as fh:
        return gar_from_dict(json.load(fh))
