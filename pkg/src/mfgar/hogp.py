"""Single-fidelity tensor-variate GP: Kronecker NLL, fitting, prediction.

The model for an output tensor ``Y`` of shape ``(N, d_1, .., d_M)`` over
inputs ``X`` is

    vec(Y - offset) ~ N(0,  K(X, X) (x) S_1 (x) .. (x) S_M  +  noise * I)

with an ARD input kernel ``K``, per-mode output covariances ``S_m`` built
from latent coordinate features, and additive observation noise on the full
joint covariance.  All likelihood and posterior linear algebra runs through
the factor eigendecompositions (never the dense joint matrix): with
``K = U diag(lam) U^T`` and ``S_m = U_m diag(lam_m) U_m^T``, the joint
eigenvalues are the Kruskal tensor ``A = lam o lam_1 o .. o lam_M + noise``
and every solve is a Tucker rotation, an elementwise divide by ``A``, and a
rotation back.

Gradients of the NLL are hand-derived adjoints through this pipeline (they
need eigenvalues and rotations only, never eigenvector derivatives, so they
stay stable under repeated eigenvalues).  Finite differences are used solely
as the test-side audit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .kernels import (
    ArdKernelParams,
    LaplacePrior,
    LatentFeatures,
    ard_gram,
    ard_gram_input_grad,
    ard_gram_param_grads,
    laplace_log_prior,
    laplace_log_prior_grad,
    output_cov,
)
from .optim import OptimConfig, minimize
from .tensalg import EigenFactors, kron_quad_and_logdet, kruskal_outer, tucker_apply

# Noise variances are floored here; RBF Grams over clustered inputs are
# near-singular and the floor is what keeps joint eigenvalues invertible.
JITTER = 1e-6

LOG2PI = float(np.log(2.0 * np.pi))


@dataclass
class PosteriorField:
    """Predictive mean tensor and per-entry variance tensor (same shape)."""

    mean: np.ndarray
    variance_diag: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.variance_diag = np.asarray(self.variance_diag, dtype=float)
        if self.mean.shape != self.variance_diag.shape:
            raise ValueError("mean and variance_diag shapes differ")


@dataclass
class TgpModel:
    """One fidelity level of the tensor-variate GP.

    Instances are treated as immutable once constructed (fitting builds fresh
    candidates), which makes the cached eigendecomposition safe; construct a
    new model rather than mutating parameters in place.
    ``output_features=None`` fixes every ``S_m`` to the identity, in which
    case no output-mode covariance is ever allocated or factorized.
    """

    input_kernel: ArdKernelParams
    output_features: LatentFeatures | None
    log_noise: float
    X: np.ndarray
    Y: np.ndarray
    offset: np.ndarray | None = None
    _eig: EigenFactors | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Y = np.asarray(self.Y, dtype=float)
        if self.Y.ndim == 1:
            self.Y = self.Y[:, None]
        if self.Y.shape[0] != self.X.shape[0]:
            raise ValueError("first mode of Y must equal the number of input rows")
        if self.output_features is not None:
            if self.output_features.mode_sizes != self.Y.shape[1:]:
                raise ValueError("latent feature mode sizes do not match Y")
        self.log_noise = float(max(self.log_noise, np.log(JITTER)))
        if self.offset is None:
            self.offset = np.zeros(self.Y.shape[1:])
        else:
            self.offset = np.asarray(self.offset, dtype=float)

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def mode_sizes(self) -> tuple:
        return self.Y.shape[1:]

    @property
    def output_size(self) -> int:
        return int(np.prod(self.mode_sizes))

    @property
    def noise(self) -> float:
        return float(np.exp(self.log_noise))

    @property
    def centered(self) -> np.ndarray:
        return self.Y - self.offset

    def output_covs(self):
        """Per-mode output covariances; ints mark identity factors."""
        if self.output_features is None:
            return [int(d) for d in self.mode_sizes]
        return [output_cov(self.output_features, m) for m in range(len(self.mode_sizes))]

    def eigenfactors(self) -> EigenFactors:
        if self._eig is None:
            gram = ard_gram(self.input_kernel, self.X, self.X)
            self._eig = EigenFactors.from_matrices([gram] + self.output_covs())
        return self._eig


# ---------------------------------------------------------------------------
# Negative log marginal likelihood and its adjoints
# ---------------------------------------------------------------------------


def tgp_nll(model: TgpModel) -> float:
    """Negative log marginal likelihood, including the (Nd/2) log(2 pi) term."""
    eigs = model.eigenfactors()
    quad, logdet = kron_quad_and_logdet(eigs, model.noise, model.centered)
    n_total = model.n_samples * model.output_size
    return 0.5 * (quad + logdet + n_total * LOG2PI)


def _nll_core(model: TgpModel):
    """NLL plus the adjoint weight matrices for every covariance factor.

    Returns ``(nll, gbar, alpha)`` where ``gbar[k]`` is the matrix pairing
    with an unconstrained perturbation of factor k (k=0 the input Gram, then
    one per output mode; ``None`` for identity factors), ``gbar[-1]`` the
    scalar noise-variance partial, and ``alpha`` the solve
    ``Sigma^{-1} vec(Yc)`` in tensor form (the data adjoint).

    For a perturbation ``dF`` of factor k the NLL differential is
    ``<gbar[k], dF>``; the trace part contracts the inverse joint eigenvalues
    against the other factors' eigenvalues, and the quadratic part is an
    unfolding product of ``alpha`` with the tensor carrying all factors but k.
    """
    eigs = model.eigenfactors()
    noise = model.noise
    Yc = model.centered
    A = eigs.joint_values(noise)
    T1 = eigs.project(Yc)
    At = T1 / A
    quad = float(np.sum(T1 * At))
    logdet = float(np.sum(np.log(A)))
    n_total = Yc.size
    nll = 0.5 * (quad + logdet + n_total * LOG2PI)

    alpha = eigs.unproject(At)
    inv_A = 1.0 / A
    n_factors = len(eigs.values)
    covs = [None] + [None] * (n_factors - 1)
    # Dense factor matrices where needed for the quadratic-part contractions.
    mats = []
    for k in range(n_factors):
        if eigs.vectors[k] is None:
            mats.append(None)
        else:
            mats.append(eigs.reconstruct(k))

    gbars = []
    axes_all = list(range(alpha.ndim))
    for k in range(n_factors):
        if eigs.vectors[k] is None and k > 0:
            gbars.append(None)
            continue
        # Trace part: contract 1/A with every other factor's eigenvalues.
        c = inv_A
        for j in range(n_factors - 1, -1, -1):
            if j == k:
                continue
            c = np.tensordot(c, eigs.values[j], axes=([j], [0]))
        U = eigs.vectors[k]
        trace_part = (U * c) @ U.T if U is not None else np.diag(c)
        # Quadratic part: alpha against alpha with all other factors applied.
        beta = alpha
        for j in range(n_factors):
            if j == k or mats[j] is None:
                continue
            beta = tucker_apply(beta, [mats[j]], mode_offset=j)
        other_axes = [a for a in axes_all if a != k]
        quad_part = np.tensordot(alpha, beta, axes=(other_axes, other_axes))
        gbars.append(0.5 * (trace_part - quad_part))

    d_noise = 0.5 * (float(np.sum(inv_A)) - float(np.sum(At * At)))
    return nll, gbars, d_noise, alpha


def _chain_input_kernel(model: TgpModel, gbar: np.ndarray) -> np.ndarray:
    _, grads = ard_gram_param_grads(model.input_kernel, model.X, model.X)
    return np.array([float(np.sum(gbar * dK)) for dK in grads])


def _chain_output_mode(model: TgpModel, mode: int, gbar: np.ndarray):
    feats = model.output_features
    kern = feats.kernels[mode]
    V = feats.coords[mode]
    _, grads = ard_gram_param_grads(kern, V, V)
    g_kern = np.array([float(np.sum(gbar * dS)) for dS in grads])
    g_coords = ard_gram_input_grad(kern, V, gbar)
    return g_kern, g_coords


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FitConfig:
    """Settings for a single TGP fit (and reused by the fusion models)."""

    optim: OptimConfig = OptimConfig()
    latent_rank: int | None = None
    laplace: LaplacePrior = LaplacePrior(0.0)
    identity_outputs: bool = False
    center: bool = True


class _TgpPack:
    """Flat-vector packing of all trainable TGP parameters.

    ``freeze_coords`` keeps latent coordinates fixed at the template's values
    (the shared-latent-features option of the fusion models) while their
    kernels stay trainable.
    """

    def __init__(self, template: TgpModel, laplace: LaplacePrior, freeze_coords: bool = False):
        self.template = template
        self.laplace = laplace
        self.freeze_coords = freeze_coords
        self.slices = {}
        self.active = set()
        idx = 0

        def add(name, size):
            nonlocal idx
            self.slices[name] = slice(idx, idx + size)
            self.active.add(name)
            idx += size

        add("input", template.input_kernel.n_params)
        if template.output_features is not None:
            for m, (V, k) in enumerate(
                zip(template.output_features.coords, template.output_features.kernels)
            ):
                add(f"kern{m}", k.n_params)
                if not freeze_coords:
                    add(f"coords{m}", V.size)
        add("noise", 1)
        self.size = idx

    def pack(self, model: TgpModel) -> np.ndarray:
        p = np.empty(self.size)
        ik = model.input_kernel
        p[self.slices["input"]] = np.concatenate([[ik.log_amplitude], ik.log_lengthscales])
        if model.output_features is not None:
            for m, (V, k) in enumerate(
                zip(model.output_features.coords, model.output_features.kernels)
            ):
                p[self.slices[f"kern{m}"]] = np.concatenate([[k.log_amplitude], k.log_lengthscales])
                if f"coords{m}" in self.active:
                    p[self.slices[f"coords{m}"]] = V.ravel()
        p[self.slices["noise"]] = model.log_noise
        return p

    def unpack(self, p: np.ndarray) -> TgpModel:
        t = self.template
        raw = p[self.slices["input"]]
        input_kernel = ArdKernelParams(raw[0], raw[1:])
        feats = None
        if t.output_features is not None:
            coords, kerns = [], []
            for m, (V, k) in enumerate(zip(t.output_features.coords, t.output_features.kernels)):
                kr = p[self.slices[f"kern{m}"]]
                kerns.append(ArdKernelParams(kr[0], kr[1:]))
                if f"coords{m}" in self.active:
                    coords.append(p[self.slices[f"coords{m}"]].reshape(V.shape))
                else:
                    coords.append(V.copy())
            feats = LatentFeatures(coords, kerns)
        return replace(
            t,
            input_kernel=input_kernel,
            output_features=feats,
            log_noise=float(p[self.slices["noise"]][0]),
            _eig=None,
        )

    def value_and_grad(self, model: TgpModel):
        """Penalized NLL, gradient over this pack's parameters, and extras."""
        nll, gbars, d_noise, alpha = _nll_core(model)
        g = np.zeros(self.size)
        g[self.slices["input"]] = _chain_input_kernel(model, gbars[0])
        value = nll
        if model.output_features is not None:
            for m in range(len(model.mode_sizes)):
                g_kern, g_coords = _chain_output_mode(model, m, gbars[m + 1])
                g[self.slices[f"kern{m}"]] = g_kern
                if f"coords{m}" in self.active:
                    g[self.slices[f"coords{m}"]] = g_coords.ravel()
            if self.laplace.scale > 0:
                value -= laplace_log_prior(model.output_features, self.laplace)
                for m, gv in enumerate(laplace_log_prior_grad(model.output_features, self.laplace)):
                    if f"coords{m}" in self.active:
                        g[self.slices[f"coords{m}"]] -= gv.ravel()
        g[self.slices["noise"]] = d_noise * model.noise
        return value, g, {"alpha": alpha}

    def objective(self, p: np.ndarray):
        value, g, _ = self.value_and_grad(self.unpack(p))
        return value, g


def _initial_model(X, Y, config: FitConfig) -> TgpModel:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    offset = Y.mean(axis=0) if config.center else np.zeros(Y.shape[1:])
    Yc = Y - offset
    span = np.maximum(X.max(axis=0) - X.min(axis=0), 1e-3)
    var = max(float(Yc.var()), 1e-8)
    input_kernel = ArdKernelParams(np.log(var), np.log(span))
    feats = None
    if not config.identity_outputs:
        feats = LatentFeatures.initialize(
            Y.shape[1:], rank=config.latent_rank, seed=config.optim.seed
        )
    return TgpModel(
        input_kernel=input_kernel,
        output_features=feats,
        log_noise=np.log(1e-2 * var + JITTER),
        X=X,
        Y=Y,
        offset=offset,
    )


def tgp_fit(X, Y, config: FitConfig = FitConfig()):
    """Fit a TGP by maximum (penalized) likelihood.

    Outputs are centered per entry before fitting (and un-centered at
    prediction) unless ``config.center`` is off; hyperparameters, latent
    features and noise are optimized jointly in unconstrained coordinates.
    Returns ``(model, trace)``.
    """
    init = _initial_model(X, Y, config)
    pack = _TgpPack(init, config.laplace)
    p_opt, trace = minimize(pack.objective, pack.pack(init), config.optim)
    return pack.unpack(p_opt), trace


# ---------------------------------------------------------------------------
# Prediction: exact conditional via the eigen pipeline
# ---------------------------------------------------------------------------


@dataclass
class KronPsd:
    """Variance term ``scale_q * (S_1 (x) .. (x) S_M)`` per query point q.

    ``mats[m] = None`` denotes an identity factor of size ``sizes[m]``.
    """

    scale: np.ndarray
    mats: list
    sizes: tuple

    def diag(self) -> np.ndarray:
        diags = [
            np.ones(s) if m is None else np.diag(m).copy() for m, s in zip(self.mats, self.sizes)
        ]
        return np.multiply.outer(self.scale, kruskal_outer(diags))

    def sandwich(self, weights) -> "KronPsd":
        mats, sizes = [], []
        for W, S, s in zip(weights, self.mats, self.sizes):
            if W is None:
                mats.append(S)
                sizes.append(s)
            else:
                mats.append(W @ W.T if S is None else W @ S @ W.T)
                sizes.append(W.shape[0])
        return KronPsd(self.scale, mats, tuple(sizes))


@dataclass
class KronSq:
    """Variance term ``sign * F diag(weights) F^T`` with Kronecker-factored F.

    ``q_factor`` holds the per-query first-factor rows; ``factors[m] = None``
    denotes an identity output factor. Only the diagonal is ever materialized.
    """

    sign: float
    q_factor: np.ndarray
    factors: list
    weights: np.ndarray

    def diag(self) -> np.ndarray:
        sq = [self.q_factor**2] + [None if F is None else F**2 for F in self.factors]
        return self.sign * tucker_apply(self.weights, sq)

    def sandwich(self, weights) -> "KronSq":
        factors = []
        for W, F in zip(weights, self.factors):
            if W is None:
                factors.append(F)
            else:
                factors.append(W.copy() if F is None else W @ F)
        return KronSq(self.sign, self.q_factor, factors, self.weights)


def _variance_terms(model: TgpModel, k_star: np.ndarray):
    """Latent predictive covariance at the queries as structured terms.

    The exact conditional covariance is ``k** (x) S - B B^T`` with
    ``B = (k* U (x) U_1 L_1 (x) ..) (A)^{-1/2}``; both pieces stay closed
    under per-mode sandwiching, which is what the fidelity recursion needs.
    """
    eigs = model.eigenfactors()
    A = eigs.joint_values(model.noise)
    n_star = k_star.shape[0]
    prior = KronPsd(
        np.full(n_star, model.input_kernel.amplitude),
        [None if U is None else eigs.reconstruct(k + 1) for k, U in enumerate(eigs.vectors[1:])],
        model.mode_sizes,
    )
    U0 = eigs.vectors[0]
    factors = []
    for U, lam in zip(eigs.vectors[1:], eigs.values[1:]):
        factors.append(None if U is None else U * lam)
    corr = KronSq(-1.0, k_star @ U0, factors, 1.0 / A)
    return [prior, corr]


def _mean_factors(model: TgpModel, k_star: np.ndarray):
    """Factors producing the conditional mean from the projected data tensor."""
    eigs = model.eigenfactors()
    U0 = eigs.vectors[0]
    facs = [k_star @ U0]
    for U, lam in zip(eigs.vectors[1:], eigs.values[1:]):
        facs.append(None if U is None else U * lam)
    return facs


def _predict_parts(model: TgpModel, x_star: np.ndarray):
    """Batched conditional mean (without offset) and variance terms."""
    Xs = np.atleast_2d(np.asarray(x_star, dtype=float))
    k_star = ard_gram(model.input_kernel, Xs, model.X)
    eigs = model.eigenfactors()
    A = eigs.joint_values(model.noise)
    At = eigs.project(model.centered) / A
    mean = tucker_apply(At, _mean_factors(model, k_star))
    return mean, _variance_terms(model, k_star)


def tgp_predict(model: TgpModel, x_star) -> PosteriorField:
    """Exact conditional prediction at one input (or a batch of inputs).

    The mean is the conditional mean of the joint Gaussian; the variance
    tensor is the conditional diagonal plus observation noise, clamped at
    zero after the subtraction.
    """
    x_star = np.asarray(x_star, dtype=float)
    single = x_star.ndim == 1
    mean, terms = _predict_parts(model, x_star)
    var = sum(t.diag() for t in terms)
    var = np.clip(var, 0.0, None) + model.noise
    mean = mean + model.offset
    if single:
        return PosteriorField(mean[0], var[0])
    return PosteriorField(mean, var)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

TGP_SCHEMA = "mfgar/tgp-1"


def tgp_to_dict(model: TgpModel, dataset_ref: str | None = None) -> dict:
    """Self-describing JSON document for a fitted model."""
    doc = {
        "schema": TGP_SCHEMA,
        "input_kernel": {
            "log_amplitude": model.input_kernel.log_amplitude,
            "log_lengthscales": model.input_kernel.log_lengthscales.tolist(),
        },
        "log_noise": model.log_noise,
        "shapes": {"n": model.n_samples, "modes": list(model.mode_sizes)},
        "X": model.X.tolist(),
        "Y": model.Y.tolist(),
        "offset": model.offset.tolist(),
        "dataset_ref": dataset_ref,
    }
    if model.output_features is None:
        doc["output_features"] = None
    else:
        doc["output_features"] = [
            {
                "coords": V.tolist(),
                "log_amplitude": k.log_amplitude,
                "log_lengthscales": k.log_lengthscales.tolist(),
            }
            for V, k in zip(model.output_features.coords, model.output_features.kernels)
        ]
    return doc


def tgp_from_dict(doc: dict) -> TgpModel:
    if doc.get("schema") != TGP_SCHEMA:
        raise ValueError(f"unsupported model schema {doc.get('schema')!r}")
    feats = None
    if doc["output_features"] is not None:
        coords = [np.asarray(f["coords"]) for f in doc["output_features"]]
        kerns = [
            ArdKernelParams(f["log_amplitude"], np.asarray(f["log_lengthscales"]))
            for f in doc["output_features"]
        ]
        feats = LatentFeatures(coords, kerns)
    ik = doc["input_kernel"]
    return TgpModel(
        input_kernel=ArdKernelParams(ik["log_amplitude"], np.asarray(ik["log_lengthscales"])),
        output_features=feats,
        log_noise=doc["log_noise"],
        X=np.asarray(doc["X"]),
        Y=np.asarray(doc["Y"]),
        offset=np.asarray(doc["offset"]),
    )


def save_tgp(model: TgpModel, path, dataset_ref: str | None = None):
    with open(path, "w") as fh:
        json.dump(tgp_to_dict(model, dataset_ref), fh)


def load_tgp(path) -> TgpModel:
    with open(path) as fh:
        return tgp_from_dict(json.load(fh))
