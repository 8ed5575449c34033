"""Conditionally independent fusion: identity output covariances, orthonormal
weights, input-space-only inference.

With every output covariance fixed to the identity and the weight factors
constrained to orthonormal columns, all likelihood algebra collapses onto
N x N input-space matrices: the subset objective is a multi-channel GP, and
the non-subset correction block becomes ``embed(S_hat) (x) W W^T`` whose
inverse splits over the weight column space and its complement,

    (G0 (x) I + B (x) P)^{-1} = G0^{-1} (x) (I - P) + (G0 + B)^{-1} (x) P,

with ``P = W W^T`` the per-mode projector, so two N x N factorizations
suffice at any output dimension.  Predictive means coincide with the full
model's means when the latter also carries identity output covariances (the
mean never depends on the output covariance); predictive variances are the
price paid for the speedup.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import polar

from .gar import (
    GarConfig,
    GarModel,
    MultiFidelityDataset,
    TuckerWeights,
    gar_fit_recursive,
    gar_nll_nonsubset,
    gar_predict,
)
from .hogp import PosteriorField

ORTHO_TOL = 1e-8


@dataclass
class CigarModel(GarModel):
    """Fitted conditional-independent fusion model.

    Same container as the full model with identity output covariances and
    per-mode orthonormal-column weight factors (validated on construction).
    """

    def __post_init__(self):
        if self.low.output_features is not None:
            raise ValueError("conditional-independent model requires identity output covariances")
        for t in self.transitions:
            if t.residual.output_features is not None:
                raise ValueError("residual output covariances must be identity")
            err = orthonormality_error(t.weights)
            if err > ORTHO_TOL:
                raise ValueError(f"weight factors not orthonormal (error {err:.2e})")


def orthonormality_error(weights: TuckerWeights) -> float:
    """max-norm deviation of W_m^T W_m from the identity over all modes."""
    worst = 0.0
    for f in weights.factors:
        worst = max(worst, float(np.abs(f.T @ f - np.eye(f.shape[1])).max()))
    return worst


def orthonormalize(weights: TuckerWeights) -> TuckerWeights:
    """Project every factor to its nearest orthonormal-column matrix.

    Uses the orthogonal polar factor, which minimizes the Frobenius distance
    among matrices with orthonormal columns; idempotent. Raises on
    rank-deficient factors (the projection is then not unique).
    """
    out = []
    for f in weights.factors:
        if f.shape[0] < f.shape[1]:
            raise ValueError("cannot orthonormalize more columns than rows")
        sv = np.linalg.svd(f, compute_uv=False)
        if sv[-1] <= 1e-12 * max(sv[0], 1.0):
            raise ValueError("rank-deficient weight factor cannot be orthonormalized")
        u, _ = polar(f)
        out.append(u)
    return TuckerWeights(out)


def cigar_fit(dataset: MultiFidelityDataset, config: GarConfig = GarConfig()) -> CigarModel:
    """Fit the conditional-independent model on subset or non-subset data.

    Orthonormality is enforced by an exact polar retraction after every
    optimizer step rather than a penalty, so the constraint holds along the
    whole accepted trajectory.  No output-mode covariance is ever allocated
    or factorized during the fit.
    """
    cfg = replace(config, identity_outputs=True, w_mode="orthonormal")
    fitted = gar_fit_recursive(dataset, cfg)
    return CigarModel(
        low=fitted.low, transitions=fitted.transitions, kind="cigar", rho=None
    )


def cigar_predict(model: CigarModel, x_star) -> PosteriorField:
    """Predict with the collapsed model.

    The mean matches the full model's posterior mean at equal parameters;
    the variance diagonal uses the identity output factors, i.e. per-entry
    scalar-GP variances scaled by ``diag(W W^T)`` along the chain.
    """
    return gar_predict(model, x_star)


def cigar_nll(model: CigarModel) -> float:
    """Exact marginal NLL of a fitted two-level model (either structure)."""
    return gar_nll_nonsubset(model)
