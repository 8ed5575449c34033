"""Tensor-variate GP: NLL pipeline vs dense oracle, gradients, prediction."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from mfgar.hogp import (
    FitConfig,
    TgpModel,
    _TgpPack,
    tgp_fit,
    tgp_from_dict,
    tgp_nll,
    tgp_predict,
    tgp_to_dict,
)
from mfgar.kernels import ArdKernelParams, LaplacePrior
from mfgar.optim import OptimConfig, grad_audit
from oracles import (
    dense_tgp_nll,
    dense_tgp_predict,
    make_random_tgp,
    sample_from_model,
)


def test_nll_closed_form_scalar():
    # N=1, d=1, K = amplitude = 1, S = 1, noise = 1, y = 0.
    model = TgpModel(
        input_kernel=ArdKernelParams(0.0, np.zeros(1)),
        output_features=None,
        log_noise=0.0,
        X=np.zeros((1, 1)),
        Y=np.zeros((1, 1)),
    )
    expected = 0.5 * np.log(2 * np.pi) + 0.5 * np.log(2.0)
    assert_allclose(tgp_nll(model), expected, rtol=1e-12)


def test_nll_matches_dense_oracle_random():
    rng = np.random.default_rng(0)
    model = make_random_tgp(rng, 3, (2, 2))
    assert_allclose(tgp_nll(model), dense_tgp_nll(model), rtol=1e-8)


@pytest.mark.parametrize(
    "n,modes,identity",
    [
        (2, (3,), False),
        (4, (2, 3), False),
        (5, (2, 2, 2), False),
        (8, (5, 5), False),
        (6, (4,), True),
        (3, (2, 3, 2), True),
    ],
)
def test_nll_oracle_sweep(n, modes, identity):
    # Oracle equivalence across shapes with N*d <= 200.
    rng = np.random.default_rng(hash((n, modes)) % 2**32)
    model = make_random_tgp(rng, n, modes, identity_outputs=identity)
    assert n * model.output_size <= 200
    assert_allclose(tgp_nll(model), dense_tgp_nll(model), rtol=1e-8)


def test_nll_large_noise_limit():
    rng = np.random.default_rng(1)
    model = make_random_tgp(rng, 3, (2, 2), noise=1e8)
    n_total = 3 * 4
    # quad -> 0 and logdet -> N d log(noise)
    expected = 0.5 * (n_total * np.log(1e8) + n_total * np.log(2 * np.pi))
    assert_allclose(tgp_nll(model), expected, rtol=1e-5)


def test_nll_with_centering_offset():
    rng = np.random.default_rng(2)
    model = make_random_tgp(rng, 4, (3,))
    shifted = TgpModel(
        input_kernel=model.input_kernel,
        output_features=model.output_features,
        log_noise=model.log_noise,
        X=model.X,
        Y=model.Y + 5.0,
        offset=model.offset + 5.0,
    )
    assert_allclose(tgp_nll(shifted), tgp_nll(model), rtol=1e-12)


def test_gradient_audit_all_parameters():
    # Finite differences are the oracle; production gradients are analytic.
    for seed in (3, 4, 5):
        rng = np.random.default_rng(seed)
        model = make_random_tgp(rng, 3, (2, 2), noise=0.1)
        pack = _TgpPack(model, LaplacePrior(0.0))
        point = pack.pack(model)
        assert grad_audit(pack.objective, point, eps=1e-5) < 1e-4


def test_gradient_audit_identity_outputs():
    rng = np.random.default_rng(6)
    model = make_random_tgp(rng, 4, (3,), identity_outputs=True, noise=0.2)
    pack = _TgpPack(model, LaplacePrior(0.0))
    assert grad_audit(pack.objective, pack.pack(model), eps=1e-5) < 1e-4


def test_gradient_audit_with_laplace_penalty():
    rng = np.random.default_rng(7)
    model = make_random_tgp(rng, 3, (3,), noise=0.1)
    pack = _TgpPack(model, LaplacePrior(0.4))
    assert grad_audit(pack.objective, pack.pack(model), eps=1e-5) < 1e-4


def test_fit_constant_outputs():
    rng = np.random.default_rng(8)
    X = rng.uniform(0, 1, size=(10, 2))
    Y = np.full((10, 2, 2), 3.7)
    model, trace = tgp_fit(X, Y, FitConfig(optim=OptimConfig(max_iters=60)))
    pred = tgp_predict(model, np.array([0.5, 0.5]))
    assert np.max(np.abs(pred.mean - 3.7)) < 1e-3
    objs = trace.objectives
    assert all(b <= a + 1e-12 for a, b in zip(objs, objs[1:]))


def test_fit_recovers_lengthscale_within_factor_two():
    rng = np.random.default_rng(9)
    true = TgpModel(
        input_kernel=ArdKernelParams(0.0, [np.log(0.3)]),
        output_features=None,
        log_noise=np.log(1e-4),
        X=np.linspace(0, 1, 30)[:, None],
        Y=np.zeros((30, 1)),
    )
    Y = sample_from_model(rng, true)
    model, _ = tgp_fit(
        true.X, Y, FitConfig(identity_outputs=True, optim=OptimConfig(max_iters=300, step=0.05))
    )
    fitted = model.input_kernel.lengthscales[0]
    assert 0.15 < fitted < 0.6


def test_laplace_prior_shrinks_latent_features():
    rng = np.random.default_rng(18)
    X = rng.uniform(0, 1, size=(12, 2))
    Y = np.stack([np.sin(2 * np.pi * x[0]) * np.ones((3, 3)) + x[1] for x in X])
    cfg = OptimConfig(max_iters=120, step=0.05)
    free, _ = tgp_fit(X, Y, FitConfig(optim=cfg))
    from mfgar.kernels import LaplacePrior

    shrunk, _ = tgp_fit(X, Y, FitConfig(optim=cfg, laplace=LaplacePrior(50.0)))
    norm_free = sum(np.abs(V).sum() for V in free.output_features.coords)
    norm_shrunk = sum(np.abs(V).sum() for V in shrunk.output_features.coords)
    assert norm_shrunk < norm_free


def test_predict_interpolates_training_data():
    rng = np.random.default_rng(10)
    model = make_random_tgp(rng, 5, (2, 2), noise=1e-6)
    pred = tgp_predict(model, model.X[2])
    assert np.max(np.abs(pred.mean - model.Y[2])) < 1e-4


def test_predict_prior_reversion_far_field():
    rng = np.random.default_rng(11)
    model = make_random_tgp(rng, 4, (3,), noise=0.04)
    far = np.array([50.0, -40.0])
    pred = tgp_predict(model, far)
    assert np.max(np.abs(pred.mean - model.offset)) < 1e-8
    from oracles import dense_output_cov

    expected = model.input_kernel.amplitude * np.diag(dense_output_cov(model)) + model.noise
    assert_allclose(pred.variance_diag.ravel(), expected, rtol=1e-6)


def test_predict_matches_dense_conditional():
    rng = np.random.default_rng(12)
    model = make_random_tgp(rng, 4, (2, 3), noise=0.1)
    Xq = rng.uniform(-1, 1, size=(3, 2))
    pred = tgp_predict(model, Xq)
    mean_d, var_d = dense_tgp_predict(model, Xq)
    assert_allclose(pred.mean, mean_d, rtol=1e-7, atol=1e-10)
    assert_allclose(pred.variance_diag, var_d, rtol=1e-7, atol=1e-10)


@pytest.mark.parametrize("identity", [False, True])
def test_predict_oracle_sweep(identity):
    rng = np.random.default_rng(13 + identity)
    for n, modes in [(2, (2,)), (5, (3, 2)), (7, (2, 2, 2))]:
        model = make_random_tgp(rng, n, modes, identity_outputs=identity, noise=0.07)
        Xq = rng.uniform(-1, 1, size=(2, 2))
        pred = tgp_predict(model, Xq)
        mean_d, var_d = dense_tgp_predict(model, Xq)
        assert_allclose(pred.mean, mean_d, rtol=1e-7, atol=1e-10)
        assert_allclose(pred.variance_diag, var_d, rtol=1e-6, atol=1e-10)


def test_predict_offset_uncentered():
    rng = np.random.default_rng(15)
    model = make_random_tgp(rng, 4, (2,))
    shifted = TgpModel(
        input_kernel=model.input_kernel,
        output_features=model.output_features,
        log_noise=model.log_noise,
        X=model.X,
        Y=model.Y + 2.0,
        offset=model.offset + 2.0,
    )
    q = np.array([0.1, -0.2])
    assert_allclose(tgp_predict(shifted, q).mean, tgp_predict(model, q).mean + 2.0, rtol=1e-10)


def test_variance_nonnegative_and_information_monotone():
    rng = np.random.default_rng(16)
    model = make_random_tgp(rng, 5, (2, 2), noise=0.02)
    q = np.array([0.3, 0.4])
    before = tgp_predict(model, q)
    assert np.all(before.variance_diag >= 0)
    # Add a training observation at the query point: variance must drop.
    X2 = np.vstack([model.X, q])
    Y2 = np.concatenate([model.Y, np.zeros((1, 2, 2))])
    bigger = TgpModel(
        input_kernel=model.input_kernel,
        output_features=model.output_features,
        log_noise=model.log_noise,
        X=X2,
        Y=Y2,
    )
    after = tgp_predict(bigger, q)
    assert np.all(after.variance_diag < before.variance_diag)


def test_noise_floor_enforced():
    model = TgpModel(
        input_kernel=ArdKernelParams(0.0, np.zeros(1)),
        output_features=None,
        log_noise=np.log(1e-12),
        X=np.zeros((1, 1)),
        Y=np.zeros((1, 1)),
    )
    assert model.noise >= 1e-6


def test_serialization_roundtrip():
    rng = np.random.default_rng(17)
    model = make_random_tgp(rng, 4, (2, 3))
    doc = tgp_to_dict(model, dataset_ref="synthetic")
    assert doc["schema"] == "mfgar/tgp-1"
    back = tgp_from_dict(doc)
    assert_allclose(tgp_nll(back), tgp_nll(model), rtol=1e-12)
    q = rng.uniform(-1, 1, size=2)
    assert_allclose(tgp_predict(back, q).mean, tgp_predict(model, q).mean, rtol=1e-12)


def test_serialization_rejects_unknown_schema():
    with pytest.raises(ValueError):
        tgp_from_dict({"schema": "bogus"})
