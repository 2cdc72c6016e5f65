import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pseudocoreset import diffcore as dc
from pseudocoreset.models import (
    Augmentation,
    Dataset,
    DatasetFormatError,
    ModelSpec,
    NumericError,
    ParamVector,
    UnsupportedModelError,
    augment,
    exact_conjugate_posterior,
    load_bpcd,
    load_csv,
    log_potential,
    loss,
    loss_grad_value,
    per_datum_log_lik,
    potential_energy,
    save_bpcd,
    save_csv,
)
from conftest import central_diff, rel_err

SPECS = [
    ModelSpec("gaussian-location", 3, likelihood_cov=[1.0, 2.0, 0.5], prior_mean=0.3, prior_cov=2.0),
    ModelSpec("softmax-linear", 3, num_classes=4, weight_decay=0.1),
    ModelSpec("mlp-1hidden", 3, num_classes=3, hidden=5, weight_decay=0.05),
]


def _instance(spec, rng, n=6):
    x = rng.uniform(-2, 2, (n, spec.input_dim))
    y = rng.integers(0, spec.num_classes, n) if spec.is_classifier else None
    return Dataset(x, y), rng.uniform(-1, 1, spec.param_dim)


def test_gaussian_zero_residual():
    spec = ModelSpec("gaussian-location", 2)
    theta = np.array([0.4, -1.0])
    assert log_potential(spec, Dataset(theta[None]), theta).value == 0.0


def test_uniform_softmax():
    spec = ModelSpec("softmax-linear", 3, num_classes=2)
    vals = per_datum_log_lik(spec, np.random.default_rng(0).normal(size=(4, 3)), [0, 1, 1, 0], np.zeros(spec.param_dim))
    np.testing.assert_allclose(vals.value, np.log(0.5), atol=1e-15)


def test_mlp_forward_against_plain_numpy(rng):
    spec = SPECS[2]
    data, theta = _instance(spec, rng)
    h, d, c = spec.hidden, spec.input_dim, spec.num_classes
    w1 = theta[: h * d].reshape(h, d)
    b1 = theta[h * d: h * d + h]
    w2 = theta[h * d + h: h * d + h + c * h].reshape(c, h)
    b2 = theta[-c:]
    z = np.tanh(data.features @ w1.T + b1) @ w2.T + b2
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    expect = logp[np.arange(len(data)), data.labels]
    np.testing.assert_allclose(per_datum_log_lik(spec, data.features, data.labels, theta).value, expect, rtol=1e-13)


def test_potential_energy_cases():
    spec = ModelSpec("gaussian-location", 2)
    theta = np.array([1.0, 0.0])
    data = Dataset(theta[None])
    assert potential_energy(spec, data, theta, 0.0).value == 0.0
    # f is zero on this datum, so only the decay term remains
    assert potential_energy(spec, data, theta, 1.0).value == 1.0


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.family)
def test_log_potential_gradients_match_fd(spec, rng):
    data, theta = _instance(spec, rng)
    _, g_theta = dc.grad(lambda t: log_potential(spec, data, t), theta)
    fd = central_diff(lambda t: float(log_potential(spec, data, t).value), theta)
    assert rel_err(g_theta, fd) < 1e-5
    _, g_x = dc.grad(lambda x: log_potential(spec, data, theta, feats=x), data.features)
    fd = central_diff(lambda x: float(log_potential(spec, Dataset(x, data.labels), theta).value), data.features)
    assert rel_err(g_x, fd) < 1e-5


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.family)
@pytest.mark.parametrize("with_prior", [True, False])
def test_hand_loss_gradient_matches_autodiff(spec, with_prior, rng):
    data, theta = _instance(spec, rng)
    _, g = dc.grad(lambda t: loss(spec, data, t, with_prior=with_prior), theta)
    np.testing.assert_allclose(loss_grad_value(spec, data, theta, with_prior), g, rtol=1e-11, atol=1e-12)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.family)
def test_hand_gradient_differentiable_in_features(spec, rng):
    from pseudocoreset.models import loss_grad

    data, theta = _instance(spec, rng)
    v = rng.normal(size=spec.param_dim)
    _, g = dc.grad(lambda x: dc.dot(loss_grad(spec, x, data.labels, theta), v), data.features)
    fd = central_diff(lambda x: float(loss_grad(spec, x, data.labels, theta).value @ v), data.features)
    assert rel_err(g, fd) < 1e-5


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
def test_log_potential_additive(n1, n2, seed):
    r = np.random.default_rng(seed)
    for spec in SPECS:
        a, theta = _instance(spec, r, n1)
        b, _ = _instance(spec, r, n2)
        whole = log_potential(spec, a.concat(b), theta).value
        parts = log_potential(spec, a, theta).value + log_potential(spec, b, theta).value
        assert abs(whole - parts) <= 1e-12 * max(1.0, abs(whole))


def test_nonfinite_potential_names_datum():
    spec = ModelSpec("gaussian-location", 1)
    data = Dataset(np.array([[0.0], [1e200], [0.0]]))
    with np.errstate(over="ignore"), pytest.raises(NumericError, match="datum 1"):
        log_potential(spec, data, np.zeros(1))


def test_param_manifest():
    spec = SPECS[2]
    pv = spec.params(np.arange(spec.param_dim, dtype=float))
    assert pv.segment("W1").shape == (5, 3)
    assert pv.segment("b2").tolist() == list(np.arange(spec.param_dim - 3, spec.param_dim, dtype=float))
    with pytest.raises(ValueError):
        ParamVector(np.zeros(spec.param_dim + 1), spec.manifest)


def test_bad_specs():
    with pytest.raises(UnsupportedModelError):
        ModelSpec("resnet", 3)
    with pytest.raises(ValueError):
        ModelSpec("softmax-linear", 3, num_classes=1)


# --- conjugate posterior -----------------------------------------------------

def test_conjugate_empty_is_prior():
    spec = ModelSpec("gaussian-location", 3, prior_mean=[1.0, 2.0, 3.0], prior_cov=[1.0, 4.0, 9.0])
    post = exact_conjugate_posterior(spec, np.zeros((0, 3)))
    np.testing.assert_array_equal(post.mean, [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(post.cov, np.diag([1.0, 4.0, 9.0]))


def test_conjugate_textbook_case():
    post = exact_conjugate_posterior(ModelSpec("gaussian-location", 1), np.array([[2.0]]))
    assert post.mean[0] == pytest.approx(1.0, abs=1e-15)
    assert post.cov[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_conjugate_mean_is_stationary(rng):
    a = rng.normal(size=(10, 10))
    spec = ModelSpec("gaussian-location", 10, likelihood_cov=a @ a.T / 10 + np.eye(10), prior_mean=rng.normal(size=10), prior_cov=2.0)
    data = Dataset(rng.normal(size=(5, 10)))
    post = exact_conjugate_posterior(spec, data)
    assert np.linalg.norm(loss_grad_value(spec, data, post.mean)) < 1e-8


def test_conjugate_quadrature_slice(rng):
    # 1-D slice through the posterior along a random direction: the unnormalised
    # log density restricted to the line is quadratic with its peak at the mean.
    spec = ModelSpec("gaussian-location", 10)
    data = Dataset(rng.normal(1.0, 1.0, size=(5, 10)))
    post = exact_conjugate_posterior(spec, data)
    v = rng.normal(size=10)
    v /= np.linalg.norm(v)
    t = np.linspace(-3, 3, 20001)
    logd = np.array([-float(loss(spec, data, post.mean + s * v).value) for s in t])
    w = np.exp(logd - logd.max())
    centre = np.trapezoid(w * t, t) / np.trapezoid(w, t)
    var = np.trapezoid(w * (t - centre) ** 2, t) / np.trapezoid(w, t)
    assert abs(centre) < 1e-6
    assert var == pytest.approx(v @ post.cov @ v, rel=1e-6)


def test_conjugate_monte_carlo_mean(rng):
    # importance sampling from the prior
    spec = ModelSpec("gaussian-location", 2)
    data = Dataset(rng.normal(0.5, 1.0, size=(3, 2)))
    post = exact_conjugate_posterior(spec, data)
    th = rng.normal(size=(400_000, 2))
    logw = -0.5 * ((data.features[None] - th[:, None]) ** 2).sum(axis=(1, 2))
    w = np.exp(logw - logw.max())
    est = (w[:, None] * th).sum(0) / w.sum()
    ess = w.sum() ** 2 / (w**2).sum()
    se = np.sqrt(np.diag(post.cov) / ess)
    assert np.all(np.abs(est - post.mean) < 4 * se)


def test_conjugate_rejects_classifier():
    with pytest.raises(UnsupportedModelError):
        exact_conjugate_posterior(SPECS[1], np.zeros((1, 3)))


# --- augmentation --------------------------------------------------------------

def test_identity_and_zero_jitter():
    x = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(augment(x, Augmentation.parse("identity"), None), x)
    np.testing.assert_array_equal(augment(x, Augmentation.parse("gaussian-jitter:0"), np.random.default_rng(1)), x)


def test_jitter_std():
    x = np.zeros((100_000, 2))
    out = augment(x, Augmentation.parse("gaussian-jitter:0.1"), np.random.default_rng(3))
    np.testing.assert_allclose(out.std(axis=0), 0.1, rtol=0.02)


def test_unknown_augmentation():
    with pytest.raises(ValueError):
        Augmentation.parse("rotate:3")


# --- files -----------------------------------------------------------------

def test_bpcd_roundtrip(tmp_path, rng):
    data = Dataset(rng.normal(size=(7, 3)), rng.integers(0, 4, 7))
    save_bpcd(tmp_path / "d.bpcd", data)
    back = load_bpcd(tmp_path / "d.bpcd")
    assert back.features.tobytes() == data.features.tobytes()
    np.testing.assert_array_equal(back.labels, data.labels)
    unl = Dataset(rng.normal(size=(2, 5)))
    save_bpcd(tmp_path / "u.bpcd", unl)
    assert load_bpcd(tmp_path / "u.bpcd").labels is None


def test_bpcd_corruption(tmp_path, rng):
    path = tmp_path / "d.bpcd"
    save_bpcd(path, Dataset(rng.normal(size=(3, 2))))
    raw = path.read_bytes()
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DatasetFormatError, match="magic"):
        load_bpcd(path)
    path.write_bytes(raw[:-8])
    with pytest.raises(DatasetFormatError):
        load_bpcd(path)
    path.write_bytes(raw[:10])
    with pytest.raises(DatasetFormatError):
        load_bpcd(path)


def test_csv_roundtrip(tmp_path, rng):
    data = Dataset(rng.normal(size=(5, 2)), rng.integers(0, 3, 5))
    save_csv(tmp_path / "d.csv", data)
    back = load_csv(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.features, data.features)
    np.testing.assert_array_equal(back.labels, data.labels)
