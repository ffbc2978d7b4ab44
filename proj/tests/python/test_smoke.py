import math

import numpy as np
import pytest

import ntkmeta


def test_forward_and_gradient_match_finite_differences():
    spec = ntkmeta.NetworkSpec.mlp(3, [8], 1)
    theta = ntkmeta.init_params(spec, 1)
    assert theta.shape == (spec.param_count,)
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (5, 3))
    y = rng.normal(size=(5, 1))
    assert ntkmeta.predict(spec, theta, x).shape == (5, 1)
    g = ntkmeta.grad_loss(spec, theta, x, y)
    h = 1e-6
    for i in range(0, spec.param_count, 7):
        e = np.zeros_like(theta)
        e[i] = h
        fd = (ntkmeta.loss(spec, theta + e, x, y) - ntkmeta.loss(spec, theta - e, x, y)) / (2 * h)
        assert abs(fd - g[i]) <= 1e-6 * max(1.0, abs(fd))


def test_kernel_norm_identity():
    spec = ntkmeta.NetworkSpec.mlp(2, [6, 6], 2)
    theta = ntkmeta.init_params(spec, 3)
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, (4, 2))
    y = rng.normal(size=(4, 2))
    g = ntkmeta.grad_loss(spec, theta, x, y)
    assert ntkmeta.functional_grad_norm_sq(spec, theta, x, y) == pytest.approx(g @ g, rel=1e-10)


def test_gram_is_jacobian_product():
    spec = ntkmeta.NetworkSpec.mlp(2, [5], 1)
    theta = ntkmeta.init_params(spec, 4)
    x = np.array([[0.1, 0.2], [-0.3, 0.5], [0.7, -0.4]])
    jac = np.vstack([ntkmeta.jacobian(spec, theta, row) for row in x])
    np.testing.assert_allclose(ntkmeta.gram(spec, theta, x), jac @ jac.T, rtol=1e-12)


def test_closed_form_matches_flow_and_interpolates():
    spec = ntkmeta.NetworkSpec.mlp(3, [16, 16], 1)
    theta = ntkmeta.init_params(spec, 5)
    rng = np.random.default_rng(2)
    sx, sy = rng.uniform(-1, 1, (5, 3)), rng.normal(size=(5, 1))
    qx = rng.uniform(-1, 1, (4, 3))
    closed = ntkmeta.adapt_closed_form(spec, theta, sx, sy, qx, 1.0)
    flow = ntkmeta.linearized_flow(spec, theta, sx, sy, qx, 1.0)
    np.testing.assert_allclose(closed, flow, rtol=1e-4, atol=1e-8)
    fit = ntkmeta.adapt_closed_form(spec, theta, sx, sy, sx, "inf")
    np.testing.assert_allclose(fit, sy, atol=1e-6)


def test_expm():
    a = np.array([[-0.1]])
    assert ntkmeta.pade_expm(a, 1)[0, 0] == pytest.approx((1 - 0.05) / (1 + 0.05), rel=1e-15)
    assert ntkmeta.expm_oracle(np.array([[3.0]]))[0, 0] == pytest.approx(math.exp(3.0), rel=1e-12)


def test_label_encoding_round_trip():
    labels = [0, 2, 1, 2]
    enc = ntkmeta.encode_labels(labels, 3)
    np.testing.assert_allclose(enc.sum(axis=1), 0.0, atol=1e-15)
    assert ntkmeta.decode_labels(enc) == labels


def test_config_and_errors():
    assert ntkmeta.config_hash({"seed": 1}) == ntkmeta.config_hash('{"seed": 1}')
    assert ntkmeta.config_hash({"seed": 1}) != ntkmeta.config_hash({"seed": 2})
    with pytest.raises(ntkmeta.Error, match="field bogus"):
        ntkmeta.config_hash({"bogus": 1})
    with pytest.raises(ValueError, match="meta.inner_lr"):
        ntkmeta.config_json({"meta": {"inner_lr": -1}})


def test_sample_task():
    t = ntkmeta.sample_task({"experiment": "blob-classification", "tasks": {"kind": "blobs"}}, seed=3)
    assert t["num_classes"] == 5
    assert t["support_x"].shape == (5, 8)
    assert len(t["query_labels"]) == 25


def test_train_evaluate_deterministic(tmp_path):
    cfg = {"algorithm": "fomaml", "network": {"hidden": [8]}, "meta_iterations": 3,
           "eval_tasks": 2, "meta": {"meta_batch": 2}}
    a = ntkmeta.train(cfg, str(tmp_path))
    b = ntkmeta.train(cfg)
    np.testing.assert_array_equal(a["theta"], b["theta"])
    assert a["metrics_csv"] == b["metrics_csv"]
    assert (tmp_path / "checkpoint.json").exists()
    csv = ntkmeta.evaluate(cfg, a["theta"])
    assert csv.startswith("algorithm,adaptation,metric,mean,stderr,n_tasks,iteration,config_hash\n")


def test_checks():
    assert ",false," not in ntkmeta.expm_check()
    assert "grad_loss" in ntkmeta.gradcheck({"network": {"hidden": [6]}})
