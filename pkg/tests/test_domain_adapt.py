import math

import numpy as np
import pytest

from splatnav.domain_adapt import (DaConfig, DaNetwork, Mlp, da_loss_value,
                                   demo_config, grl_backward, gsi,
                                   make_two_domain_dataset, probe_accuracy,
                                   read_feature_dump, train_da_demo,
                                   write_feature_dump)


def tiny_config(**kw):
    defaults = dict(input_dim=5, content_dim=2, encoder_hidden=(8, 4),
                    disc_hidden=(6,), lambda_grl=1.0)
    defaults.update(kw)
    return DaConfig(**defaults)


def batch(rng, n=10, dim=5):
    return rng.normal(size=(n, dim))


# -- gradient reversal --------------------------------------------------------


def test_grl_lambda_zero_blocks_gradient():
    g = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(grl_backward(g, 0.0), np.zeros_like(g))


def test_grl_lambda_one_negates():
    g = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(grl_backward(g, 1.0), -g)


def test_grl_flips_encoder_gradient_sign():
    """With the discriminator frozen, toggling the reversal flips the sign of
    every encoder gradient; both signs match finite differences."""
    rng = np.random.default_rng(1)
    xs, xt = batch(rng), batch(rng)

    def loss_with(lam, net):
        net.cfg.lambda_grl = lam
        net.zero_grad()
        return net.da_loss(xs, xt)

    net = DaNetwork(tiny_config(), np.random.default_rng(2))
    loss_with(1.0, net)
    grads_rev = [g.copy() for g in net.encoder.gradients()]
    loss_with(0.0, net)  # reversal disabled: no adversarial signal reaches it
    for g in net.encoder.gradients():
        assert np.array_equal(g, np.zeros_like(g))

    # the stored lambda=1 gradient must be the exact negation of the true
    # BCE derivative, which central differences recover below
    h = 1e-6
    w = net.encoder.weights[0]
    for idx in [(0, 0), (1, 2)]:
        orig = w[idx]
        w[idx] = orig + h
        up = net.da_loss(np.array(xs), np.array(xt), backward=False)
        w[idx] = orig - h
        dn = net.da_loss(np.array(xs), np.array(xt), backward=False)
        w[idx] = orig
        fd = (up - dn) / (2 * h)
        assert abs(-grads_rev[0][idx] - fd) <= 1e-4 * max(1.0, abs(fd))


# -- BCE domain loss ----------------------------------------------------------


def test_da_loss_at_chance_is_two_ln_two():
    half = np.full((16, 1), 0.5)
    assert da_loss_value(half, half) == pytest.approx(2 * math.log(2), abs=1e-12)


def test_da_loss_perfect_discriminator_near_zero():
    assert da_loss_value(np.full((8, 1), 1 - 1e-7),
                         np.full((8, 1), 1e-7)) == pytest.approx(0.0, abs=1e-5)


# -- finite-difference gradient checks ---------------------------------------


def fd_check(net, loss_fn, modules, rel_tol, sign=1.0):
    """Central finite differences over every parameter of the given modules.

    sign=-1 checks a gradient-reversed path, where the stored gradient must
    be the negated derivative of the scalar loss.
    """
    net.zero_grad()
    loss_fn(backward=True)
    params = [p for m in modules for p in m.parameters()]
    grads = [g.copy() for m in modules for g in m.gradients()]
    h = 1e-6
    rng = np.random.default_rng(0)
    for p, g in zip(params, grads):
        flat = p.reshape(-1)
        picks = rng.choice(flat.size, size=min(6, flat.size), replace=False)
        for j in picks:
            orig = flat[j]
            flat[j] = orig + h
            up = loss_fn(backward=False)
            flat[j] = orig - h
            dn = loss_fn(backward=False)
            flat[j] = orig
            fd = sign * (up - dn) / (2 * h)
            assert abs(g.reshape(-1)[j] - fd) <= rel_tol * max(1.0, abs(fd))


def test_task_loss_gradients():
    rng = np.random.default_rng(3)
    net = DaNetwork(tiny_config(), np.random.default_rng(4))
    x, c = batch(rng), rng.normal(size=(10, 2))
    fd_check(net, lambda backward: net.task_loss(x, c, backward=backward),
             [net.encoder, net.head], 1e-4)


def test_da_loss_gradients_all_networks():
    rng = np.random.default_rng(5)
    net = DaNetwork(tiny_config(), np.random.default_rng(6))
    xs, xt = batch(rng), batch(rng)
    # discriminator ascends the plain BCE; encoder descends the reversed one
    fd_check(net, lambda backward: net.da_loss(xs, xt, backward=backward),
             [net.discriminator], 1e-4)
    net2 = DaNetwork(tiny_config(lambda_grl=1.0), np.random.default_rng(6))
    fd_check(net2, lambda backward: net2.da_loss(xs, xt, backward=backward),
             [net2.encoder], 1e-4, sign=-1.0)


def total_loss_grads(net, xs, xt, cs, ct):
    net.zero_grad()
    net.total_loss(xs, xt, cs, ct)
    return [g.copy() for m in net.modules() for g in m.gradients()]


def test_total_loss_lambda2_zero_equals_task():
    rng = np.random.default_rng(7)
    xs, xt = batch(rng), batch(rng)
    cs, ct = rng.normal(size=(10, 2)), rng.normal(size=(10, 2))
    net = DaNetwork(tiny_config(lambda1=1.0, lambda2=0.0), np.random.default_rng(8))
    total, task, _ = net.total_loss(xs, xt, cs, ct)
    assert total == pytest.approx(task, abs=1e-12)
    grads = [g.copy() for m in (net.encoder, net.head) for g in m.gradients()]
    net.zero_grad()
    net.task_loss(np.concatenate([xs, xt]), np.concatenate([cs, ct]))
    ref = [g for m in (net.encoder, net.head) for g in m.gradients()]
    for a, b in zip(grads, ref):
        assert np.allclose(a, b, atol=1e-12)


def test_total_loss_task_off_equals_da_branch():
    rng = np.random.default_rng(9)
    xs, xt = batch(rng), batch(rng)
    cs, ct = rng.normal(size=(10, 2)), rng.normal(size=(10, 2))
    net = DaNetwork(tiny_config(lambda1=0.0, lambda2=1.0), np.random.default_rng(10))
    total, _, domain = net.total_loss(xs, xt, cs, ct)
    assert total == pytest.approx(domain, abs=1e-12)
    grads = [g.copy() for m in (net.encoder, net.discriminator)
             for g in m.gradients()]
    net.zero_grad()
    net.da_loss(xs, xt)
    ref = [g for m in (net.encoder, net.discriminator) for g in m.gradients()]
    for a, b in zip(grads, ref):
        assert np.allclose(a, b, atol=1e-12)


def test_total_loss_gradients_are_linear_combination():
    rng = np.random.default_rng(11)
    xs, xt = batch(rng), batch(rng)
    cs, ct = rng.normal(size=(10, 2)), rng.normal(size=(10, 2))

    def grads_for(l1, l2):
        net = DaNetwork(tiny_config(lambda1=l1, lambda2=l2),
                        np.random.default_rng(12))
        return total_loss_grads(net, xs, xt, cs, ct)

    g_task = grads_for(1.0, 0.0)
    g_da = grads_for(0.0, 1.0)
    g_avg = grads_for(0.5, 0.5)
    for gt, gd, ga in zip(g_task, g_da, g_avg):
        assert np.allclose(ga, 0.5 * gt + 0.5 * gd, atol=1e-12)


# -- metrics ------------------------------------------------------------------


def test_gsi_separated_clusters():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(100, 4))
    b = rng.normal(size=(100, 4)) + 100.0
    feats = np.concatenate([a, b])
    labels = np.concatenate([np.zeros(100), np.ones(100)])
    assert gsi(feats, labels) == 1.0


def test_gsi_mixed_is_chance():
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(2000, 4))
    labels = (rng.random(2000) < 0.5).astype(float)
    assert abs(gsi(feats, labels) - 0.5) <= 0.05


def test_gsi_alternating_line_is_zero():
    feats = np.array([[0.0], [1.0], [2.0], [3.0]])
    labels = np.array([0.0, 1.0, 0.0, 1.0])
    assert gsi(feats, labels) == 0.0


def test_probe_separable_blobs():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(200, 3))
    b = rng.normal(size=(200, 3)) + 8.0
    feats = np.concatenate([a, b])
    labels = np.concatenate([np.zeros(200), np.ones(200)])
    assert probe_accuracy(feats, labels) >= 0.99


def test_probe_shuffled_five_classes_at_chance():
    rng = np.random.default_rng(3)
    feats = rng.normal(size=(2000, 6))
    labels = rng.integers(0, 5, size=2000).astype(float)
    assert abs(probe_accuracy(feats, labels) - 0.2) <= 0.05


def test_probe_identical_distributions_at_chance():
    rng = np.random.default_rng(4)
    feats = rng.normal(size=(2000, 6))
    labels = (np.arange(2000) % 2).astype(float)
    assert abs(probe_accuracy(feats, labels) - 0.5) <= 0.05


# -- feature dump -------------------------------------------------------------


def test_feature_dump_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    feats = rng.normal(size=(37, 8)).astype(np.float32)
    labels = rng.integers(0, 2, size=37)
    p = tmp_path / "dump.bin"
    write_feature_dump(p, feats, labels)
    f2, l2 = read_feature_dump(p)
    assert np.array_equal(f2, feats)
    assert np.array_equal(l2, labels)


# -- training demo ------------------------------------------------------------


def test_demo_report_shape_and_baseline():
    rng = np.random.default_rng(6)
    net = DaNetwork(demo_config(), rng)
    report = train_da_demo(net, epochs=3, rng=rng, n_train=64, n_eval=64)
    assert len(report.rows) == 4
    assert report.rows[0]["epoch"] == 0
    assert not report.diverged
    for row in report.rows:
        assert set(row) >= {"epoch", "da_loss", "task_loss", "disc_acc",
                            "gsi", "probe_acc"}


def test_two_domain_dataset_shapes():
    xs, xt, cs, ct = make_two_domain_dataset(np.random.default_rng(7), 50)
    assert xs.shape == (50, 16) and xt.shape == (50, 16)
    assert cs.shape == (50, 4) and ct.shape == (50, 4)
    # the style shift must actually separate the domains
    feats = np.concatenate([xs, xt])
    labels = np.concatenate([np.zeros(50), np.ones(50)])
    assert probe_accuracy(feats, labels) >= 0.9
