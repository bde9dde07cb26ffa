import numpy as np
import pytest

from ivdl._accel import mlp_forward
from ivdl.nn import (Adam, CheckpointVersionError, CriticNet,
                     GaussianPolicyNet, MalformedCheckpointError, Mlp,
                     MlpSpec, ShapeMismatchError, estimated_time_us,
                     inference_flops, load_checkpoint, param_count,
                     save_checkpoint)

TEACHER = MlpSpec(6, (128, 64, 64), 2)
S1 = MlpSpec(6, (45, 30, 30), 2)
S2 = MlpSpec(6, (20, 15), 2)


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------


def test_param_counts():
    assert param_count(TEACHER) == 13442
    assert param_count(S1) == 2687
    assert param_count(S2) == 487


def test_inference_flops():
    assert inference_flops(TEACHER) == 26368
    assert inference_flops(S1) == 5160
    assert inference_flops(S2) == 900


def test_estimated_time_us():
    assert estimated_time_us(26368) == pytest.approx(32.96)
    assert estimated_time_us(5160) == pytest.approx(6.45)
    assert estimated_time_us(900) == pytest.approx(1.125)
    assert round(estimated_time_us(26368), 1) == 33.0
    assert round(estimated_time_us(5160), 1) == 6.5
    assert round(estimated_time_us(900), 1) == 1.1


def test_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec(0, (4,), 2)
    with pytest.raises(ValueError):
        MlpSpec(6, (4,), 2, hidden_activation="selu")


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def zeroed(spec):
    net = Mlp(spec)
    for w in net.weights:
        w[:] = 0.0
    for b in net.biases:
        b[:] = 0.0
    return net


def test_forward_zero_net():
    net = zeroed(MlpSpec(3, (5,), 2))
    y, _ = net.forward(np.array([1.0, -2.0, 3.0]))
    np.testing.assert_array_equal(y, [0.0, 0.0])


def test_forward_single_linear_layer_hand_computed():
    net = Mlp(MlpSpec(2, (), 2))
    net.weights[0][:] = [[1.0, 2.0], [3.0, 4.0]]
    net.biases[0][:] = [0.5, -0.5]
    y, _ = net.forward(np.array([1.0, 1.0]))
    np.testing.assert_allclose(y, [1 + 3 + 0.5, 2 + 4 - 0.5])


def _reference_forward(net, x):
    """Straight-line reimplementation used as the duplicate oracle."""
    h = np.asarray(x, dtype=float)
    n = len(net.weights)
    for i in range(n):
        z = h @ net.weights[i] + net.biases[i]
        if i < n - 1:
            if net.spec.hidden_activation == "relu":
                z = np.where(z > 0, z, 0.0)
            else:
                z = np.tanh(z)
        h = z
    return h


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_forward_matches_reference(activation):
    rng = np.random.default_rng(17)
    net = Mlp(MlpSpec(6, (8, 4), 2, hidden_activation=activation), rng)
    for _ in range(10):
        x = rng.normal(size=6)
        y, _ = net.forward(x)
        np.testing.assert_allclose(y, _reference_forward(net, x), atol=1e-15)


def test_forward_dimension_mismatch():
    net = Mlp(MlpSpec(4, (3,), 1))
    with pytest.raises(ValueError):
        net.forward(np.zeros(5))


def finite_difference_grads(net, x, weight_vec, h=1e-5):
    """Central differences of L = y @ weight_vec w.r.t. every parameter."""
    grads = []
    for p in net.parameters():
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + h
            lp = float(net.forward(x)[0] @ weight_vec)
            p[idx] = orig - h
            lm = float(net.forward(x)[0] @ weight_vec)
            p[idx] = orig
            g[idx] = (lp - lm) / (2 * h)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric):
    worst = 0.0
    for ga, gn in zip(analytic, numeric):
        scale = max(np.max(np.abs(gn)), 1e-8)
        worst = max(worst, np.max(np.abs(ga - gn)) / scale)
    return worst


@pytest.mark.parametrize("seed", range(20))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = Mlp(MlpSpec(6, (8, 4), 2), rng)
    x = rng.normal(size=6)
    c = rng.normal(size=2)
    y, cache = net.forward(x)
    grads, _ = net.backward(cache, c)
    numeric = finite_difference_grads(net, x, c)
    assert max_rel_error(grads, numeric) < 1e-4


def test_backward_zero_output_gradient():
    rng = np.random.default_rng(1)
    net = Mlp(MlpSpec(5, (7,), 3), rng)
    _, cache = net.forward(rng.normal(size=5))
    grads, gin = net.backward(cache, np.zeros(3))
    assert all(np.all(g == 0) for g in grads)
    assert np.all(gin == 0)


def test_backward_batch_linearity():
    rng = np.random.default_rng(2)
    net = Mlp(MlpSpec(4, (6,), 2), rng)
    xs = rng.normal(size=(5, 4))
    gs = rng.normal(size=(5, 2))
    _, cache = net.forward(xs)
    batch_grads, _ = net.backward(cache, gs)
    summed = [np.zeros_like(g) for g in batch_grads]
    for i in range(5):
        _, ci = net.forward(xs[i])
        gi, _ = net.backward(ci, gs[i])
        for acc, g in zip(summed, gi):
            acc += g
    for gb, gsum in zip(batch_grads, summed):
        np.testing.assert_allclose(gb, gsum, atol=1e-12)


def test_backward_input_gradient_fd():
    rng = np.random.default_rng(3)
    net = Mlp(MlpSpec(4, (6, 5), 2, hidden_activation="tanh"), rng)
    x = rng.normal(size=4)
    c = rng.normal(size=2)
    _, cache = net.forward(x)
    _, gin = net.backward(cache, c)
    h = 1e-6
    for j in range(4):
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        fd = (net.forward(xp)[0] @ c - net.forward(xm)[0] @ c) / (2 * h)
        assert gin[j] == pytest.approx(fd, rel=1e-5, abs=1e-8)


# ---------------------------------------------------------------------------
# Gaussian policy
# ---------------------------------------------------------------------------


def test_policy_actions_strictly_inside_unit_box():
    rng = np.random.default_rng(8)
    net = GaussianPolicyNet(MlpSpec(6, (16, 8), 2), rng)
    xs = rng.normal(size=(10_000, 6))
    a, logp, *_ = net.sample(xs, rng)
    assert np.all(np.abs(a) < 1.0)
    assert np.all(np.isfinite(logp))


def test_policy_deterministic_is_tanh_mean():
    rng = np.random.default_rng(9)
    net = GaussianPolicyNet(MlpSpec(6, (16, 8), 2), rng)
    x = rng.normal(size=6)
    mu, _, _ = net.forward(x)
    np.testing.assert_allclose(net.deterministic(x), np.tanh(mu))


def test_policy_zero_weights_deterministic_zero():
    net = GaussianPolicyNet(MlpSpec(6, (8,), 2))
    for arr in net.parameters():
        arr[:] = 0.0
    np.testing.assert_array_equal(net.deterministic(np.ones(6)), [0.0, 0.0])


def test_policy_std_positive():
    rng = np.random.default_rng(10)
    net = GaussianPolicyNet(MlpSpec(6, (8,), 2), rng)
    # push the std head raw output very negative: floor must hold
    net.std_b[:] = -50.0
    _, std, _ = net.forward(rng.normal(size=6))
    assert np.all(std >= 1e-6)


def test_policy_log_prob_normalizes_on_1d_slice():
    rng = np.random.default_rng(11)
    net = GaussianPolicyNet(MlpSpec(3, (12, 8), 1), rng)
    x = rng.normal(size=3)
    a = np.linspace(-1 + 1e-9, 1 - 1e-9, 200_001)[:, None]
    xs = np.tile(x, (len(a), 1))
    density = np.exp(net.log_prob(xs, a))
    mass = np.trapezoid(density, a[:, 0])
    assert mass == pytest.approx(1.0, abs=1e-3)


def test_policy_backward_matches_fd():
    rng = np.random.default_rng(12)
    net = GaussianPolicyNet(MlpSpec(4, (6, 5), 2), rng)
    x = rng.normal(size=4)
    cmu = rng.normal(size=2)
    cstd = rng.normal(size=2)

    def loss():
        mu, std, _ = net.forward(x)
        return float(mu @ cmu + std @ cstd)

    _, _, cache = net.forward(x)
    grads = net.backward(cache, cmu, cstd)
    params = net.parameters()
    h = 1e-6
    numeric = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + h
            lp = loss()
            p[idx] = orig - h
            lm = loss()
            p[idx] = orig
            g[idx] = (lp - lm) / (2 * h)
        numeric.append(g)
    assert max_rel_error(grads, numeric) < 1e-4


def test_policy_sampling_deterministic_under_seed():
    spec = MlpSpec(6, (8,), 2)
    net = GaussianPolicyNet(spec, np.random.default_rng(0))
    draws1 = [net.sample(np.ones(6), np.random.default_rng(5))[0] for _ in range(3)]
    draws2 = [net.sample(np.ones(6), np.random.default_rng(5))[0] for _ in range(3)]
    for d1, d2 in zip(draws1, draws2):
        np.testing.assert_array_equal(d1, d2)


# ---------------------------------------------------------------------------
# critic
# ---------------------------------------------------------------------------


def test_critic_scalar_output_shape():
    rng = np.random.default_rng(13)
    critic = CriticNet(6, 2, path_width=16, fusion_hidden=(8, 8), rng=rng)
    q, _ = critic.forward(rng.normal(size=(7, 6)), rng.normal(size=(7, 2)))
    assert q.shape == (7,)


def test_critic_backward_matches_fd():
    rng = np.random.default_rng(14)
    critic = CriticNet(4, 2, path_width=6, fusion_hidden=(5,), rng=rng)
    s = rng.normal(size=(3, 4))
    a = rng.normal(size=(3, 2))
    w = rng.normal(size=3)

    def loss():
        q, _ = critic.forward(s, a)
        return float(q @ w)

    q, cache = critic.forward(s, a)
    grads, ds, da = critic.backward(cache, w)
    params = critic.parameters()
    h = 1e-6
    numeric = []
    for pm in params:
        g = np.zeros_like(pm)
        it = np.nditer(pm, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = pm[idx]
            pm[idx] = orig + h
            lp = loss()
            pm[idx] = orig - h
            lm = loss()
            pm[idx] = orig
            g[idx] = (lp - lm) / (2 * h)
        numeric.append(g)
    assert max_rel_error(grads, numeric) < 1e-4
    # input gradients, same loss
    for arr, garr in ((s, ds), (a, da)):
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            lp = loss()
            arr[idx] = orig - h
            lm = loss()
            arr[idx] = orig
            fd = (lp - lm) / (2 * h)
            assert garr[idx] == pytest.approx(fd, rel=1e-4, abs=1e-7)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_zero_gradient_is_noop():
    rng = np.random.default_rng(15)
    params = [rng.normal(size=(3, 2)), rng.normal(size=2)]
    before = [p.copy() for p in params]
    opt = Adam(params, lr=1e-2)
    for _ in range(5):
        opt.step(params, [np.zeros_like(p) for p in params])
    for p, b in zip(params, before):
        np.testing.assert_array_equal(p, b)


def test_adam_minimizes_quadratic():
    params = [np.array([5.0, -3.0])]
    opt = Adam(params, lr=0.1)
    for _ in range(500):
        opt.step(params, [2.0 * params[0]])
    assert np.linalg.norm(params[0]) < 1e-3


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_f64_roundtrip_bit_identical(tmp_path):
    rng = np.random.default_rng(16)
    net = Mlp(S2, rng)
    path = tmp_path / "s2.ckpt"
    save_checkpoint(net, path, dtype="f64")
    loaded = load_checkpoint(path)
    for a, b in zip(net.parameters(), loaded.parameters()):
        np.testing.assert_array_equal(a, b)


def test_checkpoint_default_f32_roundtrip(tmp_path):
    rng = np.random.default_rng(17)
    net = Mlp(S2, rng)
    path = tmp_path / "s2.ckpt"
    save_checkpoint(net, path)
    loaded = load_checkpoint(path)
    for a, b in zip(net.parameters(), loaded.parameters()):
        np.testing.assert_array_equal(a.astype(np.float32).astype(np.float64), b)
    # file-level round trip is bit exact
    save_checkpoint(loaded, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_policy_roundtrip(tmp_path):
    rng = np.random.default_rng(18)
    net = GaussianPolicyNet(TEACHER, rng)
    path = tmp_path / "teacher.ckpt"
    save_checkpoint(net, path, dtype="f64")
    loaded = load_checkpoint(path)
    assert isinstance(loaded, GaussianPolicyNet)
    assert loaded.spec == TEACHER
    for a, b in zip(net.parameters(), loaded.parameters()):
        np.testing.assert_array_equal(a, b)


def test_checkpoint_truncated_file(tmp_path):
    net = Mlp(S2, np.random.default_rng(19))
    path = tmp_path / "s2.ckpt"
    save_checkpoint(net, path)
    blob = path.read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(blob[: len(blob) // 2])
    with pytest.raises(MalformedCheckpointError):
        load_checkpoint(tmp_path / "cut.ckpt")


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(MalformedCheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_checkpoint_version_mismatch(tmp_path):
    net = Mlp(S2, np.random.default_rng(20))
    path = tmp_path / "s2.ckpt"
    save_checkpoint(net, path)
    blob = bytearray(path.read_bytes())
    blob[4:6] = (99).to_bytes(2, "little")
    (tmp_path / "vers.ckpt").write_bytes(bytes(blob))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "vers.ckpt")


def test_checkpoint_spec_guard(tmp_path):
    net = Mlp(S2, np.random.default_rng(21))
    path = tmp_path / "s2.ckpt"
    save_checkpoint(net, path)
    loaded = load_checkpoint(path, expect_spec=S2)
    assert loaded.spec == S2
    with pytest.raises(ShapeMismatchError):
        load_checkpoint(path, expect_spec=S1)


def test_checkpoint_magic_bytes(tmp_path):
    net = Mlp(S2, np.random.default_rng(22))
    path = tmp_path / "s2.ckpt"
    save_checkpoint(net, path)
    assert path.read_bytes()[:4] == b"IVDL"


# ---------------------------------------------------------------------------
# packed kernel parity
# ---------------------------------------------------------------------------


def test_packed_mlp_matches_forward():
    rng = np.random.default_rng(23)
    net = Mlp(MlpSpec(6, (20, 15), 2), rng)
    flat, dims = net.packed()
    for _ in range(20):
        x = rng.normal(size=6)
        np.testing.assert_allclose(mlp_forward(flat, dims, x, 0),
                                   net.forward(x)[0], atol=1e-12)


def test_packed_policy_mean_matches_forward():
    rng = np.random.default_rng(24)
    net = GaussianPolicyNet(MlpSpec(6, (16, 8), 2), rng)
    flat, dims = net.packed_mean()
    for _ in range(20):
        x = rng.normal(size=6)
        mu, _, _ = net.forward(x)
        np.testing.assert_allclose(mlp_forward(flat, dims, x, 0), mu, atol=1e-12)
