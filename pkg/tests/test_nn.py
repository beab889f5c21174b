import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import numeric_grad, rel_error
from pcnet.exceptions import CheckpointError, DimensionError, NumericalError
from pcnet.nn import (
    SGD,
    Activation,
    Adam,
    Add,
    BatchNorm,
    Conv2D,
    Dense,
    Flatten,
    GlobalAvgPool,
    MaxPool2,
    Network,
    PcaConv2D,
    PcaDense,
    StepSchedule,
    backward_and_step,
    build_network,
    capture_activations,
    count_params,
    init_params,
    load_checkpoint,
    save_checkpoint,
    softmax,
    softmax_cross_entropy,
    train_step,
)
from pcnet.nn.checkpoint import checkpoint_bytes, crc64, parse_checkpoint


def orthonormal(rng, m, k):
    q, _ = np.linalg.qr(rng.normal(size=(m, m)))
    return q[:, :k]


def randomize(net, rng, scale=0.5):
    for layer in net.layers:
        for v in layer.params.values():
            v[...] = rng.normal(scale=scale, size=v.shape)
    return net


def check_gradients(net, x, rng, tol=1e-4, samples_per_tensor=12):
    """Compare backprop with central differences for a random linear functional of the logits."""
    probe = rng.normal(size=net(x).shape)

    def loss():
        return float(np.sum(net.forward(x, training=True).logits * probe))

    cache = net.forward(x, training=True)
    grads = net.backward(cache, probe)
    checked = 0
    for key, p in net.parameters().items():
        flat = p.reshape(-1)
        picks = rng.choice(flat.size, size=min(samples_per_tensor, flat.size), replace=False)
        for i in picks:
            old = flat[i]
            flat[i] = old + 1e-5
            up = loss()
            flat[i] = old - 1e-5
            down = loss()
            flat[i] = old
            fd = (up - down) / 2e-5
            an = grads[key].reshape(-1)[i]
            assert abs(fd - an) <= tol * max(abs(fd), abs(an), 1e-3), (key, i, fd, an)
            checked += 1
    return checked


class TestForward:
    def test_dense_identity_logits_equal_input(self, rng):
        layer = Dense("d", 4, 4, dtype=np.float64)
        layer.params["W"][...] = np.eye(4)
        net = Network([layer], (4,))
        x = rng.normal(size=(5, 4))
        np.testing.assert_array_equal(net(x), x)

    def test_conv4_shapes(self, rng):
        net = build_network("conv4")
        assert net.shapes["flatten"] == (8192,)
        assert net(rng.normal(size=(2, 32, 32, 3)).astype(np.float32)).shape == (2, 10)

    def test_shape_error_names_layer(self):
        with pytest.raises(DimensionError, match="fc"):
            Network([Flatten("f"), Dense("fc", 5, 3)], (2, 2))

    def test_batch_shape_checked(self):
        net = build_network("mlp", hidden=8)
        with pytest.raises(DimensionError, match="expects"):
            net(np.zeros((2, 27, 28, 1), np.float32))

    def test_pca_dense_full_basis_matches_dense(self, rng):
        m, n = 6, 4
        W, b = rng.normal(size=(m, n)), rng.normal(size=n)
        mu, U = rng.normal(size=m), orthonormal(rng, m, m)
        dense = Dense("d", m, n, "relu", dtype=np.float64)
        dense.params["W"][...], dense.params["b"][...] = W, b
        pca = PcaDense("d", mu, U, U.T @ W, b + mu @ W, "relu")
        x = rng.normal(size=(64, m))
        y0, _ = dense.forward(x)
        y1, _ = pca.forward(x)
        np.testing.assert_allclose(y1, y0, atol=1e-10)

    def test_pca_conv_pad_values(self, rng):
        mu, U = rng.normal(size=3), orthonormal(rng, 3, 2)
        layer = PcaConv2D("c", mu, U, rng.normal(size=(3, 3, 2, 4)), np.zeros(4))
        np.testing.assert_array_equal(layer.pad_values(), -(mu @ U))
        assert layer.pad_values().shape == (2,)

    def test_softmax_rows_sum_to_one(self, rng):
        p = softmax(rng.normal(scale=30, size=(20, 10)))
        np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)

    def test_residual_add_sums_members(self, rng):
        a = Dense("a", 3, 3, dtype=np.float64, inputs=("input",))
        b = Dense("b", 3, 3, dtype=np.float64, inputs=("input",))
        net = randomize(Network([a, b, Add("sum", inputs=("a", "b"))], (3,)), rng)
        x = rng.normal(size=(4, 3))
        expected = x @ a.params["W"] + a.params["b"] + x @ b.params["W"] + b.params["b"]
        np.testing.assert_allclose(net(x), expected, atol=1e-13)


def _toy_nets():
    f64 = np.float64
    mlp = Network([Flatten("f"), Dense("h1", 12, 7, "sigmoid", dtype=f64), Dense("h2", 7, 5, "relu", dtype=f64),
                   Dense("out", 5, 3, "none", dtype=f64)], (3, 2, 2))
    conv = Network([Conv2D("c1", 2, 3, 3, activation="relu", dtype=f64), MaxPool2("p"),
                    Conv2D("c2", 3, 4, (2, 3), stride=2, dtype=f64), BatchNorm("bn", 4, dtype=f64),
                    Activation("r", "relu"), GlobalAvgPool("g"), Dense("out", 4, 3, dtype=f64)], (6, 6, 2))
    return {"mlp": mlp, "conv": conv}


def _pca_net(rng):
    f64 = np.float64
    mu1, U1 = rng.normal(size=2), orthonormal(rng, 2, 2)
    mu2, U2 = rng.normal(size=3), orthonormal(rng, 3, 2)
    mu3, U3 = rng.normal(size=12), orthonormal(rng, 12, 5)
    return Network([
        PcaConv2D("pc1", mu1, U1, rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3), activation="relu"),
        PcaConv2D("pc2", mu2, U2, rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3), stride=2),
        BatchNorm("bn", 3, dtype=f64), Activation("r", "sigmoid"), Flatten("f"),
        PcaDense("pd", mu3, U3, rng.normal(size=(5, 3)), rng.normal(size=3)),
    ], (4, 4, 2))


class TestGradients:
    @pytest.mark.parametrize("name", ["mlp", "conv"])
    def test_param_gradients(self, rng, name):
        net = randomize(_toy_nets()[name], rng)
        x = rng.normal(size=(5, *net.input_shape))
        assert check_gradients(net, x, rng) > 0

    def test_pca_layers_with_nonzero_padding(self, rng):
        net = _pca_net(rng)
        assert np.any(net["pc1"].pad_values() != 0)
        check_gradients(net, rng.normal(size=(3, 4, 4, 2)), rng)

    def test_residual_group(self, rng):
        net = build_network("thinresnet8", dtype=np.float64, input_shape=(8, 8, 3))
        randomize(net, rng, scale=0.3)
        check_gradients(net, rng.normal(size=(4, 8, 8, 3)), rng, samples_per_tensor=3)

    def test_input_gradient(self, rng):
        net = _pca_net(rng)
        net.layers[0].inputs = ("shifted",)
        wrapped = Network([Activation("shifted", "none", inputs=("input",))] + net.layers, net.input_shape)
        x = rng.normal(size=(2, 4, 4, 2))
        probe = rng.normal(size=(2, 3))
        cache = wrapped.forward(x, training=True)
        dx = _backprop_to(wrapped, cache, probe, "shifted")
        fd = numeric_grad(lambda: float(np.sum(wrapped.forward(x, training=True).logits * probe)), x)
        assert rel_error(dx, fd) < 1e-4

    def test_sgd_scalar_step(self):
        w = np.array([0.0])
        SGD(lr=1.0).step({("m", "w"): w}, {("m", "w"): w - 3})
        assert w.tolist() == [3.0]

    def test_labels_out_of_range(self):
        with pytest.raises(ValueError, match="labels"):
            softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))

    def test_cross_entropy_gradient(self, rng):
        z = rng.normal(size=(4, 5))
        y = np.array([0, 4, 2, 2])
        _, g = softmax_cross_entropy(z, y)
        fd = numeric_grad(lambda: softmax_cross_entropy(z, y)[0], z)
        assert rel_error(g, fd) < 1e-6

    def test_non_finite_gradient_aborts_with_layer(self):
        net = Network([Dense("bad", 2, 2, dtype=np.float64)], (2,))
        cache = net.forward(np.ones((1, 2)), training=True)
        with pytest.raises(NumericalError, match="bad"):
            net.backward(cache, np.array([[np.nan, 0.0]]))

    def test_non_finite_loss_aborts(self):
        net = Network([Dense("bad", 2, 2, dtype=np.float64)], (2,))
        net["bad"].params["b"][...] = np.nan
        cache = net.forward(np.ones((1, 2)), training=True)
        with pytest.raises(NumericalError, match="loss"):
            backward_and_step(net, cache, np.array([0]), SGD(0.1))


def _backprop_to(net, cache, dlogits, target):
    """Gradient w.r.t. the output of ``target`` (replays the network's reverse pass)."""
    pending = {net.layers[-1].name: dlogits}
    for layer in reversed(net.layers):
        dy = pending.pop(layer.name, None)
        if layer.name == target:
            return dy
        if dy is None:
            continue
        dxs, _ = layer.backward(dy, cache.caches[layer.name])
        for inp, dx in zip(layer.inputs, dxs):
            pending[inp] = pending[inp] + dx if inp in pending else dx
    raise KeyError(target)


class TestTraining:
    def test_zero_lr_leaves_params_bitwise(self, rng):
        for opt in (SGD(0.0, momentum=0.9), Adam(0.0)):
            net = build_network("thinresnet8", input_shape=(8, 8, 3))
            before = {k: v.copy() for k, v in net.parameters().items()}
            x = rng.normal(size=(4, 8, 8, 3)).astype(np.float32)
            train_step(net, x, np.array([0, 1, 2, 3]), opt)
            for k, v in net.parameters().items():
                assert v.tobytes() == before[k].tobytes(), k

    def test_pca_buffers_frozen(self, rng):
        net = _pca_net(rng)
        frozen = {(l.name, k): v.copy() for l in net.layers for k, v in l.buffers.items() if k in ("mu", "U")}
        pads = {l.name: l.pad_values().copy() for l in net.layers if isinstance(l, PcaConv2D)}
        opt = Adam(0.05)
        for _ in range(5):
            train_step(net, rng.normal(size=(6, 4, 4, 2)), rng.integers(0, 3, 6), opt, l2=1e-3)
        for (name, key), v in frozen.items():
            assert net[name].buffers[key].tobytes() == v.tobytes()
        for name, v in pads.items():
            assert net[name].pad_values().tobytes() == v.tobytes()
        assert all(k[1] not in ("mu", "U") for k in net.parameters())

    def test_l2_skips_batchnorm(self, rng):
        net = Network([Flatten("f"), Dense("d", 4, 3, dtype=np.float64), BatchNorm("bn", 3, dtype=np.float64)],
                      (2, 2))
        assert set(net.weight_parameters()) == {("d", "W")}

    def test_sgd_momentum_oracle(self):
        p = np.array([1.0])
        opt = SGD(0.1, momentum=0.9)
        velocity, expected = 0.0, 1.0
        for g in (1.0, -2.0, 0.5):
            opt.step({("a", "w"): p}, {("a", "w"): np.array([g])})
            velocity = 0.9 * velocity - 0.1 * g
            expected += velocity
        assert p[0] == pytest.approx(expected, abs=1e-15)

    def test_adam_oracle(self):
        p = np.array([0.5])
        opt = Adam(0.01)
        m = v = 0.0
        expected = 0.5
        for t, g in enumerate((0.3, -0.1, 0.7), start=1):
            opt.step({("a", "w"): p}, {("a", "w"): np.array([g])})
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            expected -= 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-7 / np.sqrt(1 - 0.999**t))
        assert p[0] == pytest.approx(expected, rel=1e-12)

    def test_reset_drops_only_named_layers(self):
        opt = SGD(0.1, momentum=0.9)
        opt.step({("a", "w"): np.ones(1), ("b", "w"): np.ones(1)}, {("a", "w"): np.ones(1), ("b", "w"): np.ones(1)})
        opt.reset(["a"])
        assert list(opt.state) == [("b", "w")]

    def test_step_schedule(self):
        s = StepSchedule(0.1, [2, 4], 0.1, warmup_lr=0.01, warmup_epochs=1)
        assert [round(s(e), 6) for e in range(6)] == [0.01, 0.1, 0.01, 0.01, 0.001, 0.001]

    def test_batchnorm_running_stats_and_inference(self, rng):
        bn = BatchNorm("bn", 2, momentum=0.5, dtype=np.float64)
        x = rng.normal(loc=3.0, size=(50, 2))
        bn.forward(x, training=True)
        np.testing.assert_allclose(bn.buffers["moving_mean"], 0.5 * x.mean(axis=0))
        np.testing.assert_allclose(bn.buffers["moving_var"], 0.5 + 0.5 * x.var(axis=0))
        y, _ = bn.forward(x, training=False)
        np.testing.assert_allclose(y, (x - bn.buffers["moving_mean"]) / np.sqrt(bn.buffers["moving_var"] + 1e-5))

    def test_training_reduces_loss(self, rng):
        net = build_network("mlp", hidden=16, input_shape=(4,), dtype=np.float64)
        x = rng.normal(size=(64, 4))
        y = (x[:, 0] > 0).astype(int)
        opt = Adam(0.05)
        first = train_step(net, x, y, opt)[0]
        for _ in range(50):
            last = train_step(net, x, y, opt)[0]
        assert last < first / 2


class TestCountsAndStructure:
    def test_reference_counts(self):
        assert tuple(count_params(build_network("conv4", seed=None))) == (2_425_930, 2_425_930)
        assert tuple(count_params(build_network("wideresnet20", seed=None))) == (4_331_978, 4_338_378)

    def test_pca_buffers_count_as_frozen(self, rng):
        net = Network([PcaDense("d", np.zeros(5), orthonormal(rng, 5, 2), np.zeros((2, 3)), np.zeros(3))], (5,))
        assert tuple(count_params(net)) == (9, 9 + 5 + 10)

    def test_residual_groups(self):
        net = build_network("thinresnet8", seed=None)
        groups = net.residual_groups()
        assert [g.producers for g in groups] == [["s1b1_conv2", "s1b1_proj"], ["s2b1_conv2", "s2b1_proj"],
                                                 ["s3b1_conv2", "s3b1_proj"]]
        assert [g.projection for g in groups] == ["s1b1_proj", "s2b1_proj", "s3b1_proj"]
        for g in groups:
            assert all(isinstance(net[p], Conv2D) for p in g.producers)

    def test_resnet20_groups_span_stage(self):
        groups = build_network("resnet20", seed=None).residual_groups()
        assert len(groups) == 3
        assert len(groups[0].producers) == 4  # three block outputs plus the projection

    def test_init_is_seeded(self):
        a = build_network("conv4-small", seed=3)
        b = init_params(build_network("conv4-small", seed=None), 3)
        for k, v in a.parameters().items():
            assert v.tobytes() == b.parameters()[k].tobytes()


class TestCapture:
    def test_identity_network_returns_batch(self, rng):
        net = Network([Activation("id", "none")], (3,))
        x = rng.normal(size=(10, 3)).astype(np.float32)
        np.testing.assert_array_equal(capture_activations(net, x, ["id"])["id"], x)

    def test_conv4_fc1_width(self, rng):
        net = build_network("conv4-small")
        x = rng.normal(size=(3, 32, 32, 3)).astype(np.float32)
        got = capture_activations(net, x, ["fc1", "conv2"])
        assert got["fc1"].shape == (3, 4096)
        assert got["conv2"].shape == (3, 32, 32, 32)
        assert build_network("conv4", seed=None).shapes["flatten"] == (8192,)

    def test_identity_pointwise_conv_passes_through(self, rng):
        conv = Conv2D("c", 2, 2, 1, dtype=np.float64)
        conv.params["W"][0, 0] = np.eye(2)
        net = Network([conv, Flatten("f"), Dense("d", 18, 2, dtype=np.float64)], (3, 3, 2))
        x = rng.normal(size=(4, 3, 3, 2))
        got = capture_activations(net, x, ["c", "f"])
        np.testing.assert_array_equal(got["f"], got["c"])

    def test_max_samples_and_minimum(self, rng):
        net = Network([Activation("id", "none")], (3,))
        assert len(capture_activations(net, rng.normal(size=(10, 3)), ["id"], max_samples=7)["id"]) == 7
        with pytest.raises(DimensionError):
            capture_activations(net, rng.normal(size=(1, 3)), ["id"])


class TestCheckpoint:
    def test_crc64_check_value(self):
        assert crc64(b"123456789") == 0x995DC9BBDF1939FA

    def test_roundtrip_bitwise(self, tmp_path, rng):
        net = _pca_net(rng)
        opt = Adam(0.01)
        train_step(net, rng.normal(size=(3, 4, 4, 2)), np.array([0, 1, 2]), opt)
        path = save_checkpoint(net, tmp_path / "n.pcnc", opt, epoch=4, rng_state={"seed": 1}, metadata={"k": "v"})
        ck = load_checkpoint(path)
        x = rng.normal(size=(5, 4, 4, 2))
        assert ck.network(x).tobytes() == net(x).tobytes()
        assert ck.epoch == 4 and ck.metadata == {"k": "v"} and ck.rng_state == {"seed": 1}
        assert isinstance(ck.network["pd"], PcaDense)
        assert checkpoint_bytes(ck.network, ck.optimizer, ck.epoch, ck.rng_state, ck.metadata) == path.read_bytes()

    def test_frozen_basis_survives_reload_and_training(self, tmp_path, rng):
        net = _pca_net(rng)
        ck = load_checkpoint(save_checkpoint(net, tmp_path / "n.pcnc"))
        U = ck.network["pc2"].buffers["U"].copy()
        train_step(ck.network, rng.normal(size=(3, 4, 4, 2)), np.array([0, 1, 2]), SGD(0.1))
        assert ck.network["pc2"].buffers["U"].tobytes() == U.tobytes()

    def test_corrupt_byte_rejected(self, tmp_path, rng):
        data = bytearray(checkpoint_bytes(build_network("mlp", hidden=4)))
        data[len(data) // 2] ^= 0x40
        with pytest.raises(CheckpointError, match="checksum"):
            parse_checkpoint(bytes(data))

    @pytest.mark.parametrize("cut", [3, 17, 100])
    def test_truncated_rejected(self, cut):
        data = checkpoint_bytes(build_network("mlp", hidden=4))
        with pytest.raises(CheckpointError):
            parse_checkpoint(data[:cut])

    def test_version_mismatch(self):
        import struct

        from pcnet.nn.checkpoint import MAGIC

        data = bytearray(checkpoint_bytes(build_network("mlp", hidden=4)))
        data[4:6] = struct.pack("<H", 99)
        payload = bytes(data[:-8])
        data[-8:] = struct.pack("<Q", crc64(payload))
        assert bytes(data[:4]) == MAGIC
        with pytest.raises(CheckpointError, match="version"):
            parse_checkpoint(bytes(data))

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "none.pcnc")

    @given(seed=st.integers(0, 1000))
    def test_save_load_save_identical(self, seed):
        net = build_network("thinresnet8", seed=seed, input_shape=(8, 8, 3))
        data = checkpoint_bytes(net, SGD(0.1, 0.9), epoch=seed)
        ck = parse_checkpoint(data)
        assert checkpoint_bytes(ck.network, ck.optimizer, ck.epoch, ck.rng_state, ck.metadata) == data
