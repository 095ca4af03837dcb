import numpy as np
import pytest

from wmunlearn.core import (
    BatchNormState,
    Graph,
    OptimizerState,
    Tensor,
    batch_norm_apply,
    conv2d,
    cross_entropy,
    evaluate,
    gradients,
    kl_divergence,
    kl_to_target,
    log_softmax,
    max_pool2d,
    optimizer_step,
    unbroadcast,
)
from wmunlearn.core.gradcheck import check_gradients
from wmunlearn.errors import DistributionError, GraphError, LabelError, NonFiniteError, ShapeError

TOL = 1e-5


def _graph(build, params, inputs, wrt=()):
    return Graph(build, params, {k: v.shape for k, v in inputs.items()}, wrt_inputs=wrt)


class TestTensor:
    def test_unbroadcast_sums_expanded_axes(self):
        g = np.ones((4, 3))
        assert unbroadcast(g, (3,)).tolist() == [4.0, 4.0, 4.0]
        assert unbroadcast(g, (1, 3)).shape == (1, 3)

    def test_backward_on_shared_subexpression(self):
        x = Tensor(np.array([2.0, -1.0]), requires_grad=True)
        y = x * x + x
        y.sum().backward()
        np.testing.assert_allclose(x.grad, 2 * x.data + 1)

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError):
            (x * 2).backward()

    def test_broadcast_mismatch_names_node(self):
        with pytest.raises(ShapeError) as err:
            Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))
        assert err.value.node == "add"

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


class TestGraph:
    def test_gradients_before_evaluate(self):
        g = Graph(lambda p, i: {"loss": (p["w"] * i["x"]).sum()}, {"w": np.ones(2)}, {"x": (2,)})
        with pytest.raises(GraphError):
            gradients(g)

    def test_missing_loss_node(self):
        g = Graph(lambda p, i: {"out": p["w"] * 1.0}, {"w": np.ones(2)}, {})
        with pytest.raises(GraphError):
            evaluate(g, {})

    def test_nonscalar_loss(self):
        g = Graph(lambda p, i: {"loss": p["w"] * 2.0}, {"w": np.ones(2)}, {})
        evaluate(g, {})
        with pytest.raises(GraphError):
            gradients(g)

    def test_input_shape_checked(self):
        g = Graph(lambda p, i: {"loss": (p["w"] * i["x"]).sum()}, {"w": np.ones(2)}, {"x": (2,)})
        with pytest.raises(ShapeError):
            evaluate(g, {"x": np.ones(3)})

    def test_names_must_be_disjoint(self):
        with pytest.raises(GraphError):
            Graph(lambda p, i: {}, {"x": np.ones(1)}, {"x": (1,)})

    def test_linear_gradient_exact(self):
        x = np.array([1.0, 2.0, 3.0])
        g = Graph(lambda p, i: {"loss": (p["w"] * i["x"]).sum()}, {"w": np.zeros(3)}, {"x": (3,)}, wrt_inputs=("x",))
        evaluate(g, {"x": x})
        grads = gradients(g)
        np.testing.assert_allclose(grads["w"], x)
        np.testing.assert_allclose(grads["x"], np.zeros(3))


ORACLE_TOL = 1e-4


def _random_graph(seed):
    """A small random composition of conv, pool, batch norm, dense layers and one loss."""
    rng = np.random.default_rng(seed)
    n, classes = 3, 3
    use_conv = bool(rng.random() < 0.5)
    params = {}
    if use_conv:
        x = rng.standard_normal((n, 1, 4, 4))
        channels, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        params["k"] = rng.standard_normal((channels, 1, 3, 3)) * 0.5
        params["kb"] = rng.standard_normal(channels) * 0.1
        side = 2 + 2 * padding
        pool = bool(rng.random() < 0.5)
        side = side // 2 if pool else side
        conv_bn = bool(rng.random() < 0.5)
        if conv_bn:
            params["cg"], params["cb"] = rng.uniform(0.5, 1.5, channels), rng.standard_normal(channels)
        width = channels * side * side
    else:
        x = rng.standard_normal((n, 5))
        width = 5
    hidden = int(rng.integers(2, 5))
    params["w1"] = rng.standard_normal((width, hidden)) / np.sqrt(width)
    params["b1"] = rng.standard_normal(hidden) * 0.1
    dense_bn = bool(rng.random() < 0.5)
    if dense_bn:
        params["g1"], params["be1"] = rng.uniform(0.5, 1.5, hidden), rng.standard_normal(hidden)
    params["w2"] = rng.standard_normal((hidden, classes)) / np.sqrt(hidden)
    params["b2"] = rng.standard_normal(classes) * 0.1
    acts = [str(a) for a in rng.choice(["tanh", "relu"], size=2)]
    loss_kind = str(rng.choice(["ce", "target_pred", "pred_target", "log_softmax"]))
    labels = rng.integers(0, classes, n)
    target = rng.dirichlet(np.ones(classes), size=n)
    weights = rng.standard_normal((n, classes))

    def act(t, kind):
        return t.tanh() if kind == "tanh" else t.relu()

    def build(p, i):
        h = i["x"]
        if use_conv:
            h = act(conv2d(h, p["k"], p["kb"], padding=padding), acts[0])
            if pool:
                h = max_pool2d(h)
            if conv_bn:
                h, _ = batch_norm_apply(h, BatchNormState.fresh(channels), "train", p["cg"], p["cb"])
            h = h.reshape(n, -1)
        h = h @ p["w1"] + p["b1"]
        if dense_bn:
            h, _ = batch_norm_apply(h, BatchNormState.fresh(hidden), "train", p["g1"], p["be1"])
        logits = act(h, acts[1]) @ p["w2"] + p["b2"]
        if loss_kind == "ce":
            loss = cross_entropy(logits, labels)
        elif loss_kind == "log_softmax":
            loss = (log_softmax(logits) * weights).mean()
        else:
            loss = kl_to_target(logits, target, loss_kind).mean()
        return {"loss": loss}

    return _graph(build, params, {"x": x}, wrt=("x",)), x


class TestGradCheck:
    @pytest.mark.parametrize("seed", range(100))
    def test_random_graph(self, seed):
        graph, x = _random_graph(seed)
        result = check_gradients(graph, {"x": x})
        assert result.checked > 0
        assert result.max_rel_error < ORACLE_TOL, result.worst

    def test_dense_cross_entropy(self, rng):
        x = rng.standard_normal((5, 4))
        labels = np.array([0, 1, 2, 1, 0])

        def build(p, i):
            logits = (i["x"] @ p["w"] + p["b"]).tanh()
            return {"loss": cross_entropy(logits, labels)}

        g = _graph(build, {"w": rng.standard_normal((4, 3)), "b": rng.standard_normal(3)}, {"x": x}, wrt=("x",))
        assert check_gradients(g, {"x": x}).max_rel_error < TOL

    def test_conv_pool(self, rng):
        x = rng.standard_normal((2, 2, 6, 6))

        def build(p, i):
            h = max_pool2d(conv2d(i["x"], p["k"], p["b"], padding=1).relu())
            return {"loss": (h * h).mean()}

        g = _graph(build, {"k": rng.standard_normal((3, 2, 3, 3)), "b": rng.standard_normal(3)}, {"x": x}, wrt=("x",))
        assert check_gradients(g, {"x": x}).max_rel_error < TOL

    def test_batch_norm_train_mode(self, rng):
        x = rng.standard_normal((6, 3))

        def build(p, i):
            state = BatchNormState.fresh(3)
            y, (mean, var) = batch_norm_apply(i["x"], state, "train", p["gamma"], p["beta"])
            return {"loss": (y * y * y).mean() + (mean * mean).sum() + var.sum()}

        params = {"gamma": rng.uniform(0.5, 1.5, 3), "beta": rng.standard_normal(3)}
        g = _graph(build, params, {"x": x}, wrt=("x",))
        assert check_gradients(g, {"x": x}).max_rel_error < TOL

    def test_kl_to_target_both_conventions(self, rng):
        target = np.full((3, 4), 0.25)
        for convention in ("target_pred", "pred_target"):
            def build(p, i, convention=convention):
                return {"loss": kl_to_target(p["z"], target, convention).mean()}

            g = Graph(build, {"z": rng.standard_normal((3, 4))}, {})
            assert check_gradients(g, {}).max_rel_error < TOL


class TestFunctional:
    def test_conv2d_known_values(self):
        x = np.arange(9, dtype=float).reshape(1, 1, 3, 3)
        k = np.ones((1, 1, 2, 2))
        out = conv2d(Tensor(x), Tensor(k)).data
        assert out[0, 0].tolist() == [[8.0, 12.0], [20.0, 24.0]]

    def test_conv2d_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 2, 2))))

    def test_max_pool_drops_odd_edge(self):
        x = np.arange(25, dtype=float).reshape(1, 1, 5, 5)
        out = max_pool2d(Tensor(x)).data
        assert out[0, 0].tolist() == [[6.0, 8.0], [16.0, 18.0]]

    def test_batch_norm_eval_uses_running_stats(self):
        state = BatchNormState(np.ones(2), np.zeros(2), np.array([1.0, -1.0]), np.array([4.0, 1.0]))
        y, _ = batch_norm_apply(Tensor(np.array([[3.0, 0.0]])), state, "eval")
        np.testing.assert_allclose(y.data, [[2.0 / np.sqrt(4.0 + 1e-5), 1.0 / np.sqrt(1.0 + 1e-5)]])

    def test_batch_norm_train_updates_running_stats(self):
        state = BatchNormState.fresh(1, momentum=0.5)
        batch_norm_apply(Tensor(np.array([[1.0], [3.0]])), state, "train")
        np.testing.assert_allclose(state.running_mean, [1.0])
        np.testing.assert_allclose(state.running_var, [1.0])

    def test_batch_norm_train_rejects_single_sample(self):
        with pytest.raises(ShapeError):
            batch_norm_apply(Tensor(np.ones((1, 2))), BatchNormState.fresh(2), "train")

    def test_batch_norm_state_validation(self):
        with pytest.raises(ValueError):
            BatchNormState(np.ones(2), np.zeros(2), np.zeros(2), np.zeros(2))

    def test_log_softmax_stable_for_large_logits(self):
        out = log_softmax(Tensor(np.array([[1000.0, 0.0]]))).data
        assert np.all(np.isfinite(out))
        assert out[0, 0] == pytest.approx(0.0)

    def test_cross_entropy_uniform_logits(self):
        loss = cross_entropy(np.zeros((2, 4)), [0, 3])
        assert loss.item() == pytest.approx(np.log(4))

    def test_cross_entropy_label_out_of_range(self):
        with pytest.raises(LabelError):
            cross_entropy(np.zeros((1, 3)), [3])

    def test_kl_identity_is_zero(self):
        p = np.array([0.2, 0.3, 0.5])
        assert kl_divergence(p, p) == pytest.approx(0.0)

    def test_kl_uniform_target(self):
        pred = np.array([0.9, 0.1])
        uniform = np.array([0.5, 0.5])
        assert kl_divergence(pred, uniform, "target_pred") == pytest.approx(0.510826, abs=1e-6)
        assert kl_divergence(pred, uniform, "pred_target") == pytest.approx(0.368064, abs=1e-6)

    def test_kl_rejects_bad_distributions(self):
        with pytest.raises(DistributionError):
            kl_divergence(np.array([0.5, 0.6]), np.array([0.5, 0.5]))
        with pytest.raises(DistributionError):
            kl_divergence(np.array([1.0, 0.0]), np.array([0.5, 0.5]))


class TestOptim:
    def test_sgd_step(self):
        params = {"w": np.array([1.0, 2.0])}
        optimizer_step(OptimizerState("sgd", lr=0.5), params, {"w": np.array([2.0, -2.0])})
        np.testing.assert_allclose(params["w"], [0.0, 3.0])

    def test_adam_first_step_moves_by_lr(self):
        params = {"w": np.array([0.0])}
        state = OptimizerState("adam", lr=0.1)
        optimizer_step(state, params, {"w": np.array([3.0])})
        assert state.step == 1
        np.testing.assert_allclose(params["w"], [-0.1], rtol=1e-6)

    def test_non_finite_gradient_leaves_params_untouched(self):
        params = {"a": np.array([1.0]), "b": np.array([1.0])}
        with pytest.raises(NonFiniteError) as err:
            optimizer_step(OptimizerState(), params, {"a": np.array([1.0]), "b": np.array([np.nan])})
        assert err.value.name == "b"
        assert params["a"][0] == 1.0

    def test_rejects_bad_state(self):
        with pytest.raises(ValueError):
            OptimizerState("rmsprop")
        with pytest.raises(ValueError):
            OptimizerState(lr=0.0)
