import numpy as np
import pytest

from hila import autograd as ag
from hila import tensor as tk
from hila.autograd import AdamWState, adamw_step, backward, finite_diff_grad, parameter
from hila.errors import ContractError
from hila.tensor import PatchGeometry, Tensor


def rel_err(a, b):
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / scale


def t64(rng, shape):
    return Tensor(rng.normal(size=shape), dtype="float64")


def check_grad(build, x0, tol=1e-5):
    node = parameter(x0)
    grads = backward(build(node))
    analytic = grads[node].array

    def f(t):
        return build(ag.constant(t)).item()

    numeric = finite_diff_grad(f, x0).array
    assert rel_err(analytic, numeric) < tol, (analytic, numeric)


class TestBackwardBasics:
    def test_sum_gives_ones(self, rng):
        x = parameter(t64(rng, (3, 4)))
        grads = backward(ag.sum_all(x))
        assert np.array_equal(grads[x].array, np.ones((3, 4)))

    def test_elementwise_square(self, rng):
        x = parameter(t64(rng, (5,)))
        grads = backward(ag.sum_all(ag.mul(x, x)))
        assert np.abs(grads[x].array - 2 * x.array).max() < 1e-12

    def test_non_scalar_root_rejected(self, rng):
        x = parameter(t64(rng, (3,)))
        with pytest.raises(ContractError):
            backward(ag.mul(x, x))

    def test_shared_parameter_accumulates(self, rng):
        x = parameter(t64(rng, (4,)))
        y = ag.add(ag.mul(x, x), ag.scale(x, 3.0))
        grads = backward(ag.sum_all(y))
        assert np.abs(grads[x].array - (2 * x.array + 3.0)).max() < 1e-12

    def test_deterministic_bitwise(self, rng):
        x0 = t64(rng, (2, 8, 8, 4))
        w = ag.constant(t64(rng, (4, 4)))

        def run():
            x = parameter(x0)
            out = ag.gelu(ag.matmul(ag.softmax_lastdim(x), w))
            return backward(ag.sum_all(out))[x].array.tobytes()

        assert run() == run()


class TestFiniteDifferences:
    def test_sum(self, rng):
        fd = finite_diff_grad(lambda t: float(t.array.sum()), t64(rng, (3, 2)))
        assert np.abs(fd.array - 1.0).max() < 1e-9

    def test_square_analytic(self):
        fd = finite_diff_grad(
            lambda t: float((t.array**2).sum()), Tensor([1.0, 2.0], dtype="float64")
        )
        assert np.abs(fd.array - [2.0, 4.0]).max() < 1e-6

    def test_softmax_dot_matches_backward(self, rng):
        w = t64(rng, (6,))
        x0 = t64(rng, (6,))

        def loss_node(n):
            return ag.sum_all(ag.mul(ag.softmax_lastdim(n), ag.constant(w)))

        node = parameter(x0)
        analytic = backward(loss_node(node))[node].array
        numeric = finite_diff_grad(lambda t: loss_node(ag.constant(t)).item(), x0).array
        assert rel_err(analytic, numeric) < 1e-6

    def test_rejects_bad_step(self, rng):
        with pytest.raises(ContractError):
            finite_diff_grad(lambda t: 0.0, t64(rng, (2,)), h=0.0)


class TestPerOpGradients:
    """Every differentiable kernel against central differences in float64."""

    def test_matmul(self, rng):
        b = ag.constant(t64(rng, (4, 5)))
        w = ag.constant(t64(rng, (2, 3, 5)))
        check_grad(lambda n: ag.sum_all(ag.mul(ag.matmul(n, b), w)), t64(rng, (2, 3, 4)))

    def test_linear(self, rng):
        wt, bs = ag.constant(t64(rng, (4, 3))), ag.constant(t64(rng, (3,)))
        w = ag.constant(t64(rng, (2, 5, 3)))
        check_grad(lambda n: ag.sum_all(ag.mul(ag.linear(n, wt, bs), w)), t64(rng, (2, 5, 4)))

    def test_linear_weight_and_bias(self, rng):
        x = ag.constant(t64(rng, (7, 4)))
        w = ag.constant(t64(rng, (7, 3)))
        bias = ag.constant(t64(rng, (3,)))
        check_grad(
            lambda n: ag.sum_all(ag.mul(ag.linear(x, n, bias), w)),
            t64(rng, (4, 3)),
        )
        wmat = ag.constant(t64(rng, (4, 3)))
        check_grad(
            lambda n: ag.sum_all(ag.mul(ag.linear(x, wmat, n), w)),
            t64(rng, (3,)),
        )

    def test_softmax(self, rng):
        w = ag.constant(t64(rng, (3, 6)))
        check_grad(lambda n: ag.sum_all(ag.mul(ag.softmax_lastdim(n), w)), t64(rng, (3, 6)))

    def test_layer_norm_all_inputs(self, rng):
        g0, b0 = t64(rng, (5,)), t64(rng, (5,))
        x0 = t64(rng, (4, 5))
        w = ag.constant(t64(rng, (4, 5)))
        check_grad(
            lambda n: ag.sum_all(ag.mul(ag.layer_norm(n, ag.constant(g0), ag.constant(b0)), w)),
            x0,
        )
        check_grad(
            lambda n: ag.sum_all(ag.mul(ag.layer_norm(ag.constant(x0), n, ag.constant(b0)), w)),
            g0,
        )
        check_grad(
            lambda n: ag.sum_all(ag.mul(ag.layer_norm(ag.constant(x0), ag.constant(g0), n), w)),
            b0,
        )

    def test_gelu(self, rng):
        w = ag.constant(t64(rng, (3, 4)))
        check_grad(lambda n: ag.sum_all(ag.mul(ag.gelu(n), w)), t64(rng, (3, 4)))

    def test_exp_div_guard(self, rng):
        w = ag.constant(t64(rng, (3, 4)))
        num = ag.constant(t64(rng, (3, 4)))
        check_grad(lambda n: ag.sum_all(ag.mul(ag.exp(ag.scale(n, 0.4)), w)), t64(rng, (3, 4)))
        check_grad(
            lambda n: ag.sum_all(ag.mul(ag.div(num, ag.add(ag.mul(n, n),
                 ag.constant(Tensor(np.full((3, 4), 1.3), dtype="float64")))), w)),
            t64(rng, (3, 4)),
        )
        check_grad(
            lambda n: ag.sum_all(ag.mul(ag.guard_nonzero(n), w)),
            Tensor(rng.normal(size=(3, 4)) + 3.0, dtype="float64"),
        )

    def test_unfold_fold(self, rng):
        g = PatchGeometry()
        w1 = ag.constant(t64(rng, (1, 6, 16, 2)))
        check_grad(lambda n: ag.sum_all(ag.mul(ag.unfold(n, g), w1)), t64(rng, (1, 4, 6, 2)))
        w2 = ag.constant(t64(rng, (1, 4, 6, 2)))
        check_grad(
            lambda n: ag.sum_all(ag.mul(ag.fold(n, 4, 6, g), w2)), t64(rng, (1, 6, 16, 2))
        )

    def test_conv2d_all_inputs(self, rng):
        w0 = t64(rng, (3, 3, 2, 3))
        b0 = t64(rng, (3,))
        x0 = t64(rng, (1, 5, 6, 2))
        out_w = ag.constant(t64(rng, (1, 3, 3, 3)))

        def loss_x(n):
            return ag.sum_all(ag.mul(
                ag.conv2d(n, ag.constant(w0), ag.constant(b0), stride=2, padding=1), out_w))

        def loss_w(n):
            return ag.sum_all(ag.mul(
                ag.conv2d(ag.constant(x0), n, ag.constant(b0), stride=2, padding=1), out_w))

        check_grad(loss_x, x0)
        check_grad(loss_w, w0)

    def test_depthwise_conv(self, rng):
        w0 = ag.constant(t64(rng, (3, 3, 1, 2)))
        b0 = ag.constant(t64(rng, (2,)))
        out_w = ag.constant(t64(rng, (1, 5, 5, 2)))

        def loss_x(n):
            return ag.sum_all(ag.mul(
                ag.conv2d(n, w0, b0, stride=1, padding=1, depthwise=True), out_w))

        check_grad(loss_x, t64(rng, (1, 5, 5, 2)))

    def test_bilinear_resize(self, rng):
        w = ag.constant(t64(rng, (1, 5, 7, 2)))
        check_grad(
            lambda n: ag.sum_all(ag.mul(ag.bilinear_resize(n, 5, 7), w)), t64(rng, (1, 3, 4, 2))
        )

    def test_elementwise_and_shape_ops(self, rng):
        w = ag.constant(t64(rng, (2, 3, 4)))
        other = ag.constant(t64(rng, (2, 3, 4)))
        check_grad(lambda n: ag.sum_all(ag.mul(ag.add(n, other), w)), t64(rng, (2, 3, 4)))
        check_grad(lambda n: ag.sum_all(ag.mul(ag.mul(n, other), w)), t64(rng, (2, 3, 4)))
        check_grad(lambda n: ag.sum_all(ag.mul(ag.scale(n, -1.7), w)), t64(rng, (2, 3, 4)))
        check_grad(
            lambda n: ag.sum_all(ag.mul(ag.transpose(ag.reshape(n, (2, 4, 3)), (0, 2, 1)), w)),
            t64(rng, (2, 3, 4)),
        )
        wide = ag.constant(t64(rng, (2, 3, 7)))
        check_grad(
            lambda n: ag.sum_all(ag.mul(ag.concat_lastdim([n, other]), wide)),
            t64(rng, (2, 3, 3)),
        )
        padded = ag.constant(t64(rng, (1, 4, 5, 2)))
        check_grad(
            lambda n: ag.sum_all(ag.mul(ag.pad_bottom_right(n, 1, 2), padded)),
            t64(rng, (1, 3, 3, 2)),
        )
        check_grad(lambda n: ag.mean_all(ag.mul(n, n)), t64(rng, (3, 3)))

    def test_broadcast_add_bias(self, rng):
        x = ag.constant(t64(rng, (2, 5, 3)))
        w = ag.constant(t64(rng, (2, 5, 3)))
        check_grad(lambda n: ag.sum_all(ag.mul(ag.add(x, n), w)), t64(rng, (3,)))


class TestAdjointPairing:
    def test_fold_vjp_is_unfold_and_back(self, rng):
        g = PatchGeometry()
        x = parameter(t64(rng, (1, 4, 6, 2)))
        pat = ag.unfold(x, g)
        cot = t64(rng, pat.shape)
        grads = backward(ag.sum_all(ag.mul(pat, ag.constant(cot))))
        explicit = tk.fold(cot, 4, 6, g)
        assert np.abs(grads[x].array - explicit.array).max() < 1e-12

        p = parameter(t64(rng, (1, 6, 16, 2)))
        folded = ag.fold(p, 4, 6, g)
        cot2 = t64(rng, folded.shape)
        grads = backward(ag.sum_all(ag.mul(folded, ag.constant(cot2))))
        explicit2 = tk.unfold(cot2, g)
        assert np.abs(grads[p].array - explicit2.array).max() < 1e-12


class TestAdamW:
    def test_zero_grads_zero_decay_no_change(self, rng):
        p = parameter(Tensor(rng.normal(size=(3,)), dtype="float32"))
        before = p.array.copy()
        state = AdamWState(lr=0.1, total_steps=10, weight_decay=0.0)
        adamw_step([("p", p)], {}, state)
        assert np.array_equal(p.array, before)

    def test_descent_direction(self):
        p = parameter(Tensor([1.0], dtype="float64"))
        state = AdamWState(lr=0.1, total_steps=100, weight_decay=0.0)
        adamw_step([("p", p)], {"p": Tensor([1.0], dtype="float64")}, state)
        assert abs(p.array[0]) < 1.0

    def test_quadratic_converges(self):
        # f(theta) = 0.5 * ||theta - target||^2
        target = np.array([0.3, -0.7])
        p = parameter(Tensor([1.0, 1.0], dtype="float64"))
        state = AdamWState(lr=0.1, total_steps=200, weight_decay=0.0)
        for _ in range(200):
            grad = Tensor(p.array - target, dtype="float64")
            adamw_step([("p", p)], {"p": grad}, state)
        loss = 0.5 * ((p.array - target) ** 2).sum()
        assert loss < 1e-4

    def test_poly_schedule(self):
        state = AdamWState(lr=1.0, total_steps=4, weight_decay=0.0)
        lrs = []
        p = parameter(Tensor([0.0], dtype="float64"))
        for _ in range(4):
            lrs.append(state.lr_now())
            adamw_step([("p", p)], {"p": Tensor([0.0], dtype="float64")}, state)
        assert lrs == [1.0, 0.75, 0.5, 0.25]

    def test_shape_mismatch_rejected(self, rng):
        p = parameter(Tensor(rng.normal(size=(3,)), dtype="float32"))
        state = AdamWState(lr=0.1, total_steps=10)
        with pytest.raises(ContractError):
            adamw_step([("p", p)], {"p": Tensor(rng.normal(size=(4,)), dtype="float32")}, state)


class TestCheckpoints:
    def test_round_trip_with_manifest(self, rng, tmp_path):
        named = [
            ("a.w", Tensor(rng.normal(size=(3, 4)), dtype="float32")),
            ("b.gamma", Tensor(rng.normal(size=(7,)), dtype="float64")),
        ]
        base = tmp_path / "ckpt"
        ag.save_checkpoint(named, base, extra={"config": {"x": 1}})
        tensors, manifest = ag.load_checkpoint(base)
        assert manifest["config"] == {"x": 1}
        assert list(tensors) == ["a.w", "b.gamma"]
        for name, t in named:
            assert np.array_equal(tensors[name].array, t.array)
        # accepts the .json path as well
        tensors2, _ = ag.load_checkpoint(base.with_suffix(".json"))
        assert np.array_equal(tensors2["a.w"].array, named[0][1].array)
