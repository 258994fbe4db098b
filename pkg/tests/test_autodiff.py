import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from targetdial import autodiff as ad
from targetdial.errors import ContractError, DimensionError, NumericError


def finite_difference(f, x, eps=1e-6):
    """Central-difference gradient of scalar f wrt flat array x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gf[i] = (up - down) / (2 * eps)
    return g


def rel_err(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def check_gradient(build, arrays, tol=1e-4):
    """build(tape) -> scalar loss tensor over the given leaf arrays."""
    tape = ad.Tape()
    loss = build(tape)
    tape.backward(loss)
    for arr in arrays:
        analytic = tape.grad(arr)
        numeric = finite_difference(lambda: float(build(None).value), arr)
        assert rel_err(analytic, numeric) < tol


class TestForwardValues:
    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(ad.as_tensor([0.0])).value[0] == 0.5

    def test_relu(self):
        out = ad.relu(ad.as_tensor([-2.0, 0.0, 3.0]))
        assert np.array_equal(out.value, [0.0, 0.0, 3.0])

    def test_softmax_uniform_over_equal_scores(self):
        out = ad.softmax_masked(ad.as_tensor([1.7, 1.7, 1.7]), np.array([True, True, True]))
        assert np.allclose(out.value, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)

    def test_softmax_masked_zeroes_excluded_positions(self):
        out = ad.softmax_masked(
            ad.as_tensor([5.0, 1.0, -2.0, 0.5]), np.array([True, False, True, True])
        )
        assert out.value[1] == 0.0
        assert out.value[out.value > 0].sum() == pytest.approx(1.0, abs=1e-15)

    def test_gather_selects_rows(self):
        table = ad.as_tensor(np.arange(12.0).reshape(4, 3))
        out = ad.gather(table, [2])
        assert np.array_equal(out.value, [[6.0, 7.0, 8.0]])

    def test_affine_matches_numpy(self):
        rng = np.random.default_rng(0)
        x, w, b = rng.normal(size=5), rng.normal(size=(5, 3)), rng.normal(size=3)
        out = ad.affine(ad.as_tensor(x), ad.as_tensor(w), ad.as_tensor(b))
        assert np.allclose(out.value, x @ w + b, atol=1e-15)

    def test_concat_and_flatten(self):
        out = ad.concat([ad.as_tensor([1.0, 2.0]), ad.as_tensor([3.0])])
        assert np.array_equal(out.value, [1.0, 2.0, 3.0])
        out2 = ad.flatten(ad.as_tensor([[1.0, 2.0]]))
        assert out2.value.shape == (2,)


class TestErrors:
    def test_shape_mismatch_raises_dimension_error(self):
        with pytest.raises(DimensionError):
            ad.matmul(ad.as_tensor([1.0, 2.0]), ad.as_tensor(np.ones((3, 2))))

    def test_non_finite_output_names_the_op(self):
        with pytest.raises(NumericError, match="log"):
            ad.log(ad.as_tensor([0.0]))

    def test_overflowing_exp_is_caught(self):
        # sigmoid saturates rather than overflowing; log of its 0 output trips
        with pytest.raises(NumericError):
            ad.log(ad.sub(ad.as_tensor([1.0]), ad.sigmoid(ad.as_tensor([800.0]))))

    def test_backward_requires_scalar_loss(self):
        tape = ad.Tape()
        vec = tape.leaf(np.array([1.0, 2.0]))
        out = ad.mul(vec, vec)
        with pytest.raises(ContractError):
            tape.backward(out)

    def test_empty_mask_rejected(self):
        with pytest.raises(ContractError):
            ad.softmax_masked(ad.as_tensor([1.0, 2.0]), np.array([False, False]))

    def test_two_tapes_cannot_mix(self):
        t1, t2 = ad.Tape(), ad.Tape()
        a = t1.leaf(np.ones(2))
        b = t2.leaf(np.ones(2))
        with pytest.raises(ContractError):
            ad.add(a, b)


class TestBackwardValues:
    def test_sigmoid_gradient_at_zero(self):
        x = np.array([0.0])
        tape = ad.Tape()
        out = ad.sum_all(ad.sigmoid(tape.leaf(x)))
        tape.backward(out)
        assert tape.grad(x)[0] == pytest.approx(0.25, abs=1e-15)

    def test_mean_gradient_is_one_over_n(self):
        x = np.array([3.0, 5.0, 9.0, -1.0])
        tape = ad.Tape()
        tape.backward(ad.mean_all(tape.leaf(x)))
        assert np.allclose(tape.grad(x), 0.25)

    def test_leaf_reuse_accumulates(self):
        # x used twice: d(x*x)/dx = 2x elementwise
        x = np.array([2.0, -3.0])
        tape = ad.Tape()
        lx = tape.leaf(x)
        tape.backward(ad.sum_all(ad.mul(lx, lx)))
        assert np.allclose(tape.grad(x), 2 * x)

    def test_unused_parameter_gets_zero_gradient(self):
        x, unused = np.array([1.0]), np.array([5.0])
        tape = ad.Tape()
        lx, lu = tape.leaf(x), tape.leaf(unused)
        tape.backward(ad.sum_all(lx))
        assert np.array_equal(tape.grad(unused), [0.0])


class TestGradientOracle:
    """Every primitive against central finite differences."""

    def test_elementwise_chain(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=6), rng.normal(size=6)

        def build(tape):
            ta = tape.leaf(a) if tape else ad.as_tensor(a)
            tb = tape.leaf(b) if tape else ad.as_tensor(b)
            out = ad.mul(ad.tanh(ta), ad.sigmoid(ad.add(ta, tb)))
            return ad.sum_all(ad.mul(out, out))

        check_gradient(build, [a, b])

    def test_affine_relu_softmax(self):
        rng = np.random.default_rng(2)
        x, w, b = rng.normal(size=4), rng.normal(size=(4, 5)), rng.normal(size=5)
        mask = np.array([True, True, False, True, True])
        probe = rng.normal(size=5)

        def build(tape):
            lift = tape.leaf if tape else ad.as_tensor
            h = ad.relu(ad.affine(lift(x), lift(w), lift(b)))
            p = ad.softmax_masked(h, mask)
            return ad.sum_all(ad.mul(p, ad.as_tensor(probe)))

        check_gradient(build, [x, w, b])

    def test_gather_concat_matmul(self):
        rng = np.random.default_rng(3)
        table = rng.normal(size=(5, 3))
        v = rng.normal(size=3)

        def build(tape):
            lift = tape.leaf if tape else ad.as_tensor
            rows = ad.gather(lift(table), [0, 3, 3])
            d = ad.concat_cols([rows, ad.repeat_rows(lift(v), 3)])
            return ad.mean_all(ad.mul(d, d))

        check_gradient(build, [table, v])

    def test_log_clip(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(0.2, 0.8, size=5)

        def build(tape):
            lift = tape.leaf if tape else ad.as_tensor
            return ad.sum_all(ad.log(ad.clip(lift(x), 1e-12, 1 - 1e-12)))

        check_gradient(build, [x])


class TestGruCell:
    def _params(self, in_dim, hidden, rng=None):
        make = (lambda *s: rng.normal(scale=0.4, size=s)) if rng else (lambda *s: np.zeros(s))
        names = {}
        for gate in ("z", "r", "h"):
            names[f"w_{gate}"] = make(in_dim, hidden)
            names[f"u_{gate}"] = make(hidden, hidden)
            names[f"b_{gate}"] = make(hidden) if rng else np.zeros(hidden)
        return names

    def test_zero_params_halve_the_state(self):
        arrays = self._params(3, 4)
        h0 = np.array([1.0, -2.0, 0.5, 4.0])
        out = ad.gru_cell(
            ad.as_tensor(np.ones(3)),
            ad.as_tensor(h0),
            {k: ad.as_tensor(v) for k, v in arrays.items()},
        )
        assert np.allclose(out.value, 0.5 * h0, atol=1e-15)

    def test_zero_state_zero_params_stays_zero(self):
        arrays = self._params(3, 4)
        out = ad.gru_cell(
            ad.as_tensor(np.ones(3)),
            ad.as_tensor(np.zeros(4)),
            {k: ad.as_tensor(v) for k, v in arrays.items()},
        )
        assert np.array_equal(out.value, np.zeros(4))

    def test_gradient_against_finite_differences(self):
        rng = np.random.default_rng(5)
        arrays = self._params(3, 4, rng)
        x = rng.normal(size=3)
        h = rng.normal(size=4)
        probe = rng.normal(size=4)

        def build(tape):
            lift = tape.leaf if tape else ad.as_tensor
            out = ad.gru_cell(lift(x), lift(h), {k: lift(v) for k, v in arrays.items()})
            return ad.sum_all(ad.mul(out, ad.as_tensor(probe)))

        check_gradient(build, [x, h] + list(arrays.values()))

    def test_dim_mismatch(self):
        arrays = self._params(3, 4)
        with pytest.raises(DimensionError):
            ad.gru_cell(
                ad.as_tensor(np.ones(5)),
                ad.as_tensor(np.zeros(4)),
                {k: ad.as_tensor(v) for k, v in arrays.items()},
            )


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-20, 20), min_size=1, max_size=12), st.data())
    def test_masked_softmax_sums_to_one_over_mask(self, scores, data):
        mask = data.draw(
            st.lists(st.booleans(), min_size=len(scores), max_size=len(scores)).filter(any)
        )
        out = ad.softmax_masked(ad.as_tensor(scores), np.array(mask)).value
        assert out[~np.array(mask)].sum() == 0.0
        assert np.isclose(out.sum(), 1.0, atol=1e-12)
        assert np.all(out >= 0.0)

    def test_determinism_same_inputs_same_bits(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=8)
        w = rng.normal(size=(8, 8))

        def run():
            return ad.softmax_masked(
                ad.matmul(ad.tanh(ad.as_tensor(x)), ad.as_tensor(w)), np.ones(8, dtype=bool)
            ).value

        assert np.array_equal(run(), run())
