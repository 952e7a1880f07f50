import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from retifuse import autograd as ag
from retifuse.autograd import ConvSpec, GradTape, ShapeError, Tensor, finite_diff_grad, grad_mismatch, precision
from retifuse.autograd.conv import output_extent


def naive_conv(x, w, b, stride, padding):
    """Direct nested-loop cross-correlation, any spatial rank."""
    n, cin = x.shape[:2]
    cout, _, *kernel = w.shape
    rank = len(kernel)
    xp = np.pad(x.astype(np.float64), [(0, 0), (0, 0)] + [(p, p) for p in padding])
    out_shape = [(xp.shape[2 + d] - kernel[d]) // stride[d] + 1 for d in range(rank)]
    out = np.zeros([n, cout] + out_shape)
    for i in range(n):
        for o in range(cout):
            for pos in itertools.product(*[range(e) for e in out_shape]):
                acc = 0.0 if b is None else float(b[o])
                for c in range(cin):
                    for off in itertools.product(*[range(k) for k in kernel]):
                        src = tuple(p * s + k for p, s, k in zip(pos, stride, off))
                        acc += xp[(i, c) + src] * w[(o, c) + off]
                out[(i, o) + pos] = acc
    return out


def naive_max_pool(x, k, s):
    n, c, h, w = x.shape
    oh, ow = (h - k) // s + 1, (w - k) // s + 1
    out = np.empty((n, c, oh, ow))
    for i, j in itertools.product(range(oh), range(ow)):
        out[:, :, i, j] = x[:, :, i * s:i * s + k, j * s:j * s + k].max(axis=(2, 3))
    return out


class TestConvValues:
    def test_ones_sum_to_nine(self):
        spec = ConvSpec.make(2, 1, 1, kernel=3)
        out = ag.conv(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), None, spec)
        assert out.shape == (1, 1, 1, 1) and out.data.item() == 9.0

    def test_extent_formula_example(self):
        assert output_extent(5, 3, 2, 1) == 3

    def test_3d_matches_nested_loop_oracle(self, rng):
        x = rng.normal(size=(1, 2, 4, 4, 4)).astype(np.float32)
        w = rng.normal(size=(3, 2, 3, 3, 3)).astype(np.float32)
        b = rng.normal(size=3).astype(np.float32)
        spec = ConvSpec.make(3, 2, 3, kernel=3, stride=1, padding=1)
        out = ag.conv(Tensor(x), Tensor(w), Tensor(b), spec).data
        np.testing.assert_allclose(out, naive_conv(x, w, b, (1, 1, 1), (1, 1, 1)), atol=1e-5)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.tuples(st.integers(3, 7), st.integers(3, 7)),
           st.integers(1, 3), st.integers(1, 3), st.integers(0, 2), st.integers(0, 2**31 - 1))
    def test_2d_random_specs(self, n, cin, cout, spatial, k, s, p, seed):
        if any(e + 2 * p < k for e in spatial):
            return
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n, cin) + spatial).astype(np.float32)
        w = rng.normal(size=(cout, cin, k, k)).astype(np.float32)
        spec = ConvSpec.make(2, cin, cout, kernel=k, stride=s, padding=p)
        out = ag.conv(Tensor(x), Tensor(w), None, spec).data
        np.testing.assert_allclose(out, naive_conv(x, w, None, (s, s), (p, p)), atol=1e-4)

    def test_batch_invariant(self, rng):
        x = rng.normal(size=(5, 2, 6, 6)).astype(np.float32)
        w = Tensor(rng.normal(size=(4, 2, 3, 3)))
        spec = ConvSpec.make(2, 2, 4, kernel=3, padding=1)
        full = ag.conv(Tensor(x), w, None, spec).data
        one = ag.conv(Tensor(x[:1]), w, None, spec).data
        assert full[:1].tobytes() == one.tobytes()

    def test_channel_mismatch(self):
        spec = ConvSpec.make(2, 3, 1)
        with pytest.raises(ShapeError):
            ag.conv(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))), None, spec)

    def test_rank_mismatch(self):
        spec = ConvSpec.make(3, 1, 1)
        with pytest.raises(ShapeError):
            ag.conv(Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros((1, 1, 3, 3, 3))), None, spec)

    def test_non_positive_output(self):
        spec = ConvSpec.make(2, 1, 1, kernel=5)
        with pytest.raises(ShapeError):
            ag.conv(Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((1, 1, 5, 5))), None, spec)


class TestConvGradients:
    @pytest.mark.parametrize("rank,stride,padding", [(2, 1, 1), (2, 2, 0), (3, 1, 1), (3, 2, 1)])
    def test_against_finite_differences(self, rank, stride, padding):
        rng = np.random.default_rng(rank * 10 + stride)
        with precision(np.float64):
            x = Tensor(rng.normal(size=(2, 2) + (5,) * rank), requires_grad=True)
            w = Tensor(rng.normal(size=(3, 2) + (3,) * rank), requires_grad=True)
            b = Tensor(rng.normal(size=3), requires_grad=True)
            r = rng.normal(size=(2, 3) + ConvSpec.make(rank, 2, 3, 3, stride, padding).output_shape((5,) * rank))
            spec = ConvSpec.make(rank, 2, 3, kernel=3, stride=stride, padding=padding)

            def f(_=None):
                return ag.sum(ag.mul(ag.conv(x, w, b, spec), Tensor(r)))

            with GradTape() as tape:
                loss = f()
            grads = tape.backward(loss, wrt=[x, w, b])
            for t in (x, w, b):
                assert not grad_mismatch(grads[t], finite_diff_grad(f, t, 1e-6)).any()

    @pytest.mark.parametrize("pool", ["max", "avg"])
    def test_pool_gradients(self, pool, rng):
        op = ag.max_pool if pool == "max" else ag.avg_pool
        with precision(np.float64):
            x = Tensor(rng.normal(size=(2, 2, 6, 6)), requires_grad=True)
            r = Tensor(rng.normal(size=(2, 2, 3, 3)))

            def f(_=None):
                return ag.sum(ag.mul(op(x, 3, 2, 1), r))

            with GradTape() as tape:
                loss = f()
            g = tape.backward(loss, wrt=[x])[x]
            assert not grad_mismatch(g, finite_diff_grad(f, x, 1e-6)).any()


class TestPoolValues:
    def test_max_pool_matches_oracle(self, rng):
        x = rng.normal(size=(2, 3, 7, 7)).astype(np.float32)
        np.testing.assert_array_equal(ag.max_pool(Tensor(x), 3, 2).data, naive_max_pool(x, 3, 2))

    def test_avg_pool_counts_padding(self):
        out = ag.avg_pool(Tensor(np.ones((1, 1, 2, 2))), 2, 2, 1).data
        np.testing.assert_allclose(out, np.full((1, 1, 2, 2), 0.25))

    def test_max_pool_tie_routes_gradient_once(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with GradTape() as tape:
            loss = ag.sum(ag.max_pool(x, 2))
        g = tape.backward(loss)[x]
        assert g.sum() == 1.0 and g.reshape(-1)[0] == 1.0


def _formula(n, k, s, p):
    return (n + 2 * p - k) // s + 1


class TestShapeLaws:
    GRID = list(itertools.product(range(1, 17), range(1, 6), range(1, 4), range(0, 3)))

    def test_output_extent_formula_exhaustive(self):
        for n, k, s, p in self.GRID:
            if n + 2 * p < k:
                with pytest.raises(ShapeError):
                    output_extent(n, k, s, p)
            else:
                assert output_extent(n, k, s, p) == _formula(n, k, s, p) >= 1

    def test_conv_and_pool_shapes_exhaustive(self):
        x_cache = {}
        for n, k, s, p in self.GRID:
            x = x_cache.setdefault(n, Tensor(np.ones((1, 1, n, 2))))
            w = Tensor(np.ones((1, 1, k, 1)))
            conv_spec = ConvSpec((k, 1), (s, 1), (p, 0), 1, 1)
            if n + 2 * p < k:
                with pytest.raises(ShapeError):
                    ag.conv(x, w, None, conv_spec)
                with pytest.raises(ShapeError):
                    ag.max_pool(x, (k, 1), (s, 1), (p, 0))
                continue
            expected = (1, 1, _formula(n, k, s, p), 2)
            assert ag.conv(x, w, None, conv_spec).shape == expected
            assert ag.max_pool(x, (k, 1), (s, 1), (p, 0)).shape == expected
            assert ag.avg_pool(x, (k, 1), (s, 1), (p, 0)).shape == expected
