import math

import numpy as np
import pytest

from promamba import ssm
from promamba import tensor as T
from promamba.rng import Rng
from promamba.ssm import (
    SSMBlockParams,
    bidirectional_mix,
    discretize,
    init_block,
    linear_scan,
    mamba_block,
    selective_scan_parallel,
    selective_scan_seq,
)
from promamba.tensor import DomainError, Tensor, grad_check


def t64(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), "float64", requires_grad=requires_grad)


def random_scan_inputs(rng, L, d_inner, d_state, dtype="float64"):
    x = Tensor(rng.normal(size=(L, d_inner)), dtype)
    delta = Tensor(rng.uniform(0.05, 0.5, size=(L, d_inner)), dtype)
    A = Tensor(-np.exp(rng.normal(0, 0.5, size=(d_inner, d_state))), dtype)
    B = Tensor(rng.normal(size=(L, d_state)), dtype)
    C = Tensor(rng.normal(size=(L, d_state)), dtype)
    D = Tensor(rng.normal(size=d_inner), dtype)
    return x, delta, A, B, C, D


class TestDiscretize:
    def test_unit_decay(self):
        delta = t64([[math.log(2.0)]])
        A = t64([[-1.0]])
        B = t64([[1.0]])
        a_bar, _ = discretize(delta, A, B)
        assert a_bar.data[0, 0, 0] == pytest.approx(0.5, rel=1e-12)

    def test_small_delta_limit(self):
        delta = t64([[1e-12]])
        A = t64([[-1.0]])
        B = t64([[3.0]])
        a_bar, b_bar = discretize(delta, A, B)
        assert a_bar.data[0, 0, 0] == pytest.approx(1.0, abs=1e-10)
        assert b_bar.data[0, 0, 0] == pytest.approx(0.0, abs=1e-10)

    def test_nonpositive_delta_rejected(self):
        with pytest.raises(DomainError):
            discretize(t64([[0.0]]), t64([[-1.0]]), t64([[1.0]]))

    def test_range_of_a_bar(self):
        rng = np.random.default_rng(0)
        _, delta, A, B, _, _ = random_scan_inputs(rng, 16, 3, 5)
        a_bar, _ = discretize(delta, A, B)
        assert np.all(a_bar.data > 0) and np.all(a_bar.data < 1)

    def test_extended_precision_oracle(self):
        import mpmath

        mpmath.mp.dps = 40
        rng = np.random.default_rng(5)
        _, delta, A, B, _, _ = random_scan_inputs(rng, 8, 2, 3)
        a_bar, b_bar = discretize(delta, A, B)
        for t in range(8):
            for i in range(2):
                for j in range(3):
                    exact_a = float(mpmath.e ** (mpmath.mpf(delta.data[t, i]) * mpmath.mpf(A.data[i, j])))
                    exact_b = float(mpmath.mpf(delta.data[t, i]) * mpmath.mpf(B.data[t, j]))
                    assert abs(a_bar.data[t, i, j] - exact_a) < 1e-7
                    assert abs(b_bar.data[t, i, j] - exact_b) < 1e-7


class TestSequentialScan:
    def test_single_step(self):
        rng = np.random.default_rng(1)
        x, delta, A, B, C, D = random_scan_inputs(rng, 1, 3, 4)
        y = selective_scan_seq(x, delta, A, B, C, D)
        a_bar = np.exp(delta.data[0][:, None] * A.data)
        b_bar = delta.data[0][:, None] * B.data[0][None, :]
        h1 = b_bar * x.data[0][:, None]
        expected = (C.data[0][None, :] * h1).sum(axis=1) + D.data * x.data[0]
        np.testing.assert_allclose(y.data[0], expected, rtol=1e-12)

    def test_prefix_sum_degenerate(self):
        # A = -eps with delta = 1 makes A_bar ~ 1; B=1, C=1, D=0 turns the
        # recurrence into a cumulative sum of x.
        eps = 1e-9
        x = t64([[1.0], [2.0], [3.0]])
        delta = t64(np.ones((3, 1)))
        A = t64([[-eps]])
        B = t64(np.ones((3, 1)))
        C = t64(np.ones((3, 1)))
        D = t64([0.0])
        y = selective_scan_seq(x, delta, A, B, C, D)
        np.testing.assert_allclose(y.data[:, 0], [1.0, 3.0, 6.0], atol=1e-6)

    def test_extended_precision_sequential_oracle(self):
        import mpmath

        mpmath.mp.dps = 40
        rng = np.random.default_rng(42)
        L, d_inner, d_state = 64, 4, 8
        x, delta, A, B, C, D = random_scan_inputs(rng, L, d_inner, d_state)
        y = selective_scan_seq(x, delta, A, B, C, D)

        expected = np.zeros((L, d_inner))
        for i in range(d_inner):
            h = [mpmath.mpf(0)] * d_state
            for t in range(L):
                dt = mpmath.mpf(delta.data[t, i])
                for n in range(d_state):
                    a_bar = mpmath.e ** (dt * mpmath.mpf(A.data[i, n]))
                    b_bar = dt * mpmath.mpf(B.data[t, n])
                    h[n] = a_bar * h[n] + b_bar * mpmath.mpf(x.data[t, i])
                acc = mpmath.mpf(0)
                for n in range(d_state):
                    acc += mpmath.mpf(C.data[t, n]) * h[n]
                expected[t, i] = float(acc + mpmath.mpf(D.data[i]) * mpmath.mpf(x.data[t, i]))
        err = np.abs(y.data - expected) / (np.abs(expected) + 1e-9)
        assert err.max() < 1e-6


class TestParallelScan:
    def test_length_one_exact(self):
        rng = np.random.default_rng(2)
        x, delta, A, B, C, D = random_scan_inputs(rng, 1, 2, 3)
        ys = selective_scan_seq(x, delta, A, B, C, D)
        yp = selective_scan_parallel(x, delta, A, B, C, D)
        np.testing.assert_array_equal(ys.data, yp.data)

    def test_zero_decay_exact(self):
        # all A_bar = 0 decouples the timesteps entirely
        rng = np.random.default_rng(3)
        a = Tensor(np.zeros((100, 4, 3)), "float64")
        b = Tensor(rng.normal(size=(100, 4, 3)), "float64")
        hs = linear_scan(a, b, parallel=False)
        hp = linear_scan(a, b, parallel=True)
        np.testing.assert_array_equal(hs.data, b.data)
        np.testing.assert_array_equal(hp.data, hs.data)

    @pytest.mark.parametrize("dtype,bound", [("float32", 1e-5), ("float64", 1e-12)])
    def test_randomized_equivalence(self, dtype, bound):
        rng = np.random.default_rng(1234)
        worst = 0.0
        for _ in range(40):
            L = int(rng.integers(2, 513))
            d_inner = int(rng.integers(1, 6))
            d_state = int(rng.integers(1, 6))
            x, delta, A, B, C, D = random_scan_inputs(rng, L, d_inner, d_state, dtype)
            ys = selective_scan_seq(x, delta, A, B, C, D)
            yp = selective_scan_parallel(x, delta, A, B, C, D)
            div = np.max(np.abs(yp.data - ys.data) / (np.abs(ys.data) + 1e-9))
            worst = max(worst, float(div))
        assert worst < bound, worst

    def test_thread_count_independence(self):
        rng = np.random.default_rng(7)
        x, delta, A, B, C, D = random_scan_inputs(rng, 257, 8, 4, "float32")
        y1 = selective_scan_parallel(x, delta, A, B, C, D, workers=1)
        y4 = selective_scan_parallel(x, delta, A, B, C, D, workers=4)
        np.testing.assert_array_equal(y1.data, y4.data)

    def test_no_overflow_long_sequence(self):
        rng = np.random.default_rng(11)
        x, delta, A, B, C, D = random_scan_inputs(rng, 4096, 2, 4, "float32")
        y = selective_scan_parallel(x, delta, A, B, C, D)
        assert np.isfinite(y.data).all()

    @pytest.mark.parametrize("parallel", [False, True])
    def test_scan_gradients(self, parallel):
        rng = np.random.default_rng(21)
        x, delta, A, B, C, D = random_scan_inputs(rng, 9, 2, 3)
        w = t64(rng.normal(size=(9, 2)))

        def f(x, delta, A, B, C, D):
            y = ssm._selective_scan(x, delta, A, B, C, D, parallel=parallel)
            return T.tsum(T.mul(y, w))

        report = grad_check(f, [x, delta, A, B, C, D], tol=1e-4)
        assert report.passed, report

    def test_long_scan_gradient_matches_modes(self):
        # same cotangents from both scan algorithms on a blocked-length case
        rng = np.random.default_rng(31)
        x, delta, A, B, C, D = random_scan_inputs(rng, 131, 3, 4)
        grads = {}
        for parallel in (False, True):
            leaves = [Tensor(v.data.copy(), "float64", requires_grad=True) for v in (x, delta, A, B, C, D)]
            with T.Tape():
                y = ssm._selective_scan(*leaves, parallel=parallel)
                T.backward(T.tsum(T.mul(y, y)))
            grads[parallel] = [leaf.grad.copy() for leaf in leaves]
        for gs, gp in zip(grads[False], grads[True]):
            np.testing.assert_allclose(gs, gp, rtol=1e-10, atol=1e-12)


def make_block(d_model, d_state, bidirectional=True, seed=0, dtype="float64"):
    return init_block(d_model, d_state, 4, bidirectional, Rng(seed), dtype)


def zero_biases(block: SSMBlockParams):
    for branch in (block.fwd, block.bwd):
        if branch is None:
            continue
        branch.conv_b.data[:] = 0
        branch.dt_bias.data[:] = 0
    return block


class TestMambaBlock:
    def test_zero_input_zero_biases_gives_zero(self):
        block = zero_biases(make_block(8, 4))
        tokens = t64(np.zeros((5, 8)))
        out = mamba_block(tokens, block, "forward")
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_reversal_symmetry(self):
        # backward block on s == flip(forward block on flip(s)), shared branch
        block = make_block(8, 4, bidirectional=True, seed=3)
        block.bwd = block.fwd
        rng = np.random.default_rng(9)
        s = t64(rng.normal(size=(7, 8)))
        out_b = mamba_block(s, block, "backward")
        out_f_rev = mamba_block(T.flip(s, 0), block, "forward")
        np.testing.assert_allclose(out_b.data, np.flip(out_f_rev.data, axis=0), rtol=1e-10, atol=1e-12)

    def test_palindrome_case(self):
        # specialization of the reversal-symmetry invariant: on a palindromic
        # sequence the backward block equals the flipped forward block
        block = make_block(8, 4, bidirectional=True, seed=4)
        block.bwd = block.fwd
        rng = np.random.default_rng(10)
        half = rng.normal(size=(3, 8))
        s = t64(np.concatenate([half, half[::-1]], axis=0))
        out_b = mamba_block(s, block, "backward")
        out_f = mamba_block(s, block, "forward")
        np.testing.assert_allclose(out_b.data, np.flip(out_f.data, axis=0), rtol=1e-10, atol=1e-12)

    def test_gradient(self):
        block = make_block(8, 4, bidirectional=False, seed=5)
        tokens = t64(np.random.default_rng(6).normal(size=(6, 8)))
        params = [tokens, block.in_proj, block.out_proj] + [
            getattr(block.fwd, f) for f in ("conv_w", "conv_b", "x_proj", "dt_proj", "dt_bias", "A_log", "D")
        ]
        w = t64(np.random.default_rng(7).normal(size=(6, 8)))

        def f(tokens, in_proj, out_proj, conv_w, conv_b, x_proj, dt_proj, dt_bias, A_log, D):
            blk = SSMBlockParams(
                in_proj=in_proj,
                out_proj=out_proj,
                fwd=ssm.SSMBranchParams(conv_w, conv_b, x_proj, dt_proj, dt_bias, A_log, D),
                bwd=None,
            )
            return T.tsum(T.mul(mamba_block(tokens, blk, "forward"), w))

        report = grad_check(f, params, tol=1e-4)
        assert report.passed, report


class TestBidirectional:
    def test_zeroed_backward_branch_equals_forward(self):
        block = make_block(8, 4, bidirectional=True, seed=8)
        for f in ("conv_w", "conv_b", "x_proj", "dt_proj", "A_log", "D"):
            getattr(block.bwd, f).data[:] = 0
        # zero D and zero C-path make the scan output zero; the gate then
        # multiplies by silu(z) and out_proj maps zero to zero
        block.bwd.D.data[:] = 0
        tokens = t64(np.random.default_rng(11).normal(size=(5, 8)))
        both = bidirectional_mix(tokens, block, bidirectional=True)
        fwd = mamba_block(tokens, block, "forward")
        np.testing.assert_allclose(both.data, fwd.data, rtol=1e-10, atol=1e-12)

    def test_flag_disabled_ignores_backward_params(self):
        block = make_block(8, 4, bidirectional=True, seed=9)
        tokens = t64(np.random.default_rng(12).normal(size=(5, 8)))
        out1 = bidirectional_mix(tokens, block, bidirectional=False)
        block.bwd.x_proj.data[:] = 123.0
        out2 = bidirectional_mix(tokens, block, bidirectional=False)
        np.testing.assert_array_equal(out1.data, out2.data)
        np.testing.assert_array_equal(out1.data, mamba_block(tokens, block, "forward").data)

    def test_gradient_of_sum(self):
        block = make_block(4, 2, bidirectional=True, seed=10)
        tokens = t64(np.random.default_rng(13).normal(size=(4, 4)))
        w = t64(np.random.default_rng(14).normal(size=(4, 4)))
        flat = [tokens, block.in_proj, block.out_proj]
        fields = ("conv_w", "conv_b", "x_proj", "dt_proj", "dt_bias", "A_log", "D")
        flat += [getattr(block.fwd, f) for f in fields]
        flat += [getattr(block.bwd, f) for f in fields]

        def f(tokens, in_proj, out_proj, *branches):
            fwd = ssm.SSMBranchParams(*branches[:7])
            bwd = ssm.SSMBranchParams(*branches[7:])
            blk = SSMBlockParams(in_proj, out_proj, fwd, bwd)
            return T.tsum(T.mul(bidirectional_mix(tokens, blk), w))

        report = grad_check(f, flat, tol=1e-4)
        assert report.passed, report
