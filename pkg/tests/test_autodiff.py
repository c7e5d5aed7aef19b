import numpy as np
import pytest

from triforge.autodiff import (
    Tensor,
    Tape,
    AutodiffError,
    NonFiniteError,
    TapeError,
    ops,
    Adam,
    adam_step,
    adam_state,
    save_tensor,
    load_tensor,
    ContainerError,
)

from gradcheck import check_grad, make_params, rel_err, numeric_grad


RNG = np.random.default_rng(20240817)


class TestElementwise:
    def test_add_zero_identity(self):
        x = Tensor([1.0, -2.0, 3.5])
        z = Tensor(np.zeros(3))
        out = ops.add(z, x)
        np.testing.assert_array_equal(out.data, x.data)

    def test_mul_one_identity(self):
        x = Tensor([1.0, -2.0, 3.5])
        out = ops.mul(x, 1.0)
        np.testing.assert_array_equal(out.data, x.data)

    def test_grad_sum_of_squares(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_all(ops.mul(x, x))
        tape.backward(loss)
        num = numeric_grad(lambda t: ops.sum_all(ops.mul(t, t)), [x], 0)
        assert rel_err(x.grad, [2.0, 4.0]) < 1e-6
        assert rel_err(x.grad, num) < 1e-4

    def test_shape_mismatch_rejected(self):
        with pytest.raises(AutodiffError):
            ops.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_no_general_broadcasting(self):
        with pytest.raises(AutodiffError):
            ops.mul(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))

    def test_non_finite_raises(self):
        with pytest.raises(NonFiniteError):
            ops.log(Tensor([0.0]))

    @pytest.mark.parametrize("seed", range(20))
    def test_elementwise_chain_gradients(self, seed):
        rng = np.random.default_rng(seed)
        (x, y) = make_params(rng, (5,), (5,))

        def fn(a, b):
            z = ops.mul(ops.add(a, b), ops.sigmoid(ops.sub(a, b)))
            z = ops.add(z, ops.softplus(ops.mul(a, 0.7)))
            return ops.sum_all(ops.mul(z, z))

        check_grad(fn, [x, y], 0)
        check_grad(fn, [x, y], 1)

    @pytest.mark.parametrize(
        "unary",
        [ops.exp, ops.tanh, ops.sigmoid, ops.softplus, ops.relu,
         ops.leaky_relu, ops.neg, ops.absolute],
    )
    def test_unary_gradients(self, unary):
        rng = np.random.default_rng(hash(unary.__name__) % 2**31)
        (x,) = make_params(rng, (6,))
        x.data += np.sign(x.data) * 0.05  # keep away from relu/abs kinks

        def fn(a):
            return ops.sum_all(ops.mul(unary(a), unary(a)))

        check_grad(fn, [x], 0)

    def test_div_sqrt_log_gradients(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.uniform(0.5, 2.0, 6).astype(np.float32), requires_grad=True)
        y = Tensor(rng.uniform(0.5, 2.0, 6).astype(np.float32), requires_grad=True)

        def fn(a, b):
            return ops.sum_all(ops.log(ops.div(ops.sqrt(a), b)))

        check_grad(fn, [x, y], 0)
        check_grad(fn, [x, y], 1)

    def test_clip_gradient_masks_outside(self):
        x = Tensor([-2.0, 0.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_all(ops.clip(x, -1.0, 1.0))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


class TestMatmul:
    def test_identity(self):
        x = Tensor(RNG.standard_normal((4, 4)).astype(np.float32))
        eye = Tensor(np.eye(4))
        out = ops.matmul(eye, x)
        np.testing.assert_allclose(out.data, x.data, rtol=1e-6)

    def test_scalar_product(self):
        out = ops.matmul(Tensor([[2.0]]), Tensor([[3.0]]))
        assert out.data.reshape(()) == pytest.approx(6.0)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients_vs_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        a, b = make_params(rng, (4, 5), (5, 3))

        w = np.asarray(rng.standard_normal((4, 3)), dtype=np.float32)

        def fn(x, y):
            return ops.sum_all(ops.mul(ops.matmul(x, y), Tensor(w)))

        # independent float64 oracle for the tight tolerance
        def oracle(x64, y64):
            return np.sum((x64 @ y64) * w.astype(np.float64))

        from gradcheck import analytic_grad, numeric_grad_f64
        for wrt in (0, 1):
            num = numeric_grad_f64(oracle, [a.data, b.data], wrt)
            ana = analytic_grad(fn, [a, b], wrt)
            assert rel_err(num, ana) < 1e-4

        def fn2(x, y):
            return ops.sum_all(ops.mul(ops.matmul(x, y), ops.matmul(x, y)))

        check_grad(fn2, [a, b], 0, tol=1e-3)
        check_grad(fn2, [a, b], 1, tol=1e-3)

    def test_dim_mismatch(self):
        with pytest.raises(AutodiffError):
            ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_bias_add_gradient(self):
        rng = np.random.default_rng(3)
        x, b = make_params(rng, (4, 3), (3,))

        def fn(xx, bb):
            return ops.sum_all(ops.power(ops.bias_add(xx, bb), 2))

        check_grad(fn, [x, b], 0)
        check_grad(fn, [x, b], 1)


class TestConv2d:
    def test_one_by_one_identity_kernel(self):
        x = Tensor(RNG.standard_normal((1, 5, 5)).astype(np.float32))
        k = Tensor(np.ones((1, 1, 1, 1)))
        out = ops.conv2d(x, k)
        np.testing.assert_allclose(out.data, x.data, rtol=1e-6)

    def test_all_ones_window_sum(self):
        x = Tensor(np.ones((1, 3, 3)))
        k = Tensor(np.ones((1, 1, 3, 3)))
        out = ops.conv2d(x, k)
        assert out.data.shape == (1, 1, 1)
        assert out.data.reshape(()) == pytest.approx(9.0)

    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1)])
    def test_gradients(self, seed, stride, padding):
        rng = np.random.default_rng(200 + seed)
        x, k, b = make_params(rng, (2, 8, 8), (3, 2, 3, 3), (3,))

        def fn(xx, kk, bb):
            y = ops.conv2d(xx, kk, bb, stride=stride, padding=padding)
            return ops.sum_all(ops.mul(y, y))

        check_grad(fn, [x, k, b], 0)
        check_grad(fn, [x, k, b], 1)
        check_grad(fn, [x, k, b], 2)

    def test_invalid_stride(self):
        with pytest.raises(AutodiffError):
            ops.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))),
                       stride=0)

    def test_kernel_does_not_fit(self):
        with pytest.raises(AutodiffError):
            ops.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))

    def test_batch_matches_single(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
        k = Tensor(rng.standard_normal((4, 3, 3, 3)).astype(np.float32))
        full = ops.conv2d(Tensor(x), k, padding=1).data
        for i in range(2):
            single = ops.conv2d(Tensor(x[i]), k, padding=1).data
            np.testing.assert_allclose(full[i], single, rtol=1e-5)


class TestGridSample:
    def test_constant_plane(self):
        plane = Tensor(np.full((3, 8, 8), 2.5))
        uv = Tensor(RNG.uniform(-1, 1, (10, 2)).astype(np.float32))
        out = ops.grid_sample_2d(plane, uv)
        np.testing.assert_allclose(out.data, 2.5, rtol=1e-6)

    def test_texel_center_exact(self):
        plane = Tensor(RNG.standard_normal((2, 5, 7)).astype(np.float32))
        # texel (i, j) center is uv = (2i/(W-1)-1, 2j/(H-1)-1)
        i, j = 3, 4
        uv = Tensor([[2 * i / 4 - 1, 2 * j / 6 - 1]])
        out = ops.grid_sample_2d(plane, uv)
        np.testing.assert_allclose(out.data[0], plane.data[:, i, j], atol=1e-5)

    def test_out_of_range_clamped(self):
        plane = Tensor(RNG.standard_normal((1, 4, 4)).astype(np.float32))
        out = ops.grid_sample_2d(plane, Tensor([[5.0, -7.0]]))
        np.testing.assert_allclose(out.data[0, 0], plane.data[0, 3, 0], atol=1e-5)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients_plane_and_uv(self, seed):
        rng = np.random.default_rng(300 + seed)
        plane = Tensor(rng.standard_normal((2, 6, 6)).astype(np.float32),
                       requires_grad=True)
        uv = Tensor(rng.uniform(-0.9, 0.9, (5, 2)).astype(np.float32),
                    requires_grad=True)

        def fn(p, u):
            y = ops.grid_sample_2d(p, u)
            return ops.sum_all(ops.mul(y, y))

        check_grad(fn, [plane, uv], 0)
        check_grad(fn, [plane, uv], 1)


class TestReductionsAndShape:
    def test_cumsum_gradient(self):
        rng = np.random.default_rng(11)
        (x,) = make_params(rng, (4, 5))

        def fn(a):
            return ops.sum_all(ops.power(ops.cumsum(a, axis=1), 2))

        check_grad(fn, [x], 0)

    def test_sum_axis_gradient(self):
        rng = np.random.default_rng(12)
        (x,) = make_params(rng, (3, 4))

        def fn(a):
            return ops.sum_all(ops.power(ops.sum_axis(a, axis=0), 2))

        check_grad(fn, [x], 0)

    def test_concat_slice_roundtrip_gradient(self):
        rng = np.random.default_rng(13)
        a, b = make_params(rng, (2, 3), (2, 2))

        def fn(x, y):
            z = ops.concat([x, y], axis=1)
            left = ops.slice_axis(z, 1, 0, 3)
            return ops.sum_all(ops.mul(left, left))

        check_grad(fn, [a, b], 0)
        # b never reaches the loss; gradient must be exactly zero
        from gradcheck import analytic_grad
        gb = analytic_grad(fn, [a, b], 1)
        np.testing.assert_array_equal(gb, np.zeros_like(b.data))

    def test_gather_rows_gradient(self):
        rng = np.random.default_rng(14)
        (x,) = make_params(rng, (5, 3))
        idx = np.array([0, 2, 2, 4])

        def fn(a):
            return ops.sum_all(ops.power(ops.gather_rows(a, idx), 2))

        check_grad(fn, [x], 0)

    def test_upsample_avgpool_gradients(self):
        rng = np.random.default_rng(15)
        (x,) = make_params(rng, (2, 4, 4))

        def fn(a):
            y = ops.upsample_nearest2x(a)
            y = ops.avg_pool2d(y, 2)
            return ops.sum_all(ops.mul(y, y))

        check_grad(fn, [x], 0)

    def test_scatter_image_gradient(self):
        rng = np.random.default_rng(16)
        (v,) = make_params(rng, (4, 3))
        idx = np.array([0, 5, 7, 11])

        def fn(a):
            img = ops.scatter_image(a, idx, 3, 4, (1.0, 1.0, 1.0))
            return ops.sum_all(ops.mul(img, img))

        check_grad(fn, [v], 0)


class TestHashInterp:
    def test_deterministic(self):
        table = Tensor(RNG.standard_normal((64, 2)).astype(np.float32))
        xyz = Tensor(RNG.uniform(0, 1, (6, 3)).astype(np.float32))
        a = ops.hash_interp(table, xyz, resolution=8).data
        b = ops.hash_interp(table, xyz, resolution=8).data
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients(self, seed):
        rng = np.random.default_rng(400 + seed)
        table = Tensor(rng.standard_normal((32, 2)).astype(np.float32) * 0.5,
                       requires_grad=True)
        # keep sample points away from cell boundaries, where the trilinear
        # derivative legitimately jumps between hashed corner sets
        cells = rng.integers(0, 4, (4, 3))
        frac = rng.uniform(0.15, 0.85, (4, 3))
        xyz = Tensor(((cells + frac) / 4.0).astype(np.float32),
                     requires_grad=True)

        def fn(t, p):
            y = ops.hash_interp(t, p, resolution=4)
            return ops.sum_all(ops.mul(y, y))

        check_grad(fn, [table, xyz], 0)
        check_grad(fn, [table, xyz], 1, h=5e-4, tol=2e-3)


class TestTape:
    def test_backward_twice_is_error(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            y = ops.mul(x, x)
        tape.backward(y)
        with pytest.raises(TapeError):
            tape.backward(y)

    def test_nested_tapes_rejected(self):
        with Tape():
            with pytest.raises(TapeError):
                with Tape():
                    pass

    def test_backward_during_recording_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        with pytest.raises(TapeError):
            with Tape() as tape:
                y = ops.mul(x, x)
                tape.backward(y)

    def test_seed_gradient_injection(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = ops.mul(x, 3.0)
        tape.backward(y, seed=np.array([1.0, 10.0], dtype=np.float32))
        np.testing.assert_allclose(x.grad, [3.0, 30.0])

    def test_unused_tensor_grad_zero(self):
        x = Tensor([1.0], requires_grad=True)
        y = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            _unused = ops.mul(y, 2.0)
            loss = ops.sum_all(ops.mul(x, x))
        tape.backward(loss)
        np.testing.assert_array_equal(y.grad, [0.0])

    def test_no_tape_no_recording(self):
        x = Tensor([1.0], requires_grad=True)
        y = ops.mul(x, x)
        assert not y.requires_grad


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        state = adam_state([p])
        before = p.data.copy()
        adam_step([p], [np.zeros(2, np.float32)], state, lr=0.1)
        np.testing.assert_array_equal(p.data, before)
        assert state["step"] == 1

    def test_descent_direction_on_quadratic(self):
        p = Tensor([1.0], requires_grad=True)
        state = adam_state([p])
        adam_step([p], [2.0 * p.data], state, lr=0.1)
        assert p.data[0] < 1.0

    def test_converges_on_convex_quadratic(self):
        rng = np.random.default_rng(17)
        target = rng.standard_normal(6).astype(np.float32)
        p = Tensor(np.zeros(6), requires_grad=True)
        opt = Adam([p], lr=0.05)
        for _ in range(200):
            p.grad = 2.0 * (p.data - target)
            opt.step()
        grad_norm = np.linalg.norm(2.0 * (p.data - target))
        assert grad_norm < 1e-3

    def test_non_finite_gradient_raises(self):
        p = Tensor([1.0], requires_grad=True)
        state = adam_state([p])
        with pytest.raises(AutodiffError):
            adam_step([p], [np.array([np.nan], np.float32)], state, lr=0.1)


class TestContainer:
    def test_roundtrip(self, tmp_path):
        arr = RNG.standard_normal((3, 4, 5)).astype(np.float32)
        path = tmp_path / "t.ttns"
        save_tensor(path, arr)
        np.testing.assert_array_equal(load_tensor(path), arr)

    def test_header_layout(self, tmp_path):
        arr = np.arange(6, dtype=np.float32).reshape(2, 3)
        path = tmp_path / "t.ttns"
        save_tensor(path, arr)
        raw = path.read_bytes()
        assert raw[:4] == b"TTNS"
        import struct
        version, rank = struct.unpack("<II", raw[4:12])
        assert (version, rank) == (1, 2)
        dims = struct.unpack("<2Q", raw[12:28])
        assert dims == (2, 3)
        np.testing.assert_array_equal(
            np.frombuffer(raw[28:], dtype="<f4").reshape(2, 3), arr
        )

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ttns"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ContainerError):
            load_tensor(path)
