import io
import math
import sys, os, unittest, tempfile

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "../src")))
import torch
from torch.autograd import gradcheck
from torch.testing import assert_close
from numerics import (
    EXP_INPUT_CEILING,
    ShapeError,
    absolute_error,
    add,
    backward,
    build_spatial_encoding,
    build_temporal_encoding,
    concat,
    exp,
    first_non_finite,
    layer_norm,
    load_tensor,
    masked_softmax,
    matmul,
    mul,
    near_thirds_split,
    read_tensor,
    reduce_mean,
    reduce_sum,
    reshape,
    save_tensor,
    sigmoid,
    sinusoidal_embedding,
    slice_along,
    squared_error,
    sub,
    tanh,
    transpose,
    write_tensor,
)


class TestShapeChecks(unittest.TestCase):
    def test_matmul_inner_mismatch_names_op_and_shapes(self):
        with self.assertRaises(ShapeError) as ctx:
            matmul(torch.zeros(2, 3), torch.zeros(4, 5))
        self.assertIn("matmul", str(ctx.exception))
        self.assertIn("(2, 3)", str(ctx.exception))
        self.assertIn("(4, 5)", str(ctx.exception))

    def test_add_broadcasts_trailing_dims(self):
        out = add(torch.ones(2, 3), torch.ones(3))
        self.assertEqual(tuple(out.shape), (2, 3))
        with self.assertRaises(ShapeError):
            add(torch.ones(2, 3), torch.ones(2))

    def test_reshape_and_concat_and_slice(self):
        with self.assertRaises(ShapeError):
            reshape(torch.zeros(6), (4, 2))
        with self.assertRaises(ShapeError):
            concat([torch.zeros(2, 3), torch.zeros(2, 4)], dim=0)
        self.assertEqual(tuple(concat([torch.zeros(2, 3), torch.zeros(2, 4)], dim=1).shape), (2, 7))
        with self.assertRaises(ShapeError):
            slice_along(torch.zeros(3, 4), 1, 2, 5)

    def test_shape_error_is_value_error(self):
        self.assertTrue(issubclass(ShapeError, ValueError))


class TestElementwise(unittest.TestCase):
    def test_exp_is_clamped(self):
        out = exp(torch.tensor([0.0, 1000.0], dtype=torch.float64))
        self.assertEqual(out[0].item(), 1.0)
        self.assertEqual(out[1].item(), math.exp(EXP_INPUT_CEILING))
        self.assertTrue(torch.isfinite(out).all())

    def test_masked_softmax_zero_weight_and_normalised(self):
        scores = torch.randn(3, 5, dtype=torch.float64)
        allowed = torch.tensor([True, False, True, True, False]).expand(3, 5)
        weights = masked_softmax(scores, allowed)
        self.assertTrue((weights[:, 1] == 0).all())
        self.assertTrue((weights[:, 4] == 0).all())
        assert_close(weights.sum(-1), torch.ones(3, dtype=torch.float64))

    def test_first_non_finite_reports_first_in_order(self):
        named = [("a", torch.ones(2)), ("b", torch.tensor([1.0, float("nan")])), ("c", torch.tensor(float("inf")))]
        self.assertEqual(first_non_finite(named), "b")
        self.assertIsNone(first_non_finite([("a", torch.ones(2)), ("skip", None)]))


def _ops(generator):
    """(name, fn, inputs) for every differentiable op, inputs drawn from ``generator``."""

    def rand(*shape):
        return torch.randn(*shape, generator=generator, dtype=torch.float64).requires_grad_(True)

    allowed = torch.tensor([[True, False, True, True], [True, True, False, True]])
    return [
        ("add", add, (rand(2, 3), rand(3))),
        ("sub", sub, (rand(2, 3), rand(2, 3))),
        ("mul", mul, (rand(2, 3), rand(1, 3))),
        ("matmul", matmul, (rand(2, 3), rand(3, 4))),
        ("transpose", transpose, (rand(2, 3),)),
        ("reshape", lambda x: reshape(x, (3, 2)), (rand(2, 3),)),
        ("concat", lambda a, b: concat([a, b], dim=1), (rand(2, 3), rand(2, 2))),
        ("slice", lambda x: slice_along(x, 1, 1, 3), (rand(2, 4),)),
        ("reduce_sum", lambda x: reduce_sum(x, 0), (rand(3, 2),)),
        ("reduce_mean", reduce_mean, (rand(3, 2),)),
        ("exp", exp, (rand(5),)),
        ("tanh", tanh, (rand(5),)),
        ("sigmoid", sigmoid, (rand(5),)),
        ("masked_softmax", lambda s: masked_softmax(s, allowed), (rand(2, 4),)),
        ("layer_norm", layer_norm, (rand(2, 6), rand(6), rand(6))),
        ("squared_error", squared_error, (rand(4), rand(4))),
        ("absolute_error", absolute_error, (rand(4), rand(4))),
    ]


class TestAutodiff(unittest.TestCase):
    def test_every_op_matches_finite_differences(self):
        for seed in range(5):
            for name, fn, inputs in _ops(torch.Generator().manual_seed(seed)):
                with self.subTest(op=name, seed=seed):
                    self.assertTrue(gradcheck(fn, inputs, eps=1e-6, atol=1e-9, rtol=1e-6))

    def test_sum_of_squares_gradient(self):
        x = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64, requires_grad=True)
        backward(reduce_sum(mul(x, x)))
        assert_close(x.grad, torch.tensor([2.0, 4.0, 6.0], dtype=torch.float64), rtol=0, atol=0)

    def test_gradients_accumulate_without_zeroing(self):
        x = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64, requires_grad=True)
        backward(reduce_sum(exp(x)))
        first = x.grad.clone()
        backward(reduce_sum(exp(x)))
        assert_close(x.grad, 2 * first, rtol=0, atol=0)

    def test_backward_rejects_non_scalar(self):
        x = torch.ones(3, dtype=torch.float64, requires_grad=True)
        with self.assertRaises(ValueError):
            backward(mul(x, x))
        self.assertIsNone(x.grad)


class TestEncodings(unittest.TestCase):
    def test_temporal_encoding_rows(self):
        pe = build_temporal_encoding(4, 8)
        self.assertEqual(tuple(pe.shape), (5, 8))
        assert_close(pe[0, 0::2], torch.zeros(4, dtype=torch.float64))
        assert_close(pe[0, 1::2], torch.ones(4, dtype=torch.float64))
        self.assertAlmostEqual(pe[3, 0].item(), math.sin(3.0), places=12)
        self.assertAlmostEqual(pe[3, 3].item(), math.cos(3.0 / 10000 ** (2 / 8)), places=12)

    def test_odd_dims_are_rejected(self):
        with self.assertRaises(ValueError):
            build_temporal_encoding(3, 7)
        with self.assertRaises(ValueError):
            sinusoidal_embedding(torch.zeros(2), 5)

    def test_spatial_encoding_is_axis_separable(self):
        table = build_spatial_encoding((2, 3, 4), 12)
        self.assertEqual(tuple(table.shape), (2, 3, 4, 12))
        # the x block only depends on the x index
        assert_close(table[1, 0, 0, :4], table[1, 2, 3, :4])
        assert_close(table[0, 2, 0, 4:8], table[1, 2, 3, 4:8])
        assert_close(table[0, 0, 3, 8:], table[1, 1, 3, 8:])
        self.assertFalse(torch.equal(table[0, 0, 0, :4], table[1, 0, 0, :4]))

    def test_spatial_encoding_requires_split_when_not_divisible_by_six(self):
        with self.assertRaises(ValueError):
            build_spatial_encoding((2, 2, 2), 32)
        self.assertEqual(near_thirds_split(32), (10, 10, 12))
        self.assertEqual(tuple(build_spatial_encoding((2, 2, 2), 32, near_thirds_split(32)).shape), (2, 2, 2, 32))
        with self.assertRaises(ValueError):
            build_spatial_encoding((2, 2, 2), 12, (3, 3, 6))

    def test_sinusoidal_embedding_shape(self):
        out = sinusoidal_embedding(torch.tensor([0.0, 0.5], dtype=torch.float64), 6)
        self.assertEqual(tuple(out.shape), (2, 6))
        self.assertAlmostEqual(out[1, 0].item(), math.sin(500.0), places=10)


class TestSerialization(unittest.TestCase):
    def test_dtypes_survive_bit_exact(self):
        tensors = [
            torch.randn(3, 4, dtype=torch.float64),
            torch.randn(2, 2, 2, dtype=torch.float32),
            torch.arange(6, dtype=torch.int64).reshape(2, 3),
            torch.tensor([0, 7, 255], dtype=torch.uint8),
            torch.tensor([True, False]),
            torch.tensor(3.5, dtype=torch.float64),
        ]
        buffer = io.BytesIO()
        for tensor in tensors:
            write_tensor(buffer, tensor)
        buffer.seek(0)
        for tensor in tensors:
            loaded = read_tensor(buffer)
            self.assertEqual(loaded.dtype, tensor.dtype)
            self.assertTrue(torch.equal(loaded, tensor))

    def test_bad_magic_and_truncation(self):
        with self.assertRaises(ValueError):
            read_tensor(io.BytesIO(b"XXXX" + b"\0" * 16))
        buffer = io.BytesIO()
        write_tensor(buffer, torch.ones(10, dtype=torch.float64))
        with self.assertRaises(ValueError):
            read_tensor(io.BytesIO(buffer.getvalue()[:-3]))

    def test_file_helpers(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "t.bin")
            tensor = torch.randn(5, dtype=torch.float64)
            save_tensor(path, tensor)
            self.assertTrue(torch.equal(load_tensor(path), tensor))


if __name__ == "__main__":
    unittest.main()
