import itertools
import sys, os, unittest, tempfile

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "../src")))
import torch
from torch.testing import assert_close
from collections import OrderedDict
from unittest.mock import MagicMock
from geopredict_architecture import TokenBlock
from numerics import ShapeError
from policy_core import (
    ActionExpert,
    BlockMaskedSequence,
    ContextEmbedder,
    Trunk,
    build_block_mask,
    build_kv_cache,
    cfm_loss,
    embed_context,
    flow_sample,
    load_checkpoint,
    predict_velocity,
    sample_actions,
    save_checkpoint,
    total_loss,
    trunk_forward,
)


def random_sequence(sizes, dim, dtype=torch.float64, seed=0, future=None):
    generator = torch.Generator().manual_seed(seed)
    future = sizes[TokenBlock.QUERY] if future is None else future
    return BlockMaskedSequence(
        tokens=torch.randn(2, sum(sizes), dim, generator=generator, dtype=dtype),
        sizes=sizes,
        num_future_queries=future,
        num_spatial_queries=sizes[TokenBlock.QUERY] - future,
    )


class TestBlockMask(unittest.TestCase):
    def test_exhaustive_against_block_rule(self):
        for total in range(1, 17):
            for cuts in itertools.combinations(range(total + 4), 4):
                # stars and bars: every 5-tuple of non-negative sizes summing to total
                bounds = (-1,) + cuts + (total + 4,)
                sizes = tuple(bounds[i + 1] - bounds[i] - 1 for i in range(5))
                owner = [block for block, size in enumerate(sizes) for _ in range(size)]
                expected = torch.tensor([[owner[k] <= owner[q] for k in range(total)] for q in range(total)])
                self.assertTrue(torch.equal(build_block_mask(sizes), expected), sizes)

    def test_invalid_sizes(self):
        with self.assertRaises(ValueError):
            build_block_mask((0, 0, 0, 0, 0))
        with self.assertRaises(ValueError):
            build_block_mask((1, 2, 3))
        with self.assertRaises(ValueError):
            build_block_mask((1, -1, 0, 1, 0))

    def test_sequence_validation(self):
        with self.assertRaises(ShapeError):
            BlockMaskedSequence(torch.zeros(1, 5, 4), (1, 1, 1, 1, 0))
        with self.assertRaises(ValueError):
            BlockMaskedSequence(torch.zeros(1, 4, 4), (1, 1, 1, 1, 0), num_future_queries=0)
        sequence = BlockMaskedSequence(torch.zeros(1, 9, 4), (2, 1, 3, 1, 2), num_future_queries=1, num_spatial_queries=2)
        self.assertEqual(sequence.future_query_slice, slice(3, 4))
        self.assertEqual(sequence.spatial_query_slice, slice(4, 6))
        self.assertEqual(sequence.block_slice(TokenBlock.ACTION_NOISE), slice(7, 9))
        self.assertEqual(sequence.context_length, 7)
        with self.assertRaises(ValueError):
            sequence.with_actions(torch.zeros(1, 2, 4))


class TestContextEmbedder(unittest.TestCase):
    def setUp(self):
        torch.manual_seed(0)
        self.embedder = ContextEmbedder(4, 12, 8, 4, 4, 3).double()
        self.images = torch.rand(2, 2, 8, 8, dtype=torch.float64)
        self.state = torch.rand(2, 4, dtype=torch.float64)

    def test_block_sizes(self):
        sequence = embed_context(
            self.embedder,
            torch.tensor([0, 3]),
            self.images,
            self.state,
            history_tokens=torch.randn(2, 3, 12, dtype=torch.float64),
            spatial_tokens=torch.randn(8, 12, dtype=torch.float64),
        )
        # instruction + 2 views x 4 patches, K history, K future + 8 spatial, state, no actions
        self.assertEqual(sequence.sizes, (9, 3, 11, 1, 0))
        self.assertEqual(sequence.num_future_queries, 3)
        self.assertEqual(sequence.num_spatial_queries, 8)

    def test_disabled_pathways_leave_empty_blocks(self):
        sequence = self.embedder(torch.tensor([1, 2]), self.images, self.state, use_future_queries=False)
        self.assertEqual(sequence.sizes, (9, 0, 0, 1, 0))

    def test_unknown_task_id(self):
        with self.assertRaises(ValueError):
            self.embedder(torch.tensor([0, 4]), self.images, self.state)

    def test_patch_order_is_row_major_per_view(self):
        images = torch.arange(2 * 64, dtype=torch.float64).reshape(1, 2, 8, 8)
        patches = self.embedder.patchify(images)
        self.assertEqual(tuple(patches.shape), (1, 8, 16))
        self.assertEqual(patches[0, 1, 0].item(), 4.0)
        self.assertEqual(patches[0, 2, 0].item(), 32.0)
        self.assertEqual(patches[0, 4, 0].item(), 64.0)


class TestTrunk(unittest.TestCase):
    def setUp(self):
        torch.manual_seed(1)
        self.trunk = Trunk(12, 3, 2).double()

    def test_earlier_blocks_ignore_later_blocks(self):
        sizes = (3, 2, 2, 1, 3)
        sequence = random_sequence(sizes, 12)
        changed_tokens = sequence.tokens.clone()
        changed_tokens[:, 5:] += 1.0  # query, state and action blocks
        changed = BlockMaskedSequence(changed_tokens, sizes, 2, 0)
        out = trunk_forward(sequence, None, self.trunk)
        out_changed = self.trunk(changed)
        self.assertTrue(torch.equal(out[:, :5], out_changed[:, :5]))
        self.assertFalse(torch.equal(out[:, 5:], out_changed[:, 5:]))

    def test_permuting_tokens_within_blocks_permutes_outputs(self):
        sizes = (3, 2, 2, 1, 3)
        sequence = random_sequence(sizes, 12)
        order = torch.tensor([2, 0, 1, 4, 3, 6, 5, 7, 10, 8, 9])
        permuted = BlockMaskedSequence(sequence.tokens[:, order], sizes, 2, 0)
        assert_close(self.trunk(permuted), self.trunk(sequence)[:, order], rtol=0, atol=1e-12)

    def test_single_token_reduces_to_per_token_stack(self):
        sequence = random_sequence((1, 0, 0, 0, 0), 12, future=0)
        x = sequence.tokens
        for layer in self.trunk.layers:
            # a lone token attends only to itself, so attention returns its own value
            value = layer.qkv(layer.norm_attn(x)).chunk(3, dim=-1)[2]
            x = x + layer.proj(value)
            x = x + layer.mlp(layer.norm_mlp(x))
        assert_close(self.trunk(sequence), self.trunk.final_norm(x), rtol=0, atol=1e-12)

    def test_mask_shape_mismatch(self):
        sequence = random_sequence((2, 1, 1, 1, 1), 12)
        with self.assertRaises(ShapeError):
            self.trunk(sequence, torch.ones(5, 5, dtype=torch.bool))

    def test_kv_cache_matches_full_pass_64bit(self):
        sizes = (4, 2, 3, 1, 0)
        context = random_sequence(sizes, 12, future=1)
        actions = torch.randn(2, 5, 12, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
        full = self.trunk(context.with_actions(actions))[:, -5:]
        cache = build_kv_cache(context, self.trunk)
        self.assertEqual(len(cache), 10)
        # same arithmetic as the full pass, but GEMMs over different row counts may reduce in a different order
        assert_close(self.trunk.forward_actions(actions, cache), full, rtol=0, atol=1e-12)

    def test_kv_cache_matches_full_pass_32bit(self):
        trunk = Trunk(12, 3, 2)
        context = random_sequence((4, 2, 3, 1, 0), 12, dtype=torch.float32, future=3)
        actions = torch.randn(2, 5, 12, generator=torch.Generator().manual_seed(2))
        full = trunk(context.with_actions(actions))[:, -5:]
        cached = trunk.forward_actions(actions, trunk.build_kv_cache(context))
        assert_close(cached, full, rtol=1e-5, atol=1e-6)

    def test_cache_rejects_action_tokens(self):
        with self.assertRaises(ValueError):
            self.trunk.build_kv_cache(random_sequence((2, 1, 1, 1, 2), 12))


class TestFlowMatching(unittest.TestCase):
    def test_flow_sample_path(self):
        action = torch.randn(2, 4, 7, dtype=torch.float64)
        noise = torch.randn(2, 4, 7, dtype=torch.float64)
        sample = flow_sample(action, noise, torch.tensor([0.0, 1.0], dtype=torch.float64))
        assert_close(sample.noisy[0], noise[0])
        assert_close(sample.noisy[1], action[1])
        assert_close(sample.target, action - noise)
        with self.assertRaises(ValueError):
            flow_sample(action, noise, torch.tensor([0.5, 1.5], dtype=torch.float64))

    def test_cfm_loss_is_mean_over_entries(self):
        action = torch.zeros(1, 2, 7, dtype=torch.float64)
        sample = flow_sample(action, torch.zeros_like(action), torch.tensor([0.5], dtype=torch.float64))
        velocity = torch.zeros_like(action)
        velocity[0, 0, 0] = 2.0
        self.assertAlmostEqual(cfm_loss(velocity, sample).item(), 4.0 / 14)

    def test_total_loss_weights(self):
        a, t, d = (torch.tensor(v, dtype=torch.float64) for v in (1.5, 0.25, 2.0))
        self.assertAlmostEqual(total_loss(a, t, d, (1.0, 2.0, 0.5)).item(), 1.5 + 0.5 + 1.0, delta=1e-12)
        with self.assertRaises(ValueError):
            total_loss(a, t, d, (1.0, -1.0, 1.0))


class TestSampler(unittest.TestCase):
    def setUp(self):
        torch.manual_seed(3)
        self.trunk = Trunk(12, 2, 2).double()
        self.expert = ActionExpert(12, 4).double()
        self.cache = self.trunk.build_kv_cache(random_sequence((3, 1, 1, 1, 0), 12))

    def test_exact_field_recovers_target(self):
        target = torch.randn(2, 4, 7, dtype=torch.float64)
        noise = torch.randn(2, 4, 7, dtype=torch.float64)
        field = MagicMock(side_effect=lambda x, s: target - noise)
        result = sample_actions(self.cache, self.trunk, self.expert, steps=10, noise=noise, velocity_fn=field)
        assert_close(result, target, rtol=0, atol=1e-12)
        self.assertEqual(field.call_count, 10)
        times = [call.args[1][0].item() for call in field.call_args_list]
        assert_close(torch.tensor(times, dtype=torch.float64), torch.arange(10, dtype=torch.float64) / 10)

    def test_constant_field_shifts_noise(self):
        noise = torch.randn(2, 4, 7, dtype=torch.float64)
        constant = torch.linspace(-1.0, 1.0, 28, dtype=torch.float64).reshape(1, 4, 7)
        for steps in (1, 3, 7, 10):
            result = sample_actions(
                self.cache, self.trunk, self.expert, steps=steps, noise=noise, velocity_fn=lambda x, s: constant.expand_as(x)
            )
            assert_close(result, noise + constant, rtol=0, atol=1e-12, msg=f"steps={steps}")

    def test_single_step_and_seeded_determinism(self):
        noise = torch.randn(2, 4, 7, dtype=torch.float64)
        one = sample_actions(self.cache, self.trunk, self.expert, steps=1, noise=noise)
        velocity = predict_velocity(noise, torch.zeros(2, dtype=torch.float64), self.cache, self.trunk, self.expert)
        assert_close(one, noise + velocity, rtol=0, atol=1e-14)
        first = sample_actions(self.cache, self.trunk, self.expert, generator=torch.Generator().manual_seed(5))
        second = sample_actions(self.cache, self.trunk, self.expert, generator=torch.Generator().manual_seed(5))
        self.assertTrue(torch.equal(first, second))
        with self.assertRaises(ValueError):
            sample_actions(self.cache, self.trunk, self.expert, steps=0)

    def test_cache_is_not_mutated(self):
        before = [k.clone() for k in self.cache.keys]
        sample_actions(self.cache, self.trunk, self.expert, steps=3, generator=torch.Generator().manual_seed(0))
        for old, new in zip(before, self.cache.keys):
            self.assertTrue(torch.equal(old, new))


class TestCheckpoint(unittest.TestCase):
    def test_round_trip(self):
        tensors = OrderedDict(
            [
                ("w", torch.randn(3, 4, dtype=torch.float64)),
                ("b", torch.randn(4, dtype=torch.float32)),
                ("iteration", torch.tensor(7, dtype=torch.int64)),
                ("rng", torch.randint(0, 255, (16,), dtype=torch.uint8)),
            ]
        )
        with tempfile.TemporaryDirectory() as tmp:
            save_checkpoint(tmp, tensors)
            loaded = load_checkpoint(tmp)
        self.assertEqual(list(loaded), list(tensors))
        for name in tensors:
            self.assertTrue(torch.equal(loaded[name], tensors[name]))

    def test_manifest_mismatch(self):
        with tempfile.TemporaryDirectory() as tmp:
            save_checkpoint(tmp, OrderedDict(w=torch.zeros(2, 2, dtype=torch.float64)))
            with open(os.path.join(tmp, "manifest.txt"), "w", encoding="utf-8") as handle:
                handle.write("w=float64:2,3\n")
            with self.assertRaises(ValueError):
                load_checkpoint(tmp)


if __name__ == "__main__":
    unittest.main()
