"""Tests for the ring-partitioned visual prompt and its checkpoint codec."""

import random

import pytest
import torch

from kiop.exceptions import CorruptCheckpoint, InvalidDepth, InvalidPartition, ShapeMismatch
from kiop.prompt import (
    compose,
    decode_prompt,
    encode_prompt,
    fit_to_hole,
    header_size,
    init_prompt,
    load_prompt,
    make_partition,
    param_count,
    save_prompt,
)


def random_partition(rng: random.Random):
    sides = [rng.randint(2, 24)]
    for _ in range(rng.randint(1, 4)):
        sides.append(sides[-1] + rng.randint(1, 12))
    return make_partition(sides, rng.choice([1, 3]))


class TestPartition:
    """Partition validation and geometry."""

    def test_default_two_model_partition(self):
        partition = make_partition([32, 36, 128], 3)
        assert partition.ring_count == 2
        assert partition.hole_side == 32
        assert partition.canvas_side == 128
        assert partition.offset(1) == 2
        assert partition.offset(2) == 46

    def test_three_model_partition(self):
        assert make_partition([32, 36, 128, 224], 3).ring_count == 3

    @pytest.mark.parametrize("sides", [[32, 32, 128], [32, 30], [32], [], [0, 4]])
    def test_rejects_invalid_sides(self, sides):
        """Zero-width, shrinking and missing rings are rejected."""
        with pytest.raises(InvalidPartition):
            make_partition(sides)

    def test_odd_width_ring(self):
        """The extra pixel of an odd ring goes to the bottom/right bands."""
        partition = make_partition([32, 35], 3)
        assert partition.margins(1) == (1, 2)
        assert partition.offset(1) == 1
        assert partition.live_count(1) == 3 * (35 ** 2 - 32 ** 2)
        mask = partition.ring_mask(1)
        assert not bool(mask[1:33, 1:33].any())
        assert bool(mask[0].all()) and bool(mask[33:].all()) and bool(mask[:, 33:].all())

    def test_mask_tiling(self):
        """Ring masks are disjoint and tile the canvas together with the hole."""
        rng = random.Random(5)
        for _ in range(20):
            partition = random_partition(rng)
            masks = [partition.canvas_mask(r) for r in range(1, partition.ring_count + 1)]
            total = sum(int(m.sum()) for m in masks)
            assert total + partition.hole_side ** 2 == partition.canvas_side ** 2
            union = torch.zeros_like(masks[0], dtype=torch.int64)
            for m in masks:
                union += m.long()
            assert int(union.max()) == 1

    def test_bad_ring_index(self):
        with pytest.raises(InvalidDepth):
            make_partition([32, 36]).offset(2)


class TestInitPrompt:
    """Prompt initialization schemes."""

    def test_zeros(self):
        prompt = init_prompt(make_partition([32, 36, 128]), "zeros")
        assert all(float(p.abs().sum()) == 0.0 for p in prompt.ring_params)

    def test_uniform_is_deterministic(self):
        partition = make_partition([32, 36, 128])
        first = init_prompt(partition, "uniform", seed=7)
        second = init_prompt(partition, "uniform", seed=7)
        for a, b in zip(first.ring_params, second.ring_params):
            assert torch.equal(a, b)

    def test_uniform_respects_bounds_and_masks(self):
        prompt = init_prompt(make_partition([8, 12, 20]), "uniform", seed=1, low=-0.1, high=0.1)
        for param, mask in zip(prompt.ring_params, prompt.ring_masks):
            assert float(param.abs().max()) <= 0.1
            assert float(param[:, ~mask].abs().sum()) == 0.0

    def test_unknown_scheme(self):
        with pytest.raises(ValueError):
            init_prompt(make_partition([8, 12]), "gaussian")


class TestParamCount:
    """Live-parameter accounting."""

    def test_default_partition(self):
        assert param_count(init_prompt(make_partition([32, 36, 128], 3))) == 46080

    def test_undivided_single_ring(self):
        assert param_count(init_prompt(make_partition([32, 128], 3))) == 46080

    def test_three_ring_partition(self):
        assert param_count(init_prompt(make_partition([32, 36, 128, 224], 3))) == 147456

    def test_ring_counts(self):
        partition = make_partition([32, 36, 128], 3)
        assert partition.live_count(1) == 816
        assert partition.live_count(2) == 45264


class TestCompose:
    """Composition of images with prompt rings."""

    @pytest.fixture
    def prompt(self):
        return init_prompt(make_partition([8, 12, 20], 3), "uniform", seed=3)

    def test_output_sides(self, prompt):
        x = torch.randn(2, 3, 8, 8)
        assert compose(x, prompt, 1).shape == (2, 3, 12, 12)
        assert compose(x, prompt, 2).shape == (2, 3, 20, 20)

    def test_zero_prompt_interior_identity(self):
        prompt = init_prompt(make_partition([32, 36, 128]), "zeros")
        x = torch.randn(2, 3, 32, 32)
        out = compose(x, prompt, 2)
        assert torch.equal(out[:, :, 48:80, 48:80], x)

    def test_interior_preserved(self, prompt):
        x = torch.randn(3, 3, 8, 8)
        out = compose(x, prompt, 2)
        assert torch.equal(out[:, :, 6:14, 6:14], x)

    def test_ring_pixels_hold_prompt_values(self, prompt):
        out = compose(torch.zeros(1, 3, 8, 8), prompt, 1)
        mask = prompt.ring_masks[0]
        assert torch.equal(out[0][:, mask], prompt.ring_params[0][:, mask])

    def test_nesting_consistency(self, prompt):
        """Depth d equals the centered crop of depth d+1."""
        x = torch.randn(2, 3, 8, 8)
        shallow = compose(x, prompt, 1)
        deep = compose(x, prompt, 2)
        assert torch.equal(deep[:, :, 4:16, 4:16], shallow)

    def test_gradient_support(self, prompt):
        """Rings receive gradient only on their mask; deeper rings get none."""
        x = torch.randn(2, 3, 8, 8, requires_grad=True)
        compose(x, prompt, 1).sum().backward()
        grad1 = prompt.ring_params[0].grad
        mask1 = prompt.ring_masks[0]
        assert bool((grad1[:, mask1] != 0).all())
        assert float(grad1[:, ~mask1].abs().sum()) == 0.0
        assert prompt.ring_params[1].grad is None or float(prompt.ring_params[1].grad.abs().sum()) == 0.0
        assert x.grad is not None

    def test_odd_width_nesting(self):
        """Odd-width rings nest exactly, with the hole offset by the top/left margins."""
        prompt = init_prompt(make_partition([8, 11, 16], 3), "uniform", seed=4)
        x = torch.randn(2, 3, 8, 8)
        shallow = compose(x, prompt, 1)
        deep = compose(x, prompt, 2)
        assert shallow.shape == (2, 3, 11, 11)
        assert deep.shape == (2, 3, 16, 16)
        assert torch.equal(shallow[:, :, 1:9, 1:9], x)
        assert torch.equal(deep[:, :, 2:13, 2:13], shallow)

    def test_canvas_masks_match_composition(self):
        """Pixels outside every canvas mask are exactly the composed image."""
        rng = random.Random(9)
        for _ in range(20):
            partition = random_partition(rng)
            prompt = init_prompt(partition, "uniform", seed=rng.randint(0, 1000))
            x = torch.randn(1, partition.channels, partition.hole_side, partition.hole_side)
            out = compose(x, prompt, partition.ring_count)
            covered = torch.zeros(partition.canvas_side, partition.canvas_side, dtype=torch.bool)
            for ring in range(1, partition.ring_count + 1):
                covered |= partition.canvas_mask(ring)
            hole = out[0][:, ~covered].reshape(x.shape[1:])
            assert torch.equal(hole, x[0])

    @pytest.mark.parametrize("depth", [0, 3])
    def test_depth_out_of_range(self, prompt, depth):
        with pytest.raises(InvalidDepth):
            compose(torch.zeros(1, 3, 8, 8), prompt, depth)

    def test_wrong_input_side(self, prompt):
        with pytest.raises(ShapeMismatch):
            compose(torch.zeros(1, 3, 10, 10), prompt, 1)

    def test_fit_to_hole(self):
        x = torch.rand(2, 3, 28, 28)
        assert fit_to_hole(x, 32).shape == (2, 3, 32, 32)
        assert fit_to_hole(x, 28) is x


class TestCheckpoint:
    """Prompt checkpoint format."""

    def test_round_trip_bit_exact(self, tmp_path):
        prompt = init_prompt(make_partition([32, 36, 128]), "uniform", seed=11)
        path = tmp_path / "prompt.kiop"
        size = save_prompt(prompt, path)
        loaded = load_prompt(path)
        assert size == 184345
        assert loaded.partition == prompt.partition
        for ring in (1, 2):
            assert torch.equal(loaded.live_values(ring), prompt.live_values(ring))

    def test_odd_partition_round_trip(self):
        prompt = init_prompt(make_partition([32, 35, 64]), "uniform", seed=2)
        loaded = decode_prompt(encode_prompt(prompt))
        assert loaded.partition.sides == (32, 35, 64)
        for ring in (1, 2):
            assert torch.equal(loaded.live_values(ring), prompt.live_values(ring))

    def test_header_layout(self):
        prompt = init_prompt(make_partition([32, 36, 128]))
        data = encode_prompt(prompt)
        assert data[:5] == b"KIOP1"
        assert header_size(prompt.partition) == 25
        assert len(data) == 25 + 4 * 46080

    def test_ring_scan_order(self):
        """Payload starts with the top band of ring 1, row-major."""
        prompt = init_prompt(make_partition([2, 4], 1))
        values = torch.arange(12, dtype=torch.float32)
        prompt.set_live_values(1, values)
        grid = prompt.ring_params[0][0]
        assert grid[0].tolist() == [0.0, 1.0, 2.0, 3.0]
        assert grid[3].tolist() == [4.0, 5.0, 6.0, 7.0]
        assert grid[1:3, 0].tolist() == [8.0, 9.0]
        assert grid[1:3, 3].tolist() == [10.0, 11.0]
        assert torch.equal(decode_prompt(encode_prompt(prompt)).live_values(1), values)

    def test_bad_magic(self):
        data = bytearray(encode_prompt(init_prompt(make_partition([8, 12]))))
        data[0:5] = b"XXXXX"
        with pytest.raises(CorruptCheckpoint):
            decode_prompt(bytes(data))

    def test_truncated_payload(self):
        data = encode_prompt(init_prompt(make_partition([8, 12])))
        with pytest.raises(CorruptCheckpoint):
            decode_prompt(data[:-4])

    def test_missing_file(self, tmp_path):
        with pytest.raises(CorruptCheckpoint):
            load_prompt(tmp_path / "absent.kiop")
