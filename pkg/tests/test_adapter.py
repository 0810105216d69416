import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blocklora import linalg as la
from blocklora.adapter import (AdapterConfig, BlockLoRAAdapter, FrozenLinear, LoRAAdapter,
                               block_identity_check, count_params, forward, forward_block,
                               forward_block_per_block, forward_lora, init_adapter, merge,
                               partition, square_proportion, unmerge)
from blocklora.errors import DivisibilityError, ShapeError, StateError

from conftest import naive_matmul


def _block(rng, k, d, r, n, std=0.5):
    rb = r // n
    return BlockLoRAAdapter(rng.normal(0, std, (k, rb)),
                            [rng.normal(0, std, (rb, d)) for _ in range(n)])


def test_config_validation():
    with pytest.raises(DivisibilityError):
        AdapterConfig(rank=4, blocks=3)
    cfg = AdapterConfig(rank=8, blocks=4)
    assert cfg.block_rank == 2 and not cfg.is_vanilla
    assert AdapterConfig(rank=2, blocks=1).is_vanilla


def test_frozen_weight_is_read_only():
    W = np.ones((2, 2))
    layer = FrozenLinear(W)
    W[0, 0] = 5.0
    assert layer.W[0, 0] == 1.0
    with pytest.raises(ValueError):
        layer.W[0, 0] = 3.0


def test_lora_forward_against_naive(rng):
    x, W = rng.normal(size=(3, 5)), rng.normal(size=(5, 4))
    A, B = rng.normal(size=(5, 2)), rng.normal(size=(2, 4))
    ad = LoRAAdapter(A, B, scaling=0.5)
    out = forward_lora(x, FrozenLinear(W), ad)
    xw = np.array(naive_matmul(x.tolist(), W.tolist()))
    xab = np.array(naive_matmul(naive_matmul(x.tolist(), A.tolist()), B.tolist()))
    assert np.max(np.abs(out - (xw + 0.5 * xab))) <= 1e-12


def test_zero_init_leaves_layer_unchanged(rng):
    cfg = AdapterConfig(rank=4, blocks=2)
    ad = init_adapter(cfg, 6, 5, seed=0)
    layer = FrozenLinear(rng.normal(size=(6, 5)))
    x = rng.normal(size=(3, 6))
    assert np.array_equal(forward(x, layer, ad), layer.forward(x))


def test_init_n1_is_vanilla():
    ad = init_adapter(AdapterConfig(rank=2, blocks=1), 4, 4, seed=0)
    assert isinstance(ad, LoRAAdapter)


@pytest.mark.parametrize("r,n", [(2, 2), (4, 2), (4, 4), (8, 4), (16, 8)])
def test_block_identity_exact_partition(rng, r, n):
    A, B = rng.normal(size=(16, r)), rng.normal(size=(r, 12))
    assert block_identity_check(A, B, n) <= 1e-12


def test_partition_shapes_and_divisibility(rng):
    A, B = rng.normal(size=(6, 4)), rng.normal(size=(4, 3))
    a, b = partition(A, B, 2)
    assert [x.shape for x in a] == [(6, 2), (6, 2)]
    assert [x.shape for x in b] == [(2, 3), (2, 3)]
    with pytest.raises(DivisibilityError):
        partition(A, B, 3)


def test_n1_is_bitwise_vanilla(rng):
    """A Block-LoRA adapter with one block is a plain LoRA adapter."""
    x, W = rng.normal(size=(5, 8)), rng.normal(size=(8, 6))
    A, B = rng.normal(size=(8, 4)), rng.normal(size=(4, 6))
    layer = FrozenLinear(W)
    a = forward_lora(x, layer, LoRAAdapter(A, B, 0.7))
    b = forward_block(x, layer, BlockLoRAAdapter(A, [B], 0.7))
    assert a.tobytes() == b.tobytes()


def test_shared_block_equals_tiled_lora(rng):
    x, W = rng.normal(size=(4, 8)), rng.normal(size=(8, 6))
    ad = _block(rng, 8, 6, 4, 2)
    layer = FrozenLinear(W)
    tiled = LoRAAdapter(np.concatenate([ad.A_s] * 2, axis=1), np.concatenate(ad.B_blocks, axis=0))
    assert np.max(np.abs(forward_block(x, layer, ad) - forward_lora(x, layer, tiled))) <= 1e-12


def test_fast_path_matches_per_block(rng):
    x, W = rng.normal(size=(4, 8)), rng.normal(size=(8, 6))
    ad = _block(rng, 8, 6, 8, 4)
    layer = FrozenLinear(W)
    assert np.max(np.abs(forward_block(x, layer, ad) - forward_block_per_block(x, layer, ad))) <= 1e-12


def test_block_sum_cache_invalidation(rng):
    ad = _block(rng, 4, 3, 4, 2)
    first = ad.up_sum()
    assert ad.up_sum() is first
    c = la.MacCounter()
    ad.up_sum(c)
    assert c.add_count == 0
    new = [b + 1.0 for b in ad.B_blocks]
    ad.B_blocks = new
    c = la.MacCounter()
    s = ad.up_sum(c)
    assert c.add_count == 2 * 3
    assert np.array_equal(s, new[0] + new[1])


def test_set_parameters_rejects_bad_shape(rng):
    ad = _block(rng, 4, 3, 4, 2)
    with pytest.raises(ShapeError):
        ad.set_parameters({"B0": np.zeros((3, 3))})


def test_merge_unmerge_round_trip(rng):
    W = rng.normal(size=(8, 6))
    layer = FrozenLinear(W)
    ad = _block(rng, 8, 6, 4, 2)
    x = rng.normal(size=(5, 8))
    merged = merge(layer, ad)
    assert np.max(np.abs(merged.forward(x) - forward_block(x, layer, ad))) <= 1e-10
    original, back = unmerge(merged)
    assert original.W.tobytes() == W.tobytes()
    assert back is ad


def test_merged_forward_mac_count(rng):
    merged = merge(FrozenLinear(rng.normal(size=(8, 6))), _block(rng, 8, 6, 4, 2))
    c = la.MacCounter()
    merged.forward(rng.normal(size=(5, 8)), c)
    assert c.mac_count == 5 * 8 * 6


def test_merge_state_errors(rng):
    layer = FrozenLinear(rng.normal(size=(4, 4)))
    ad = _block(rng, 4, 4, 2, 2)
    merged = merge(layer, ad)
    with pytest.raises(StateError):
        merge(merged, ad)
    with pytest.raises(StateError):
        unmerge(layer)


def test_merge_f32_tolerance(rng):
    W = rng.normal(size=(16, 16)).astype(np.float32)
    layer = FrozenLinear(W)
    ad = BlockLoRAAdapter(rng.normal(0, 0.5, (16, 1)).astype(np.float32),
                          [rng.normal(0, 0.5, (1, 16)).astype(np.float32) for _ in range(2)])
    x = rng.normal(size=(4, 16)).astype(np.float32)
    assert np.max(np.abs(merge(layer, ad).forward(x) - forward_block(x, layer, ad))) <= 1e-4


def test_forward_shape_errors(rng):
    layer = FrozenLinear(rng.normal(size=(4, 3)))
    ad = _block(rng, 4, 3, 2, 2)
    with pytest.raises(ShapeError):
        forward_block(rng.normal(size=(2, 5)), layer, ad)
    with pytest.raises(ShapeError):
        forward_block(rng.normal(size=(2, 4)), FrozenLinear(np.ones((4, 4))), ad)


def test_param_counts_square():
    p = count_params(AdapterConfig(rank=2, blocks=2), [(512, 512)])
    assert (p.lora_total, p.block_total) == (2048, 1536)
    assert p.proportion == 0.75
    for n in (1, 2, 4, 8):
        p = count_params(AdapterConfig(rank=8, blocks=n), [(64, 64), (64, 64)])
        assert p.proportion == square_proportion(n)


def test_num_trainable_matches_count(rng):
    cfg = AdapterConfig(rank=4, blocks=2)
    ad = init_adapter(cfg, 10, 7, seed=1)
    assert ad.num_trainable() == count_params(cfg, [(10, 7)]).block_total
    frozen = init_adapter(AdapterConfig(rank=4, blocks=2, freeze_down=True), 10, 7, seed=1)
    assert frozen.num_trainable() == 4 * 7


pairs = st.sampled_from([(1, 1), (2, 1), (2, 2), (4, 2), (4, 4), (6, 3), (8, 4), (8, 8)])


@settings(max_examples=60, deadline=None)
@given(pairs, st.integers(1, 20), st.integers(1, 20), st.integers(0, 2 ** 32 - 1))
def test_block_identity_property(rn, k, d, seed):
    r, n = rn
    rng = np.random.default_rng(seed)
    assert block_identity_check(rng.normal(size=(k, r)), rng.normal(size=(r, d)), n) <= 1e-12
