import numpy as np
import pytest

from blocklora.adapter import BlockLoRAAdapter, FrozenLinear, LoRAAdapter, forward
from blocklora.backprop import backward_adapter, backward_input
from blocklora.errors import ShapeError

from conftest import finite_difference, rel_err


def _loss(x, layer, ad, target):
    h = forward(x, layer, ad)
    return 0.5 * float(np.sum((h - target) ** 2)), h - target


def _with(ad, name, value):
    params = dict(ad.parameters())
    params[name] = value
    if isinstance(ad, BlockLoRAAdapter):
        return BlockLoRAAdapter(params["A_s"], [params[f"B{i}"] for i in range(ad.blocks)],
                                ad.scaling, ad.freeze_down)
    return LoRAAdapter(params["A"], params["B"], ad.scaling, ad.freeze_down)


@pytest.mark.parametrize("n", [1, 2, 4])
def test_adapter_gradients(rng, n):
    k, d, r = 6, 5, 4
    x, W, target = rng.normal(size=(3, k)), rng.normal(size=(k, d)), rng.normal(size=(3, d))
    layer = FrozenLinear(W)
    if n == 1:
        ad = LoRAAdapter(rng.normal(size=(k, r)), rng.normal(size=(r, d)), 0.8)
    else:
        ad = BlockLoRAAdapter(rng.normal(size=(k, r // n)),
                              [rng.normal(size=(r // n, d)) for _ in range(n)], 0.8)
    _, grad_h = _loss(x, layer, ad, target)
    grads = backward_adapter(grad_h, x, ad)
    assert set(grads) == set(ad.trainable())
    for name, g in grads.items():
        num = finite_difference(lambda v: _loss(x, layer, _with(ad, name, v), target)[0],
                                ad.parameters()[name])
        assert rel_err(g, num) <= 1e-5, name
    gx = backward_input(grad_h, W, ad)
    assert rel_err(gx, finite_difference(lambda v: _loss(v, layer, ad, target)[0], x)) <= 1e-5


def test_up_blocks_share_gradient(rng):
    ad = BlockLoRAAdapter(rng.normal(size=(4, 1)), [rng.normal(size=(1, 3)) for _ in range(3)])
    grads = backward_adapter(rng.normal(size=(2, 3)), rng.normal(size=(2, 4)), ad)
    assert grads["B0"].tobytes() == grads["B1"].tobytes() == grads["B2"].tobytes()


def test_frozen_down_has_no_gradient(rng):
    ad = BlockLoRAAdapter(rng.normal(size=(4, 1)), [rng.normal(size=(1, 3))] * 2, freeze_down=True)
    grads = backward_adapter(rng.normal(size=(2, 3)), rng.normal(size=(2, 4)), ad)
    assert set(grads) == {"B0", "B1"}


def test_shape_mismatch(rng):
    ad = LoRAAdapter(rng.normal(size=(4, 2)), rng.normal(size=(2, 3)))
    with pytest.raises(ShapeError):
        backward_adapter(rng.normal(size=(2, 4)), rng.normal(size=(2, 4)), ad)
