"""Hand-derived gradients for adapted linear layers.

For ``h = x W + s (x D) U`` with down-projection ``D`` and up-projection
``U`` (``U = B`` for LoRA, ``U = sum_i B_i`` for Block-LoRA)::

    dL/dD = s x^T (dL/dh) U^T
    dL/dU = s (x D)^T (dL/dh)
    dL/dx = (dL/dh) W^T + s (dL/dh) U^T D^T

Every Block-LoRA block enters only through the sum, so each ``dL/dB_i``
equals ``dL/dU``.
"""

from __future__ import annotations

import numpy as np

from . import linalg as la
from .adapter import Adapter, BlockLoRAAdapter
from .errors import ShapeError
from .linalg import Matrix


def backward_adapter(grad_h: Matrix, x: Matrix, ad: Adapter) -> dict[str, Matrix]:
    """Gradients of the loss for the adapter's trainable parameters."""
    k, d = ad.shape
    if x.ndim != 2 or grad_h.ndim != 2 or x.shape[1] != k or grad_h.shape != (x.shape[0], d):
        raise ShapeError(f"x {x.shape} and dL/dh {grad_h.shape} do not fit adapter {ad.shape}")
    s = ad.scaling
    up = ad.up_sum()
    grads: dict[str, Matrix] = {}
    grad_up = la.scale(la.matmul((x @ ad.down).T, grad_h), s)
    if isinstance(ad, BlockLoRAAdapter):
        for i in range(ad.blocks):
            grads[f"B{i}"] = grad_up.copy()
        down_name = "A_s"
    else:
        grads["B"] = grad_up
        down_name = "A"
    if not ad.freeze_down:
        grads[down_name] = la.scale(la.matmul(x.T, grad_h @ up.T), s)
    return grads


def backward_input(grad_h: Matrix, W: Matrix, ad: Adapter | None) -> Matrix:
    """dL/dx through the frozen weight and (optionally) the adapter branch."""
    grad_x = grad_h @ W.T
    if ad is not None:
        grad_x = grad_x + ad.scaling * ((grad_h @ ad.up_sum().T) @ ad.down.T)
    return grad_x


def tanh_backward(grad_out: Matrix, activated: Matrix) -> Matrix:
    return grad_out * (1 - activated * activated)


def zero_grads(ad: Adapter) -> dict[str, Matrix]:
    params = ad.parameters()
    return {name: np.zeros_like(params[name]) for name in ad.trainable()}
