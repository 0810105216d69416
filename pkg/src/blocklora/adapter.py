"""LoRA and Block-LoRA adapters over frozen linear layers.

A frozen layer computes ``h = x W`` with ``W`` of shape ``k x d``.  Vanilla
LoRA adds ``scaling * (x A) B`` with ``A: k x r`` and ``B: r x d``.

Block-LoRA(r, n) splits the rank axis into ``n`` blocks of width ``r/n``
and replaces every down-projection block by one shared matrix ``A_s``::

    x A B = x sum_i A_i B_i          (block identity)
          ~ x A_s sum_i B_i          (shared down-projection)

so the adapter holds ``A_s: k x r/n`` and ``n`` up-projection blocks
``B_i: r/n x d``.  The sum of the blocks is cached and refreshed whenever
the blocks change.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from . import linalg as la
from .errors import ConfigError, DivisibilityError, ShapeError, StateError
from .linalg import MacCounter, Matrix


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 2
    blocks: int = 2
    placement: tuple[int, ...] = (0, 1)
    init_std: float = 0.02
    freeze_down: bool = False
    scaling: float = 1.0

    def __post_init__(self):
        if self.rank < 1 or self.blocks < 1:
            raise ConfigError(f"rank and blocks must be positive (r={self.rank}, n={self.blocks})")
        if self.rank % self.blocks:
            raise DivisibilityError(self.rank, self.blocks)
        if not self.init_std > 0:
            raise ConfigError(f"init_std must be positive, got {self.init_std}")
        if not self.scaling > 0:
            raise ConfigError(f"scaling must be positive, got {self.scaling}")
        object.__setattr__(self, "placement", tuple(sorted(set(self.placement))))

    @property
    def block_rank(self) -> int:
        return self.rank // self.blocks

    @property
    def is_vanilla(self) -> bool:
        return self.blocks == 1


class FrozenLinear:
    """A pretrained weight that training never touches."""

    def __init__(self, W: Matrix):
        la._check_2d(W, "W")
        W = W.copy()
        W.flags.writeable = False
        self.W = W

    @property
    def k(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    def forward(self, x: Matrix, counter: MacCounter | None = None) -> Matrix:
        return la.matmul(x, self.W, counter)


@dataclass
class LoRAAdapter:
    A: Matrix
    B: Matrix
    scaling: float = 1.0
    freeze_down: bool = False

    def __post_init__(self):
        if self.A.shape[1] != self.B.shape[0]:
            raise ShapeError(f"A {self.A.shape} and B {self.B.shape} disagree on rank")

    kind = "lora"

    @property
    def shape(self) -> tuple[int, int]:
        return self.A.shape[0], self.B.shape[1]

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def blocks(self) -> int:
        return 1

    @property
    def down(self) -> Matrix:
        return self.A

    def up_sum(self, counter: MacCounter | None = None) -> Matrix:
        return self.B

    def delta_w(self, counter: MacCounter | None = None) -> Matrix:
        return la.scale(la.matmul(self.A, self.B, counter), self.scaling)

    def parameters(self) -> dict[str, Matrix]:
        return {"A": self.A, "B": self.B}

    def trainable(self) -> list[str]:
        return ["B"] if self.freeze_down else ["A", "B"]

    def set_parameters(self, params: dict[str, Matrix]) -> None:
        for name, value in params.items():
            current = getattr(self, name)
            if value.shape != current.shape:
                raise ShapeError(f"{name}: expected {current.shape}, got {value.shape}")
            setattr(self, name, value)

    def num_trainable(self) -> int:
        return sum(self.parameters()[p].size for p in self.trainable())


class BlockLoRAAdapter:
    """Shared down-projection plus ``n`` up-projection blocks."""

    kind = "block"

    def __init__(self, A_s: Matrix, B_blocks: Sequence[Matrix], scaling: float = 1.0,
                 freeze_down: bool = False):
        if not B_blocks:
            raise ShapeError("need at least one up-projection block")
        shapes = {b.shape for b in B_blocks}
        if len(shapes) != 1:
            raise ShapeError(f"up-projection blocks differ in shape: {sorted(shapes)}")
        if A_s.shape[1] != B_blocks[0].shape[0]:
            raise ShapeError(f"A_s {A_s.shape} and blocks {B_blocks[0].shape} disagree on rank")
        self.A_s = A_s
        self._blocks = tuple(B_blocks)
        self.scaling = scaling
        self.freeze_down = freeze_down
        self.cached_B_sum: Matrix | None = None
        self.sum_adds = 0

    @property
    def B_blocks(self) -> tuple[Matrix, ...]:
        return self._blocks

    @B_blocks.setter
    def B_blocks(self, blocks: Sequence[Matrix]) -> None:
        if len(blocks) != len(self._blocks) or any(
                b.shape != self._blocks[0].shape for b in blocks):
            raise ShapeError("replacement blocks must match the existing block layout")
        self._blocks = tuple(blocks)
        self.cached_B_sum = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.A_s.shape[0], self._blocks[0].shape[1]

    @property
    def blocks(self) -> int:
        return len(self._blocks)

    @property
    def rank(self) -> int:
        return self.A_s.shape[1] * len(self._blocks)

    @property
    def down(self) -> Matrix:
        return self.A_s

    def up_sum(self, counter: MacCounter | None = None) -> Matrix:
        """Sum of the up-projection blocks; adds are charged only on a cache miss."""
        if self.cached_B_sum is None:
            c = MacCounter()
            self.cached_B_sum = la.sum_matrices(self._blocks, c)
            self.sum_adds = c.add_count
            if counter is not None:
                counter.record_adds(c.add_count)
        return self.cached_B_sum

    def delta_w(self, counter: MacCounter | None = None) -> Matrix:
        return la.scale(la.matmul(self.A_s, self.up_sum(counter), counter), self.scaling)

    def parameters(self) -> dict[str, Matrix]:
        params = {"A_s": self.A_s}
        for i, b in enumerate(self._blocks):
            params[f"B{i}"] = b
        return params

    def trainable(self) -> list[str]:
        names = [f"B{i}" for i in range(len(self._blocks))]
        return names if self.freeze_down else ["A_s"] + names

    def set_parameters(self, params: dict[str, Matrix]) -> None:
        blocks = list(self._blocks)
        touched = False
        for name, value in params.items():
            if name == "A_s":
                if value.shape != self.A_s.shape:
                    raise ShapeError(f"A_s: expected {self.A_s.shape}, got {value.shape}")
                self.A_s = value
            elif name.startswith("B"):
                i = int(name[1:])
                if value.shape != blocks[i].shape:
                    raise ShapeError(f"{name}: expected {blocks[i].shape}, got {value.shape}")
                blocks[i] = value
                touched = True
            else:
                raise KeyError(name)
        if touched:
            self.B_blocks = blocks

    def num_trainable(self) -> int:
        return sum(self.parameters()[p].size for p in self.trainable())


Adapter = Union[LoRAAdapter, BlockLoRAAdapter]


def _check_input(x: Matrix, layer: FrozenLinear, ad: Adapter) -> None:
    la._check_2d(x, "x")
    if x.shape[1] != layer.k:
        raise ShapeError(f"input {x.shape} does not match layer of shape {layer.W.shape}")
    if ad.shape != (layer.k, layer.d):
        raise ShapeError(f"adapter of shape {ad.shape} does not fit layer {layer.W.shape}")


def forward_lora(x: Matrix, layer: FrozenLinear, ad: LoRAAdapter,
                 counter: MacCounter | None = None) -> Matrix:
    _check_input(x, layer, ad)
    base = layer.forward(x, counter)
    update = la.matmul(la.matmul(x, ad.A, counter), ad.B, counter)
    return la.add(base, la.scale(update, ad.scaling))


def forward_block(x: Matrix, layer: FrozenLinear, ad: BlockLoRAAdapter,
                  counter: MacCounter | None = None) -> Matrix:
    """Fast path ``xW + s * (x A_s) (sum_i B_i)`` using the cached block sum."""
    _check_input(x, layer, ad)
    base = layer.forward(x, counter)
    b_sum = ad.up_sum(counter)
    update = la.matmul(la.matmul(x, ad.A_s, counter), b_sum, counter)
    return la.add(base, la.scale(update, ad.scaling))


def forward_block_per_block(x: Matrix, layer: FrozenLinear, ad: BlockLoRAAdapter,
                            counter: MacCounter | None = None) -> Matrix:
    """Slow path ``xW + s * x sum_i (A_s B_i)`` kept for cross-checking."""
    _check_input(x, layer, ad)
    base = layer.forward(x, counter)
    delta = la.sum_matrices([la.matmul(ad.A_s, b, counter) for b in ad.B_blocks], counter)
    return la.add(base, la.scale(la.matmul(x, delta, counter), ad.scaling))


def forward(x: Matrix, layer, ad: Adapter | None = None,
            counter: MacCounter | None = None) -> Matrix:
    if isinstance(layer, MergedLayer):
        return layer.forward(x, counter)
    if ad is None:
        return layer.forward(x, counter)
    if isinstance(ad, BlockLoRAAdapter):
        return forward_block(x, layer, ad, counter)
    return forward_lora(x, layer, ad, counter)


def partition(A: Matrix, B: Matrix, n: int) -> tuple[list[Matrix], list[Matrix]]:
    """Split ``A`` into column blocks and ``B`` into row blocks along the rank axis."""
    r = A.shape[1]
    if B.shape[0] != r:
        raise ShapeError(f"A {A.shape} and B {B.shape} disagree on rank")
    if n < 1 or r % n:
        raise DivisibilityError(r, n)
    return la.split_cols(A, n), la.split_rows(B, n)


def block_identity_check(A: Matrix, B: Matrix, n: int) -> float:
    """Max-abs gap between ``A B`` and ``sum_i A_i B_i``."""
    a_parts, b_parts = partition(A, B, n)
    blockwise = la.sum_matrices([la.matmul(a, b) for a, b in zip(a_parts, b_parts)])
    return la.max_abs_diff(la.matmul(A, B), blockwise)


class MergedLayer:
    """Frozen layer with the adapter update folded into one weight.

    The original weight is retained so unmerging restores it bitwise.
    """

    def __init__(self, original: FrozenLinear, adapter: Adapter):
        self.original = original
        self.adapter = adapter
        W_eff = la.add(original.W, adapter.delta_w())
        W_eff.flags.writeable = False
        self.W = W_eff

    def forward(self, x: Matrix, counter: MacCounter | None = None) -> Matrix:
        return la.matmul(x, self.W, counter)


def merge(layer, ad: Adapter) -> MergedLayer:
    if isinstance(layer, MergedLayer):
        raise StateError("layer is already merged")
    if ad.shape != (layer.k, layer.d):
        raise ShapeError(f"adapter of shape {ad.shape} does not fit layer {layer.W.shape}")
    return MergedLayer(layer, ad)


def unmerge(merged) -> tuple[FrozenLinear, Adapter]:
    if not isinstance(merged, MergedLayer):
        raise StateError("layer was never merged")
    return merged.original, merged.adapter


def init_adapter(config: AdapterConfig, k: int, d: int, seed, dtype=la.F64) -> Adapter:
    """Gaussian down-projection, zero up-projection, so the initial update is zero.

    ``blocks == 1`` yields a vanilla :class:`LoRAAdapter`.
    """
    if config.is_vanilla:
        A = la.seeded_gaussian(k, config.rank, seed, config.init_std, dtype)
        return LoRAAdapter(A, la.zeros(config.rank, d, dtype), config.scaling, config.freeze_down)
    rb = config.block_rank
    A_s = la.seeded_gaussian(k, rb, seed, config.init_std, dtype)
    blocks = [la.zeros(rb, d, dtype) for _ in range(config.blocks)]
    return BlockLoRAAdapter(A_s, blocks, config.scaling, config.freeze_down)


@dataclass(frozen=True)
class ParamCount:
    lora_total: int
    block_total: int

    @property
    def proportion(self) -> float:
        return self.block_total / self.lora_total

    def __iter__(self):
        return iter((self.lora_total, self.block_total, self.proportion))


def count_params(config: AdapterConfig, dims: Sequence[tuple[int, int]]) -> ParamCount:
    """Trainable parameter counts summed over layers of shape ``(k, d)``.

    Per layer: LoRA ``r (k + d)``; Block-LoRA ``(r/n) k + r d``.
    """
    r, rb = config.rank, config.block_rank
    lora = sum(r * (k + d) for k, d in dims)
    block = sum(rb * k + r * d for k, d in dims)
    return ParamCount(lora, block)


def square_proportion(n: int) -> float:
    return (1 + 1 / n) / 2
