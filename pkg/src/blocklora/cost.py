"""Parameter, MAC and generalization-bound accounting for LoRA vs Block-LoRA.

Bounds (loss assumed sigma-sub-Gaussian, parameters quantised to q bits,
``#S`` training samples, sum over adapted layers of shape ``(k_l, d_l)``)::

    LoRA:        sqrt(2 r q sigma^2 ln2 / #S * sum_l (k_l + d_l))
    Block-LoRA:  sqrt(2 r q sigma^2 ln2 / #S * sum_l (k_l / n + d_l))

MAC model for one adapter branch over ``m`` input rows:
LoRA ``m r (k + d)``; Block-LoRA ``m (r/n) (k + d)`` plus
``(n - 1)(r/n) d`` additions to form the cached block sum.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

from . import linalg as la
from .adapter import (AdapterConfig, BlockLoRAAdapter, FrozenLinear, LoRAAdapter, count_params,
                      forward_block, forward_lora)
from .errors import ConfigError, DivisibilityError


@dataclass(frozen=True)
class BoundInputs:
    q: int = 16
    sigma: float = 1.0
    sample_count: int = 16000
    layers: tuple[tuple[int, int], ...] = ((512, 512),)
    r: int = 2
    n: int = 2

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple((int(k), int(d)) for k, d in self.layers))
        if self.q < 1 or self.sample_count < 1 or self.r < 1 or self.n < 1:
            raise ConfigError("q, sample_count, r and n must be positive integers")
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if not self.layers or any(k < 1 or d < 1 for k, d in self.layers):
            raise ConfigError(f"layer dimensions must be positive, got {self.layers}")
        if self.r % self.n:
            raise DivisibilityError(self.r, self.n)

    def _prefactor(self) -> float:
        return 2 * self.r * self.q * self.sigma ** 2 * math.log(2) / self.sample_count


def bound_lora(inputs: BoundInputs) -> float:
    return math.sqrt(inputs._prefactor() * sum(k + d for k, d in inputs.layers))


def bound_block(inputs: BoundInputs) -> float:
    return math.sqrt(inputs._prefactor() * sum(k / inputs.n + d for k, d in inputs.layers))


@dataclass(frozen=True)
class MacEstimate:
    lora: int
    block: int
    add_count: int

    @property
    def ratio(self) -> float:
        return self.block / self.lora

    def __iter__(self):
        return iter((self.lora, self.block))


def theoretical_macs(r: int, n: int, k: int, d: int, m: int) -> MacEstimate:
    if min(r, n, k, d, m) < 1:
        raise ConfigError("r, n, k, d and m must be positive")
    if r % n:
        raise DivisibilityError(r, n)
    rb = r // n
    return MacEstimate(m * r * (k + d), m * rb * (k + d), (n - 1) * rb * d)


def table_complexity_ratio(n: int, d: int) -> float:
    """Closed-form complexity proportion ``1/n + 1/d`` for square layers."""
    return 1 / n + 1 / d


@dataclass(frozen=True)
class LayerMeasurement:
    k: int
    d: int
    rows: int
    lora_macs: int
    block_macs: int
    block_adds: int


@dataclass(frozen=True)
class MeasuredCost:
    layers: tuple[LayerMeasurement, ...]

    @property
    def lora_macs(self) -> int:
        return sum(l.lora_macs for l in self.layers)

    @property
    def block_macs(self) -> int:
        return sum(l.block_macs for l in self.layers)

    @property
    def block_adds(self) -> int:
        return sum(l.block_adds for l in self.layers)

    @property
    def mac_only_ratio(self) -> float:
        return self.block_macs / self.lora_macs

    @property
    def ratio(self) -> float:
        """Block/LoRA adapter cost with each layer's block-sum adds amortised over ``d`` rows.

        Adapter MACs grow with the number of rows while the block sum is paid
        once per forward; charging it once per ``d`` rows reproduces the
        square-matrix accounting ``(1/n + 1/d) r d^2`` and makes the ratio
        independent of the batch size actually run.
        """
        block = sum(Fraction(l.block_macs) + Fraction(l.block_adds * l.rows, l.d)
                    for l in self.layers)
        return float(block / self.lora_macs)


def _adapter_path_cost(x, layer, ad, fwd) -> tuple[int, int]:
    with_ad = la.MacCounter()
    fwd(x, layer, ad, with_ad)
    base = la.MacCounter()
    layer.forward(x, base)
    return with_ad.mac_count - base.mac_count, with_ad.add_count


def measure_costs(config: AdapterConfig, dims: Sequence[tuple[int, int]], m: int,
                  trials: int = 1, seed=0) -> MeasuredCost:
    """Instrumented forward passes of both adapter types over every layer.

    Each trial builds a fresh Block-LoRA adapter so its block sum is formed
    (and its additions counted) once; the shared ``x W`` term is excluded.
    """
    if m < 1 or trials < 1:
        raise ConfigError("m and trials must be positive")
    r, rb, n = config.rank, config.block_rank, config.blocks
    seeds = la.spawn_seeds(seed, trials * len(dims))
    records = []
    for t in range(trials):
        for li, (k, d) in enumerate(dims):
            s_x, s_w, s_a, s_b = la.spawn_seeds(seeds[t * len(dims) + li], 4)
            x = la.seeded_gaussian(m, k, s_x, 1.0)
            layer = FrozenLinear(la.seeded_gaussian(k, d, s_w, 1 / math.sqrt(k)))
            A = la.seeded_gaussian(k, r, s_a, config.init_std)
            B = la.seeded_gaussian(r, d, s_b, config.init_std)
            lora = LoRAAdapter(A, B, config.scaling)
            block = BlockLoRAAdapter(A[:, :rb].copy(), la.split_rows(B, n), config.scaling)
            lora_macs, _ = _adapter_path_cost(x, layer, lora, forward_lora)
            block_macs, block_adds = _adapter_path_cost(x, layer, block, forward_block)
            records.append(LayerMeasurement(k, d, m, lora_macs, block_macs, block_adds))
    return MeasuredCost(tuple(records))


def measured_mac_ratio(config: AdapterConfig, dims: Sequence[tuple[int, int]], m: int,
                       trials: int = 1, seed=0) -> float:
    return measure_costs(config, dims, m, trials, seed).ratio


@dataclass
class CostReport:
    lora_params: int
    block_params: int
    param_proportion: float
    lora_macs: int
    block_macs: int
    block_adds: int
    mac_ratio: float
    lora_bound: float
    block_bound: float
    bound_ratio: float
    inputs: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def cost_report(config: AdapterConfig, dims: Sequence[tuple[int, int]], m: int | None = None,
                bound_inputs: BoundInputs | None = None) -> CostReport:
    """Parameters, theoretical MACs and bounds for one configuration.

    ``m`` defaults to the first layer's output width (square-matrix accounting).
    """
    dims = [tuple(x) for x in dims]
    m = m or dims[0][1]
    params = count_params(config, dims)
    lora_macs = block_macs = adds = 0
    for k, d in dims:
        est = theoretical_macs(config.rank, config.blocks, k, d, m)
        lora_macs += est.lora
        block_macs += est.block
        adds += est.add_count
    if bound_inputs is None:
        bound_inputs = BoundInputs(layers=tuple(dims), r=config.rank, n=config.blocks)
    lb, bb = bound_lora(bound_inputs), bound_block(bound_inputs)
    return CostReport(
        lora_params=params.lora_total,
        block_params=params.block_total,
        param_proportion=params.proportion,
        lora_macs=lora_macs,
        block_macs=block_macs,
        block_adds=adds,
        mac_ratio=block_macs / lora_macs,
        lora_bound=lb,
        block_bound=bb,
        bound_ratio=bb / lb,
        inputs={"r": config.rank, "n": config.blocks, "m": m, "layers": [list(x) for x in dims],
                "q": bound_inputs.q, "sigma": bound_inputs.sigma,
                "sample_count": bound_inputs.sample_count},
    )
