"""Self-verification suite run by ``blocklora check``.

Every check compares two independent routes to the same quantity (a dense
product against its block decomposition, an analytic gradient against
central differences, a merged weight against the adapter path, ...) and
reports the largest deviation it saw.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import linalg as la
from .adapter import (AdapterConfig, BlockLoRAAdapter, FrozenLinear, LoRAAdapter,
                      block_identity_check, count_params, forward_block, forward_lora, merge,
                      square_proportion, unmerge)
from .cost import BoundInputs, bound_block, bound_lora, measured_mac_ratio, table_complexity_ratio
from .encoder import DualEncoder, Episode, Tower, apply_parameters, loss_and_grads, random_tower
from .encoder import support_loss, trainable_parameters
from .losses import LossKind, loss_contrastive, loss_fsl

FD_STEP = 1e-5
GRAD_RTOL = 1e-5
IDENTITY_ATOL = 1e-12
MERGE_ATOL = 1e-10
MAC_RTOL = 0.05
BOUND_ATOL = 1e-12


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_deviation: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name:<22} max_dev={self.max_deviation:.3e}  "
                f"tol={self.tolerance:.1e}  {self.detail}").rstrip()


REL_SCALE_FLOOR = 1e-8


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest entry gap relative to the larger of the two tensors' magnitudes.

    The scale is floored at ``REL_SCALE_FLOOR`` so a vanishing true gradient
    (e.g. a constant loss) is judged on an absolute gap instead of round-off.
    """
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))),
                REL_SCALE_FLOOR)
    return float(np.max(np.abs(analytic - numeric))) / scale


def central_difference(f: Callable[[dict], float], params: dict[str, np.ndarray], name: str,
                       h: float = FD_STEP) -> np.ndarray:
    base = params[name]
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus = base.copy()
        plus[idx] += h
        minus = base.copy()
        minus[idx] -= h
        grad[idx] = (f({**params, name: plus}) - f({**params, name: minus})) / (2 * h)
    return grad


def _block_rank_pairs():
    return [(r, n) for r in (2, 4, 8) for n in (1, 2, 4, 8) if r % n == 0]


def check_block_identity(rng: np.random.Generator, cases: int = 100) -> CheckResult:
    pairs = _block_rank_pairs()
    worst = 0.0
    for i in range(cases):
        r, n = pairs[i % len(pairs)]
        k, d = rng.integers(1, 33, size=2)
        A = rng.normal(size=(k, r))
        B = rng.normal(size=(r, d))
        worst = max(worst, block_identity_check(A, B, n))
    return CheckResult("block_identity", worst <= IDENTITY_ATOL, worst, IDENTITY_ATOL,
                       f"{cases} cases, r in {{2,4,8}}, all n | r")


def check_reduction(rng: np.random.Generator, cases: int = 20) -> CheckResult:
    worst = 0.0
    for _ in range(cases):
        m, k, d = rng.integers(1, 17, size=3)
        r = int(rng.choice([1, 2, 4, 8]))
        x = rng.normal(size=(m, k))
        layer = FrozenLinear(rng.normal(size=(k, d)))
        A, B = rng.normal(size=(k, r)), rng.normal(size=(r, d))
        out_lora = forward_lora(x, layer, LoRAAdapter(A, B))
        out_block = forward_block(x, layer, BlockLoRAAdapter(A, [B]))
        worst = max(worst, la.max_abs_diff(out_lora, out_block))
    return CheckResult("reduction_n1", worst == 0.0, worst, 0.0, f"{cases} cases, bitwise")


def check_merge(rng: np.random.Generator, cases: int = 20) -> CheckResult:
    worst = 0.0
    problems = []
    for i, (r, n) in enumerate(_block_rank_pairs() * 2):
        if i >= cases:
            break
        m, k, d = (int(v) for v in rng.integers(2, 33, size=3))
        x = rng.normal(size=(m, k))
        layer = FrozenLinear(rng.normal(size=(k, d)))
        ad = BlockLoRAAdapter(rng.normal(size=(k, r // n)),
                              [rng.normal(size=(r // n, d)) for _ in range(n)])
        merged = merge(layer, ad)
        worst = max(worst, la.max_abs_diff(merged.forward(x), forward_block(x, layer, ad)))
        restored, _ = unmerge(merged)
        if not np.array_equal(restored.W, layer.W):
            problems.append(f"unmerge not bitwise for (r,n)=({r},{n})")
        c_merged, c_plain = la.MacCounter(), la.MacCounter()
        merged.forward(x, c_merged)
        layer.forward(x, c_plain)
        if c_merged.mac_count != c_plain.mac_count:
            problems.append(f"merged MACs differ for (r,n)=({r},{n})")
    ok = worst <= MERGE_ATOL and not problems
    return CheckResult("merge_equivalence", ok, worst, MERGE_ATOL, "; ".join(problems))


def check_param_proportion() -> CheckResult:
    worst = 0.0
    for n in (1, 2, 4, 8):
        for k in (64, 512, 768):
            cfg = AdapterConfig(rank=8, blocks=n)
            worst = max(worst, abs(count_params(cfg, [(k, k)]).proportion - square_proportion(n)))
    at_two = count_params(AdapterConfig(rank=2, blocks=2), [(512, 512)]).proportion
    ok = worst == 0.0 and at_two == 0.75
    return CheckResult("param_proportion", ok, worst, 0.0, f"Block-LoRA(2,2) proportion={at_two}")


def check_mac_ratio() -> CheckResult:
    worst = 0.0
    problems = []
    for n in (2, 4):
        ratios = []
        for d in (256, 512, 2048):
            ratio = measured_mac_ratio(AdapterConfig(rank=4, blocks=n), [(d, d)], m=8)
            target = table_complexity_ratio(n, d)
            worst = max(worst, abs(ratio - target) / target)
            ratios.append(ratio)
        if not all(a > b > 1 / n for a, b in zip(ratios, ratios[1:])):
            problems.append(f"n={n} ratios not strictly decreasing to 1/n: {ratios}")
    ok = worst <= MAC_RTOL and not problems
    return CheckResult("mac_ratio", ok, worst, MAC_RTOL, "; ".join(problems))


def random_bound_inputs(rng: np.random.Generator) -> BoundInputs:
    r = int(rng.choice([1, 2, 4, 8, 16]))
    n = int(rng.choice([d for d in (1, 2, 4, 8, 16) if r % d == 0]))
    layers = tuple((int(k), int(d)) for k, d in rng.integers(1, 2049, size=(rng.integers(1, 6), 2)))
    return BoundInputs(q=int(rng.integers(1, 33)), sigma=float(rng.uniform(0.1, 5)),
                       sample_count=int(rng.integers(1, 10 ** 6)), layers=layers, r=r, n=n)


def check_bounds(rng: np.random.Generator, cases: int = 1000) -> CheckResult:
    worst = 0.0
    problems = []
    for _ in range(cases):
        b = random_bound_inputs(rng)
        lo, bl = bound_lora(b), bound_block(b)
        if b.n == 1 and bl != lo:
            problems.append(f"n=1 but bounds differ: {b}")
        if b.n > 1 and not bl < lo:
            problems.append(f"block bound not tighter: {b}")
        quad = BoundInputs(b.q, b.sigma, 4 * b.sample_count, b.layers, b.r, b.n)
        dbl = BoundInputs(b.q, 2 * b.sigma, b.sample_count, b.layers, b.r, b.n)
        worst = max(worst,
                    abs(bound_lora(quad) - lo / 2) / lo, abs(bound_block(quad) - bl / 2) / bl,
                    abs(bound_lora(dbl) - 2 * lo) / lo, abs(bound_block(dbl) - 2 * bl) / bl)
    for n in (1, 2, 4, 8):
        b = BoundInputs(layers=((512, 512),), r=8, n=n)
        worst = max(worst, abs(bound_block(b) / bound_lora(b) - math.sqrt((1 / n + 1) / 2)))
    ok = worst <= BOUND_ATOL and not problems
    return CheckResult("bounds", ok, worst, BOUND_ATOL,
                       "; ".join(problems[:3]) or f"{cases} random inputs")


def random_grad_problem(rng: np.random.Generator):
    """A small random dual encoder with non-zero adapters and a support batch."""
    dims = tuple(int(v) for v in rng.integers(3, 7, size=3))
    r = int(rng.choice([2, 4]))
    n = int(rng.choice([v for v in (1, 2, 4) if r % v == 0]))
    placement = [(0,), (1,), (0, 1)][int(rng.integers(3))]
    cfg = AdapterConfig(rank=r, blocks=n, placement=placement,
                        freeze_down=bool(rng.integers(2)), scaling=float(rng.choice([1.0, 0.5])))
    image = random_tower(dims, int(rng.integers(2 ** 31)))
    model = DualEncoder(image, Tower(image.layers))
    model.attach_adapters(cfg, int(rng.integers(2 ** 31)))
    for ad in model.adapters().values():
        ad.set_parameters({name: rng.normal(scale=0.3, size=p.shape)
                           for name, p in ad.parameters().items()})
    n_way, k_shot = int(rng.integers(2, 4)), int(rng.integers(1, 3))
    support = rng.normal(size=(n_way * k_shot, dims[0]))
    labels = np.tile(np.arange(n_way), k_shot)
    prompts = rng.normal(size=(n_way, dims[0]))
    episode = Episode(n_way, k_shot, support, labels, support, labels)
    variant = LossKind.AS_WRITTEN if rng.integers(2) else LossKind.CLASSWISE
    temperature = float(rng.choice([0.07, 0.5, 1.0]))
    return model, prompts, episode, temperature, variant


def check_gradients(rng: np.random.Generator, configs: int = 50,
                    perturb: float = 0.0) -> CheckResult:
    """Adapter and loss gradients against central differences.

    ``perturb`` adds a constant to one analytic gradient entry, which must
    make the check fail (used to test the checker itself).
    """
    worst = 0.0
    for c in range(configs):
        model, prompts, episode, lam, variant = random_grad_problem(rng)
        _, grads = loss_and_grads(model, prompts, episode, lam, variant)
        if c == 0 and perturb:
            first = next(iter(grads))
            grads[first] = grads[first].copy()
            grads[first].flat[0] += perturb
        params = trainable_parameters(model)

        def f(p):
            apply_parameters(model, p)
            return support_loss(model, prompts, episode, lam, variant)

        for name in params:
            numeric = central_difference(f, params, name)
            worst = max(worst, relative_error(grads[name], numeric))
        apply_parameters(model, params)

        V = rng.normal(size=(4, 5))
        T = rng.normal(size=(4, 5))
        res = loss_contrastive(V, T, lam)
        emb = {"V": V, "T": T}
        for name, g in (("V", res.grad_V), ("T", res.grad_T)):
            num = central_difference(lambda p: loss_contrastive(p["V"], p["T"], lam).value,
                                     emb, name)
            worst = max(worst, relative_error(g, num))
        labels = rng.integers(0, 3, size=6)
        V6, C = rng.normal(size=(6, 5)), rng.normal(size=(3, 5))
        res = loss_fsl(V6, C, labels, lam, variant)
        emb = {"V": V6, "T": C}
        for name, g in (("V", res.grad_V), ("T", res.grad_T)):
            num = central_difference(lambda p: loss_fsl(p["V"], p["T"], labels, lam, variant).value,
                                     emb, name)
            worst = max(worst, relative_error(g, num))
    return CheckResult("gradients", worst <= GRAD_RTOL, worst, GRAD_RTOL,
                       f"{configs} configs, h={FD_STEP}")


def check_shared_symmetry(rng: np.random.Generator, cases: int = 20) -> CheckResult:
    asymmetric = 0
    for _ in range(cases):
        model, prompts, episode, lam, variant = random_grad_problem(rng)
        _, grads = loss_and_grads(model, prompts, episode, lam, variant)
        for key, ad in model.adapters().items():
            if isinstance(ad, BlockLoRAAdapter):
                blocks = [grads[f"{key}.B{i}"] for i in range(ad.blocks)]
                asymmetric += sum(not np.array_equal(blocks[0], b) for b in blocks[1:])
    return CheckResult("shared_down_symmetry", asymmetric == 0, float(asymmetric), 0.0,
                       "dL/dB_i bitwise identical")


def run_checks(seed: int = 0, perturb_gradient: float = 0.0) -> list[CheckResult]:
    streams = [np.random.default_rng(s) for s in la.spawn_seeds(seed, 6)]
    return [
        check_block_identity(streams[0]),
        check_reduction(streams[1]),
        check_merge(streams[2]),
        check_param_proportion(),
        check_mac_ratio(),
        check_bounds(streams[3]),
        check_gradients(streams[4], perturb=perturb_gradient),
        check_shared_symmetry(streams[5]),
    ]


def report_text(results: list[CheckResult]) -> str:
    return "\n".join(r.line() for r in results) + "\n"


def digest(results: list[CheckResult]) -> str:
    payload = json.dumps([asdict(r) for r in results], sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()
