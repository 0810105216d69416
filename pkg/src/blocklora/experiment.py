"""Few-shot sweeps over (r, n, K) with CSV and JSON outputs.

``results.csv`` holds one row per (r, n, K, repeat) followed by one
``repeat=mean`` row per (r, n, K).  When the frozen down-projection
ablation is requested its rows go to ``results_frozen_down.csv`` with the
same header.  ``summary.json`` carries the means, the zero-shot baseline
per K and a digest of the property suite.

Column contract (for plotting shot curves): ``K`` on the x axis,
``accuracy`` (fraction in [0, 1]) on the y axis, one curve per ``(r, n)``.
"""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable

import numpy as np
import yaml

from . import linalg as la
from .adapter import AdapterConfig
from .checks import digest, run_checks
from .encoder import DEFAULT_DIMS, DEFAULT_SHOTS, SyntheticTask, TrainConfig, run_episode
from .errors import ConfigError
from .losses import LossKind

CSV_HEADER = ("r", "n", "K", "repeat", "seed", "accuracy", "loss", "params", "macs", "wall_ms")
OUTPUT_DIR_ENV = "BLOCKLORA_OUTPUT_DIR"


@dataclass(frozen=True)
class ExperimentSpec:
    seed: int = 0
    task_seed: int = 0
    n_classes: int = 10
    noise: float = 0.3
    shift: float = 1.0
    queries_per_class: int = 50
    dims: tuple[int, ...] = DEFAULT_DIMS
    placement: tuple[int, ...] = (0, 1)
    ranks: tuple[int, ...] = (2,)
    blocks: tuple[int, ...] = (1, 2)
    shots: tuple[int, ...] = DEFAULT_SHOTS
    repeats: int = 3
    steps: int = 500
    lr: float = 2e-4
    weight_decay: float = 0.01
    temperature: float = 0.07
    init_std: float = 0.02
    scaling: float = 1.0
    loss: str = "as_written"
    precision: str = "f64"
    freeze_down: bool = False
    record_timing: bool = False
    check_digest: bool = True
    workers: int = 1

    def __post_init__(self):
        for name in ("dims", "placement", "ranks", "blocks", "shots"):
            value = getattr(self, name)
            if isinstance(value, (int, np.integer)):
                value = (value,)
            object.__setattr__(self, name, tuple(int(v) for v in value))
        if self.repeats < 1:
            raise ConfigError(f"repeats must be at least 1, got {self.repeats}")
        if not self.ranks or not self.blocks or not self.shots:
            raise ConfigError("ranks, blocks and shots must be non-empty")
        if min(self.shots) < 1:
            raise ConfigError(f"shots must be positive, got {self.shots}")
        for r, n in self.pairs():
            if r < 1 or n < 1 or r % n:
                raise ConfigError(f"sweep pair (r={r}, n={n}) invalid: n must divide r")
        object.__setattr__(self, "loss", LossKind.parse(self.loss).value)
        la.dtype_for(self.precision)
        if self.workers < 1:
            raise ConfigError(f"workers must be at least 1, got {self.workers}")

    def pairs(self) -> list[tuple[int, int]]:
        """Every (r, n) in the sweep, always including the n=1 baseline."""
        blocks = sorted(set(self.blocks) | {1})
        return [(r, n) for r in sorted(set(self.ranks)) for n in blocks]

    def task(self) -> SyntheticTask:
        return SyntheticTask(seed=self.task_seed, n_classes=self.n_classes, dims=self.dims,
                             noise=self.noise, queries_per_class=self.queries_per_class,
                             shift=self.shift)

    def adapter_config(self, r: int, n: int, freeze_down: bool = False) -> AdapterConfig:
        return AdapterConfig(rank=r, blocks=n, placement=self.placement, init_std=self.init_std,
                             freeze_down=freeze_down, scaling=self.scaling)

    def train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, lr=self.lr, weight_decay=self.weight_decay,
                           temperature=self.temperature, loss=self.loss,
                           precision=self.precision)

    def repeat_seed(self, repeat: int) -> int:
        return self.seed * 1000 + repeat


def load_spec(path: str | os.PathLike | None = None, **overrides) -> ExperimentSpec:
    """Read a YAML experiment file; keys not given keep their defaults."""
    data: dict = {}
    if path is not None:
        with open(path) as fh:
            try:
                loaded = yaml.safe_load(fh)
            except yaml.YAMLError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        data.update(loaded or {})
    data.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(ExperimentSpec)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown experiment keys: {', '.join(unknown)}")
    try:
        return ExperimentSpec(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


DEFAULT_CONFIG_TEXT = """\
# Few-shot sweep: Block-LoRA(r, n) vs vanilla LoRA on the synthetic dual-encoder task.
seed: 0
task_seed: 0
n_classes: 10
noise: 0.3
shift: 1.0
queries_per_class: 50
dims: [64, 64, 32]        # input -> hidden -> embedding, tanh between
placement: [0, 1]         # layers of both towers that get adapters
ranks: [2]
blocks: [1, 2]            # n = 1 (vanilla LoRA) is always added
shots: [1, 2, 4, 8, 16]
repeats: 3
steps: 500
lr: 2.0e-4                # AdamW, cosine annealing to 0
weight_decay: 0.01
temperature: 0.07
init_std: 0.02
scaling: 1.0
loss: as_written          # or classwise
precision: f64            # or f32
freeze_down: false        # also run the frozen down-projection ablation
record_timing: false      # wall_ms column; off keeps outputs byte-reproducible
check_digest: true
workers: 1
"""


@dataclass
class ResultRow:
    r: int
    n: int
    K: int
    repeat: int | str
    seed: int | str
    accuracy: float
    loss: float
    params: int
    macs: int
    wall_ms: float | str

    def cells(self) -> list[str]:
        def fmt(v):
            if isinstance(v, float):
                return repr(round(v, 12))
            return str(v)
        return [fmt(getattr(self, name)) for name in CSV_HEADER]


def adapter_macs_per_row(model) -> int:
    """Adapter-branch MACs to encode one image row and one prompt row."""
    total = 0
    for tower in (model.image, model.text):
        with_ad, base = la.MacCounter(), la.MacCounter()
        x = np.zeros((1, tower.in_dim), dtype=tower.layers[0].W.dtype)
        tower.encode(x, with_ad)
        tower.base().encode(x, base)
        total += with_ad.mac_count - base.mac_count
    return total


@dataclass(frozen=True)
class _Job:
    spec: ExperimentSpec
    r: int
    n: int
    K: int
    repeat: int
    freeze_down: bool


def _run_job(job: _Job) -> tuple[ResultRow, float]:
    spec = job.spec
    task = spec.task()
    seed = spec.repeat_seed(job.repeat)
    episode = task.episode(job.K, seed=[seed, 0], dtype=la.dtype_for(spec.precision))
    result = run_episode(task, episode, spec.adapter_config(job.r, job.n, job.freeze_down),
                         spec.train_config(), seed=[seed, 1])
    params = sum(ad.num_trainable() for ad in result.model.adapters().values())
    row = ResultRow(job.r, job.n, job.K, job.repeat, seed, result.query_accuracy,
                    result.final_loss, params, adapter_macs_per_row(result.model),
                    round(result.wall_ms, 3) if spec.record_timing else "")
    return row, result.zero_shot_accuracy


def _jobs(spec: ExperimentSpec, freeze_down: bool) -> list[_Job]:
    pairs = spec.pairs()
    if freeze_down:
        pairs = [(r, n) for r, n in pairs if n > 1]
    return [_Job(spec, r, n, K, rep, freeze_down)
            for r, n in pairs for K in sorted(set(spec.shots)) for rep in range(spec.repeats)]


def _execute(jobs: list[_Job], workers: int) -> list[tuple[ResultRow, float]]:
    if workers == 1 or len(jobs) < 2:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))


def mean_rows(rows: Iterable[ResultRow]) -> list[ResultRow]:
    groups: dict[tuple[int, int, int], list[ResultRow]] = {}
    for row in rows:
        groups.setdefault((row.r, row.n, row.K), []).append(row)
    out = []
    for (r, n, K), group in sorted(groups.items()):
        out.append(ResultRow(
            r, n, K, "mean", "",
            float(np.mean([g.accuracy for g in group])),
            float(np.mean([g.loss for g in group])),
            group[0].params, group[0].macs,
            round(float(np.mean([g.wall_ms for g in group])), 3)
            if all(isinstance(g.wall_ms, float) for g in group) else ""))
    return out


def csv_text(rows: list[ResultRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in rows:
        writer.writerow(row.cells())
    return buf.getvalue()


@dataclass
class SweepResult:
    rows: list[ResultRow]
    means: list[ResultRow]
    zero_shot: dict[int, float]
    frozen_rows: list[ResultRow] = field(default_factory=list)
    frozen_means: list[ResultRow] = field(default_factory=list)
    check_digest: str = ""

    def mean_accuracy(self, r: int, n: int, K: int, frozen: bool = False) -> float:
        for row in self.frozen_means if frozen else self.means:
            if (row.r, row.n, row.K) == (r, n, K):
                return row.accuracy
        raise KeyError((r, n, K))

    def summary(self, spec: ExperimentSpec) -> dict:
        def table(rows):
            return [{"r": m.r, "n": m.n, "K": m.K, "accuracy": m.accuracy, "loss": m.loss,
                     "params": m.params, "macs": m.macs} for m in rows]
        return {
            "spec": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()},
            "zero_shot_accuracy": {str(k): v for k, v in sorted(self.zero_shot.items())},
            "means": table(self.means),
            "frozen_down_means": table(self.frozen_means),
            "property_suite_digest": self.check_digest,
        }


def run_sweep(spec: ExperimentSpec) -> SweepResult:
    """Train and evaluate every sweep cell; rows come back in sorted key order."""
    outcomes = _execute(_jobs(spec, False), spec.workers)
    rows = [row for row, _ in outcomes]
    by_shots: dict[int, list[float]] = {}
    for row, zs in outcomes:
        by_shots.setdefault(row.K, []).append(zs)
    zero_shot = {K: float(np.mean(v)) for K, v in by_shots.items()}
    result = SweepResult(rows, mean_rows(rows), zero_shot)
    if spec.freeze_down:
        frozen = [row for row, _ in _execute(_jobs(spec, True), spec.workers)]
        result.frozen_rows = frozen
        result.frozen_means = mean_rows(frozen)
    if spec.check_digest:
        result.check_digest = digest(run_checks(spec.seed))
    return result


def resolve_output_dir(out: str | os.PathLike | None) -> Path:
    if out is not None:
        return Path(out)
    return Path(os.environ.get(OUTPUT_DIR_ENV, "results"))


def write_outputs(result: SweepResult, spec: ExperimentSpec, out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    path = out_dir / "results.csv"
    path.write_text(csv_text(result.rows + result.means))
    written.append(path)
    if spec.freeze_down:
        path = out_dir / "results_frozen_down.csv"
        path.write_text(csv_text(result.frozen_rows + result.frozen_means))
        written.append(path)
    path = out_dir / "summary.json"
    path.write_text(json.dumps(result.summary(spec), indent=2, sort_keys=True) + "\n")
    written.append(path)
    return written


def with_overrides(spec: ExperimentSpec, **kwargs) -> ExperimentSpec:
    return replace(spec, **{k: v for k, v in kwargs.items() if v is not None})
