"""Command-line entry point.

Exit codes: 0 success, 1 property failure, 2 configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import checkpoint
from . import linalg as la
from .adapter import AdapterConfig
from .checks import report_text, run_checks
from .cost import BoundInputs, bound_block, bound_lora, cost_report, measured_mac_ratio
from .encoder import evaluate, run_episode
from .errors import BlockLoRAError, ConfigError, FormatError, ShapeError
from .experiment import (DEFAULT_CONFIG_TEXT, load_spec, resolve_output_dir, run_sweep,
                         with_overrides, write_outputs)

EXIT_OK = 0
EXIT_PROPERTY = 1
EXIT_CONFIG = 2
EXIT_IO = 3


def _layers(text: str) -> list[tuple[int, int]]:
    """Parse ``"512x512,768x3072"`` into dimension pairs."""
    try:
        out = []
        for part in text.split(","):
            k, d = part.lower().split("x")
            out.append((int(k), int(d)))
        return out
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected KxD[,KxD...], got {text!r}") from None


def _spec_from_args(args):
    spec = load_spec(args.config)
    return with_overrides(
        spec,
        seed=args.seed,
        precision=args.precision,
        loss=args.loss.replace("-", "_") if args.loss else None,
        freeze_down=True if args.freeze_down else None,
    )


def _write_json(out_dir: Path, name: str, payload: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def cmd_check(args) -> int:
    results = run_checks(args.seed or 0, perturb_gradient=args.perturb_grad)
    text = report_text(results)
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "check.txt").write_text(text)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_PROPERTY
    return EXIT_OK


def cmd_init_config(args) -> int:
    path = Path(args.path)
    if path.exists() and not args.force:
        print(f"{path} exists; pass --force to overwrite", file=sys.stderr)
        return EXIT_IO
    path.write_text(DEFAULT_CONFIG_TEXT)
    print(path)
    return EXIT_OK


def cmd_run(args) -> int:
    spec = _spec_from_args(args)
    result = run_sweep(spec)
    out_dir = resolve_output_dir(args.out)
    paths = write_outputs(result, spec, out_dir)
    print(f"{'r':>3} {'n':>3} {'K':>3} {'accuracy':>9} {'params':>7} {'macs':>6}")
    for m in result.means:
        print(f"{m.r:>3} {m.n:>3} {m.K:>3} {100 * m.accuracy:>8.2f}% {m.params:>7} {m.macs:>6}")
    for K, acc in sorted(result.zero_shot.items()):
        print(f"zero-shot K={K}: {100 * acc:.2f}%")
    for m in result.frozen_means:
        print(f"frozen-down r={m.r} n={m.n} K={m.K}: {100 * m.accuracy:.2f}%")
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


def cmd_cost(args) -> int:
    dims = args.layers or [(args.k, args.d)]
    config = AdapterConfig(rank=args.r, blocks=args.n)
    report = cost_report(config, dims, m=args.m)
    measured = measured_mac_ratio(config, dims, m=args.m or 8)
    rows = [
        ("parameters", report.lora_params, report.block_params, report.param_proportion),
        ("adapter MACs", report.lora_macs, report.block_macs, report.mac_ratio),
        ("bound", report.lora_bound, report.block_bound, report.bound_ratio),
    ]
    print(f"{'':<14}{'LoRA':>14}{'Block-LoRA':>14}{'proportion':>12}")
    for name, a, b, ratio in rows:
        fa = f"{a:.6g}" if isinstance(a, float) else str(a)
        fb = f"{b:.6g}" if isinstance(b, float) else str(b)
        print(f"{name:<14}{fa:>14}{fb:>14}{ratio:>12.6g}")
    print(f"block-sum adds: {report.block_adds}   measured cost ratio "
          f"(adds amortised per d rows): {measured:.6g}")
    payload = report.as_dict()
    payload["measured_cost_ratio"] = measured
    path = _write_json(resolve_output_dir(args.out), "cost.json", payload)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_bound(args) -> int:
    inputs = BoundInputs(q=args.q, sigma=args.sigma, sample_count=args.samples,
                         layers=tuple(args.layers or [(args.k, args.d)]), r=args.r, n=args.n)
    lb, bb = bound_lora(inputs), bound_block(inputs)
    print(f"LoRA bound        {lb:.12g}")
    print(f"Block-LoRA bound  {bb:.12g}")
    print(f"bound_ratio       {bb / lb:.12g}")
    payload = {"q": inputs.q, "sigma": inputs.sigma, "sample_count": inputs.sample_count,
               "layers": [list(l) for l in inputs.layers], "r": inputs.r, "n": inputs.n,
               "lora_bound": lb, "block_bound": bb, "bound_ratio": bb / lb}
    path = _write_json(resolve_output_dir(args.out), "bound.json", payload)
    print(f"wrote {path}")
    return EXIT_OK


def _train_one(spec, args):
    r = args.r or spec.ranks[0]
    n = args.n or max(spec.blocks)
    task = spec.task()
    seed = spec.repeat_seed(args.repeat)
    dtype = la.dtype_for(spec.precision)
    episode = task.episode(args.shots, seed=[seed, 0], dtype=dtype)
    cfg = spec.adapter_config(r, n, spec.freeze_down)
    return task, episode, run_episode(task, episode, cfg, spec.train_config(), seed=[seed, 1])


def cmd_export_adapter(args) -> int:
    spec = _spec_from_args(args)
    task, episode, result = _train_one(spec, args)
    out_dir = resolve_output_dir(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for key, ad in result.model.adapters().items():
        path = out_dir / f"{key}.blra"
        checkpoint.save(ad, path)
        print(f"wrote {path}")
    print(f"query accuracy {100 * result.query_accuracy:.2f}% "
          f"(zero-shot {100 * result.zero_shot_accuracy:.2f}%)")
    return EXIT_OK


def cmd_import_adapter(args) -> int:
    spec = _spec_from_args(args)
    task = spec.task()
    dtype = la.dtype_for(spec.precision)
    model = task.base_model(dtype)
    src = Path(args.src)
    files = sorted(src.glob("*.blra"))
    if not files:
        raise FileNotFoundError(f"no .blra checkpoints in {src}")
    towers = model.towers()
    for path in files:
        name, idx = path.stem.split(".")
        if name not in towers:
            raise FormatError("filename", f"{path.name}: unknown tower {name!r}")
        ad = checkpoint.load(path, scaling=spec.scaling)
        if ad.down.dtype != dtype:
            raise ConfigError(f"{path.name} stored in {ad.down.dtype}, run uses {spec.precision}")
        towers[name].attach(int(idx), ad)
    episode = task.episode(max(spec.shots), seed=[spec.repeat_seed(0), 0], dtype=dtype)
    acc, _ = evaluate(model, task.prompts(dtype), episode.query, episode.query_labels,
                      spec.temperature)
    print(f"loaded {len(files)} adapters from {src}")
    print(f"query accuracy {100 * acc:.2f}%")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", default=None, help="YAML experiment file")
    common.add_argument("--out", default=None,
                        help="output directory (default: $BLOCKLORA_OUTPUT_DIR or ./results)")
    common.add_argument("--precision", choices=["f32", "f64"], default=None)
    common.add_argument("--loss", choices=["as-written", "classwise"], default=None)
    common.add_argument("--freeze-down", action="store_true",
                        help="freeze the shared down-projection (ablation)")

    parser = argparse.ArgumentParser(prog="blocklora", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", parents=[common], help="run the property suite")
    p.add_argument("--perturb-grad", type=float, default=0.0,
                   help="add this to one analytic gradient entry (checker self-test)")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("run", parents=[common], help="few-shot sweep over (r, n, K)")
    p.set_defaults(func=cmd_run)

    dims = argparse.ArgumentParser(add_help=False)
    dims.add_argument("--k", type=int, default=512)
    dims.add_argument("--d", type=int, default=512)
    dims.add_argument("--layers", type=_layers, default=None, help="KxD[,KxD...]")
    dims.add_argument("--r", type=int, default=2)
    dims.add_argument("--n", type=int, default=2)

    p = sub.add_parser("cost", parents=[common, dims], help="parameter/MAC/bound report")
    p.add_argument("--m", type=int, default=None, help="rows per forward (default: d)")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("bound", parents=[common, dims], help="generalization bounds")
    p.add_argument("--q", type=int, default=16)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--samples", type=int, default=16000)
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("export-adapter", parents=[common],
                       help="train one episode and write its adapter checkpoints")
    p.add_argument("--r", type=int, default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--shots", type=int, default=16)
    p.add_argument("--repeat", type=int, default=0)
    p.set_defaults(func=cmd_export_adapter)

    p = sub.add_parser("import-adapter", parents=[common],
                       help="load checkpoints into the base model and score the queries")
    p.add_argument("src", help="directory holding <tower>.<layer>.blra files")
    p.set_defaults(func=cmd_import_adapter)

    p = sub.add_parser("init-config", help="write a default experiment file")
    p.add_argument("path", nargs="?", default="experiment.yaml")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_init_config)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ShapeError, BlockLoRAError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
