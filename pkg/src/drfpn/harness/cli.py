"""``python -m drfpn`` entry point: train, eval, gradcheck, verify, dump, bench."""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from ..errors import DrfpnError
from . import bench as bench_mod
from . import suite, verify
from .config import RunConfig, load_config
from .data import gen_dataset
from .dump import dump_features
from .train import TrainingDiverged, evaluate, expected_shapes, init_params, metrics_csv, train
from .weights import atomic_write, load_weights, save_weights

WEIGHTS_NAME = "weights.drfw"


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return value


def _channels(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drfpn", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run configuration file (key = value lines)")
    common.add_argument("--seed", type=_u64, help="overrides the seed from the config")
    common.add_argument("--out", type=Path, help="output directory (default: out_dir from the config)")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="train the toy heatmap regressor")

    p = sub.add_parser("eval", parents=[common], help="per-level MSE and peak hit-rate")
    p.add_argument("--weights", type=Path, help=f"weight file (default: OUT/{WEIGHTS_NAME})")
    p.add_argument("--count", type=int, help="number of samples (default: dataset_size)")
    p.add_argument("--data-seed", type=_u64, help="dataset seed (default: the run seed, i.e. the training set)")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--scope", choices=suite.SCOPES, default="op")

    p = sub.add_parser("verify", parents=[common], help="run every acceptance check")
    p.add_argument("--only", nargs="+", choices=list(verify.CHECKS), help="run a subset of the checks")

    p = sub.add_parser("dump", parents=[common], help="export pyramid outputs as graymaps + CSV")
    p.add_argument("--weights", type=Path, help="weight file (default: freshly initialized parameters)")
    p.add_argument("--sample", type=int, default=0, help="index into the seeded dataset")
    p.add_argument("--channels", type=_channels, default=(0,), help="comma-separated channel indices")

    p = sub.add_parser("bench", parents=[common], help="forward/backward timing, DRFPN vs FPN")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    return parser


def _resolve(args) -> tuple[RunConfig, Path]:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    out = args.out if args.out is not None else Path(cfg.out_dir)
    return cfg, out


def cmd_train(cfg: RunConfig, out: Path, args) -> int:
    t0 = time.perf_counter()
    report = train(cfg, out_dir=out, on_log=lambda s, l: print(f"step {s:5d}  loss {l:.6f}"))
    save_weights(report.params, out / WEIGHTS_NAME)
    atomic_write(out / "loss.csv", report.log_csv())
    atomic_write(out / "config.txt", cfg.to_text())
    summary = {"initial_loss": report.initial_loss, "final_loss": report.final_loss,
               "seconds": time.perf_counter() - t0}
    atomic_write(out / "summary.csv", metrics_csv(summary))
    print(f"initial loss {report.initial_loss:.6f}, final loss {report.final_loss:.6f}; wrote {out}")
    return 0


def cmd_eval(cfg: RunConfig, out: Path, args) -> int:
    path = args.weights if args.weights is not None else out / WEIGHTS_NAME
    params = load_weights(path, expected_shapes(cfg))
    seed = cfg.seed if args.data_seed is None else args.data_seed
    dataset = gen_dataset(seed, cfg.dataset_size if args.count is None else args.count, cfg.image_size)
    metrics = evaluate(params, cfg, dataset)
    atomic_write(out / "metrics.csv", metrics_csv(metrics))
    for k, v in metrics.items():
        print(f"{k:10s} {v:.6f}")
    return 0


def cmd_gradcheck(cfg: RunConfig, out: Path, args) -> int:
    results = suite.run_suite(args.scope, cfg.seed)
    print(suite.format_table(results))
    rows = "case,scope,max_rel_err,threshold,passed\n" + "".join(
        f"{r.name},{r.scope},{r.error!r},{r.threshold!r},{int(r.passed)}\n" for r in results)
    atomic_write(out / f"gradcheck_{args.scope}.csv", rows)
    return 0 if all(r.passed for r in results) else 1


def cmd_verify(cfg: RunConfig, out: Path, args) -> int:
    names = args.only or list(verify.CHECKS)
    results = []
    for name in names:
        check = verify.CHECKS[name]
        result = check(cfg) if name == "training" else check()
        print(result.line(), flush=True)
        results.append(result)
    lines = "".join(r.line() + "\n" for r in results)
    atomic_write(out / "verify.txt", lines)
    passed = sum(r.passed for r in results)
    print(f"{passed}/{len(results)} checks passed")
    return 0 if passed == len(results) else 1


def cmd_dump(cfg: RunConfig, out: Path, args) -> int:
    if args.weights is not None:
        params = load_weights(args.weights, expected_shapes(cfg))
    else:
        params = init_params(cfg)
    dataset = gen_dataset(cfg.seed, args.sample + 1, cfg.image_size)
    written = dump_features(params, cfg, dataset[args.sample].image, out / "features", args.channels)
    print(f"wrote {len(written)} files to {out / 'features'}")
    return 0


def cmd_bench(cfg: RunConfig, out: Path, args) -> int:
    report = bench_mod.bench(cfg, args.repeats, args.warmup)
    print("\n".join(report.lines()))
    atomic_write(out / "bench.csv", report.csv())
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "verify": cmd_verify, "dump": cmd_dump, "bench": cmd_bench}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, out = _resolve(args)
        return COMMANDS[args.command](cfg, out, args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (DrfpnError, OSError, ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
