"""Command-line entry point: ``gmmda <command> [flags]``.

Payloads go to stdout; diagnostics go to stderr.  Exit codes: 0 success,
1 runtime error, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import generate_pair, load_csv, save_csv
from .deepem import EBlock, deepem_estimate, pretrain_eblock
from .gmm_em import default_init, fit_em
from .metrics import prediction_histogram
from .trainer import (ConfigError, ExperimentConfig, bench_em, evaluate_model, load_model,
                      save_model, train)


class CliError(Exception):
    pass


def _need_file(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"no such file: {path}")
    return p


def _load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return ExperimentConfig.load(_need_file(path))


def _generate(cfg: ExperimentConfig):
    return generate_pair(cfg.seed, cfg.n_per_domain, cfg.d, cfg.C, cfg.shift)


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    src, tgt = _generate(cfg)
    save_csv(src, args.out_src)
    save_csv(tgt, args.out_tgt)
    print(f"wrote {src.n} source and {tgt.n} target rows", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    src = load_csv(_need_file(args.src), "source")
    tgt = load_csv(_need_file(args.tgt), "target")
    model, log = train(cfg, src, tgt, log_path=args.log)
    save_model(model, args.out_model)
    if log.records:
        last = log.records[-1]
        mean_t = np.mean([r.sec_per_batch for r in log.records])
        print(f"epochs={len(log.records)} source_map={last.source_map:.4f} "
              f"target_map={last.target_map:.4f} sec_per_batch={mean_t:.5f}", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    model = load_model(_need_file(args.model))
    ds = load_csv(_need_file(args.data), allow_empty_rows=True)
    print(evaluate_model(model, ds, args.tau).to_json())
    return 0


def _read_values(path: Path) -> np.ndarray:
    vals = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip():
                continue
            for cell in row:
                try:
                    vals.append(float(cell))
                except ValueError:
                    if lineno == 1:
                        break  # header
                    raise CliError(f"{path}:{lineno}: non-numeric value {cell!r}") from None
    if len(vals) < 2:
        raise CliError(f"{path}: need at least two values")
    return np.array(vals)


def fit_deepem(xs: np.ndarray, seed: int = 0, steps: int = 1000, sigma_floor: float = 1e-4):
    """Consistency-train an E-block on one sample, then estimate in a single pass."""
    eb = EBlock.create(seed)
    pretrain_eblock(eb, xs, steps=steps, sigma_floor=sigma_floor)
    return deepem_estimate(eb, ad.Node(xs.reshape(-1, 1)), sigma_floor).to_gmm()


def cmd_fit_gmm(args) -> int:
    xs = _read_values(_need_file(args.values))
    if args.method == "em":
        model, trace = fit_em(xs, default_init(xs), legacy_mstep=args.legacy_mstep)
        out = model.as_dict() | {"iterations": trace.iterations, "converged": trace.converged}
    else:
        if args.legacy_mstep:
            raise CliError("--legacy-mstep applies to --method em only")
        out = fit_deepem(xs, seed=args.seed, steps=args.steps).as_dict()
    print(json.dumps(out))
    return 0


def cmd_bench_em(args) -> int:
    cfg = _load_config(args.config)
    rows = bench_em(cfg, args.batches, rel_tol=args.rel_tol)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "rel_tol", "mean_seconds", "std_seconds", "mean_iterations"])
    for r in rows:
        w.writerow([r.method, r.rel_tol, f"{r.mean_seconds:.9f}", f"{r.std_seconds:.9f}",
                    f"{r.mean_iterations:.2f}"])
    sys.stdout.write(buf.getvalue())
    return 0


def cmd_hist(args) -> int:
    model = load_model(_need_file(args.model))
    ds = load_csv(_need_file(args.data), allow_empty_rows=True)
    prediction_histogram(model.predict(ds.features)).to_csv(args.out)
    return 0


def parse_grid(spec: str) -> list[float]:
    try:
        lo, hi, step = (float(p) for p in spec.split(":"))
    except ValueError:
        raise CliError(f"grid must be start:stop:step, got {spec!r}") from None
    if step <= 0 or hi < lo:
        raise CliError(f"bad grid {spec!r}")
    n = int(round((hi - lo) / step)) + 1
    return [round(lo + i * step, 10) for i in range(n)]


def cmd_sweep_alpha(args) -> int:
    cfg = _load_config(args.config)
    grid = parse_grid(args.grid)
    for a in grid:
        if not 0 <= a <= 1:
            raise CliError(f"alpha_1 must lie in [0, 1], got {a}")
    src, tgt = _generate(cfg)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["alpha_1", "alpha_2", "target_map"])
    for a in grid:
        run = ExperimentConfig.from_dict({**cfg.__dict__, "alpha1": a, "alpha2": round(1.0 - a, 10)})
        model, _ = train(run, src, tgt)
        tmap = evaluate_model(model, tgt, run.tau).map
        w.writerow([a, round(1.0 - a, 10), f"{tmap:.6f}"])
        sys.stdout.flush()
        print(f"alpha_1={a}: target mAP {tmap:.4f}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gmmda", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="write a synthetic source/target pair")
    s.add_argument("--config")
    s.add_argument("--out-src", required=True)
    s.add_argument("--out-tgt", required=True)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("train", help="train a model on a source/target pair")
    s.add_argument("--config")
    s.add_argument("--src", required=True)
    s.add_argument("--tgt", required=True)
    s.add_argument("--out-model", required=True)
    s.add_argument("--log")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="print the metric report of a model on a dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--tau", type=float, default=0.5)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("fit-gmm", help="fit a two-component GMM to a column of values")
    s.add_argument("--values", required=True)
    s.add_argument("--method", choices=("em", "deepem"), default="em")
    s.add_argument("--legacy-mstep", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int, default=1000)
    s.set_defaults(fn=cmd_fit_gmm)

    s = sub.add_parser("bench-em", help="time iterative EM against DeepEM")
    s.add_argument("--config")
    s.add_argument("--batches", type=int, default=100)
    s.add_argument("--rel-tol", type=float, default=1e-6)
    s.set_defaults(fn=cmd_bench_em)

    s = sub.add_parser("hist", help="write the 50-bin prediction histogram")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_hist)

    s = sub.add_parser("sweep-alpha", help="target mAP over alpha_1 in a grid, alpha_2 = 1 - alpha_1")
    s.add_argument("--config")
    s.add_argument("--grid", default="0.1:0.9:0.1")
    s.set_defaults(fn=cmd_sweep_alpha)
    return p


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.fn(args)
    except (CliError, ConfigError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
