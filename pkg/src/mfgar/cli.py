"""Command-line harness: generate datasets, train models, run RMSE sweeps.

Subcommands
-----------
* ``generate`` writes a dataset directory (manifest + per-level inputs CSV +
  field arrays) for one PDE benchmark.
* ``train`` fits one model kind on a dataset directory and writes the model
  bundle plus the optimizer trace.
* ``benchmark`` sweeps the high-fidelity sample count, repeating each point
  with shuffled designs (distinct sampler streams per repeat), and emits
  ``results.csv`` (deterministic given seeds; one row per model/sweep/repeat
  plus mean/std summary rows) and ``timings.csv`` (wall-clock, inherently
  non-deterministic, kept out of the reproducible file).

Exit codes: 0 ok, 1 user error, 2 fit failure.  The worker count for
benchmark jobs comes from the ``MFGAR_WORKERS`` environment variable.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cigar import cigar_fit
from .gar import (
    GarConfig,
    build_subset_plan,
    gar_fit_recursive,
    ar_baseline_fit,
    gar_predict,
    save_gar,
)
from .hogp import FitConfig, tgp_fit, tgp_predict, save_tgp
from .metrics import nll_metric, rmse
from .optim import OptimConfig
from .pdebench import (
    load_dataset,
    make_dataset,
    make_test_set,
    pde_spec,
    save_dataset,
    spec_from_dict,
    spec_to_dict,
)

MODEL_KINDS = ("gar", "cigar", "ar", "hogp")
USER_ERROR, FIT_FAILURE = 1, 2


@dataclass
class ExperimentConfig:
    """Validated benchmark sweep description (one per ``benchmark`` run)."""

    pde: str
    mesh_variant: str
    models: list
    n_low: int
    sweep: list
    n_test: int
    structure: str
    aligned: bool
    sampler: str
    repeats: int
    seed: int
    max_iters: int
    step: float
    out: Path
    workers: int = 1
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for kind in self.models:
            if kind not in MODEL_KINDS:
                raise ValueError(f"unknown model kind {kind!r}")
        if not self.sweep:
            raise ValueError("empty high-fidelity sweep")
        if self.structure == "subset" and max(self.sweep) > self.n_low:
            raise ValueError("sweep values must not exceed n_low for subset runs")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if "ar" in self.models and not self.aligned:
            # fidelity meshes differ for every benchmark problem, so the
            # scalar transfer needs the interpolated (aligned) outputs
            raise ValueError("the 'ar' baseline requires aligned outputs; add --aligned")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(USER_ERROR)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mfgar", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--pde", choices=("burgers", "poisson", "heat"), required=True)
        p.add_argument("--mesh-variant", choices=("main", "appendix"), default="main")
        p.add_argument("--n-low", type=int, default=32)
        p.add_argument("--structure", choices=("subset", "nonsubset"), default="subset")
        p.add_argument("--aligned", action="store_true")
        p.add_argument("--sampler", choices=("uniform", "sobol"), default="uniform")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, required=True)

    gen = sub.add_parser("generate", help="write a dataset directory")
    add_common(gen)
    gen.add_argument("--n-high", type=int, default=8)

    train = sub.add_parser("train", help="fit one model on a dataset directory")
    train.add_argument("--data", type=Path, required=True)
    train.add_argument("--model", choices=MODEL_KINDS, required=True)
    train.add_argument("--max-iters", type=int, default=150)
    train.add_argument("--step", type=float, default=0.05)
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--out", type=Path, required=True)

    bench = sub.add_parser("benchmark", help="sweep high-fidelity counts")
    add_common(bench)
    bench.add_argument("--model", default="gar", help="comma-separated kinds from gar,cigar,ar,hogp")
    bench.add_argument("--n-high-sweep", default="4,8,16,32")
    bench.add_argument("--n-test", type=int, default=128)
    bench.add_argument("--repeats", type=int, default=5)
    bench.add_argument("--max-iters", type=int, default=150)
    bench.add_argument("--step", type=float, default=0.05)
    return parser


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    spec = pde_spec(args.pde, args.mesh_variant)
    if args.structure == "subset" and args.n_high > args.n_low:
        sys.stderr.write("error: subset structure needs --n-high <= --n-low\n")
        return USER_ERROR
    dataset = make_dataset(
        spec, args.n_low, args.n_high, args.sampler, args.structure, args.aligned, args.seed
    )
    plan = build_subset_plan(dataset)
    manifest_extra = {
        "spec": spec_to_dict(spec),
        "mesh_variant": args.mesh_variant,
        "sampler": args.sampler,
        "seed": args.seed,
        "structure": args.structure,
        "aligned": args.aligned,
        "plan": {"n_matched": plan.n_matched, "n_unmatched": plan.n_unmatched},
    }
    path = save_dataset(dataset, args.out, manifest_extra)
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _fit_model(kind: str, dataset, optim: OptimConfig):
    """Fit one model kind; returns (serializer, model, trace-or-None)."""
    cfg = GarConfig(optim=optim)
    if kind == "gar":
        return "gar", gar_fit_recursive(dataset, cfg)
    if kind == "cigar":
        return "gar", cigar_fit(dataset, cfg)
    if kind == "ar":
        return "gar", ar_baseline_fit(dataset, cfg)
    if kind == "hogp":
        top = dataset.levels[-1]
        model, _ = tgp_fit(top.X, top.Y, FitConfig(optim=optim))
        return "tgp", model
    raise ValueError(f"unknown model kind {kind!r}")


def cmd_train(args) -> int:
    try:
        dataset, manifest = load_dataset(args.data)
    except (OSError, ValueError) as exc:
        sys.stderr.write(f"error: cannot load dataset: {exc}\n")
        return USER_ERROR
    optim = OptimConfig(max_iters=args.max_iters, step=args.step, seed=args.seed)
    try:
        family, model = _fit_model(args.model, dataset, optim)
    except ValueError as exc:
        # contract violations (e.g. scalar transfer on unaligned outputs)
        sys.stderr.write(f"error: {exc}\n")
        return USER_ERROR
    except (RuntimeError, np.linalg.LinAlgError) as exc:
        sys.stderr.write(f"fit failure: {exc}\n")
        return FIT_FAILURE
    args.out.mkdir(parents=True, exist_ok=True)
    ref = str(args.data)
    path = args.out / "model.json"
    if family == "tgp":
        save_tgp(model, path, dataset_ref=ref)
    else:
        save_gar(model, path, dataset_ref=ref)
    meta = {
        "model": args.model,
        "dataset": ref,
        "seed": args.seed,
        "max_iters": args.max_iters,
    }
    with open(args.out / "train_meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------


def _predict(kind: str, model, X):
    if kind == "hogp":
        return tgp_predict(model, X)
    return gar_predict(model, X)


def _run_job(job) -> dict:
    """One benchmark cell: build data, fit, evaluate; returns a result row."""
    (kind, n_high, repeat, spec_doc, args_doc) = job
    spec = spec_from_dict(spec_doc)
    a = argparse.Namespace(**args_doc)
    seed = a.seed + 1000 * repeat
    # distinct design per repeat: shifted deterministic stream
    block = a.n_low + max(a.sweep) + a.n_test
    skip = repeat * block
    row = {
        "model": kind,
        "n_high": n_high,
        "repeat": repeat,
        "seed": seed,
        "status": "ok",
        "rmse": "",
        "nll": "",
    }
    out_dir = Path(a.out) / "jobs" / f"{kind}_n{n_high}_r{repeat}"
    start = time.perf_counter()
    try:
        dataset = make_dataset(
            spec, a.n_low, n_high, a.sampler, a.structure, a.aligned, seed
        ) if a.sampler == "uniform" else _sobol_dataset(spec, a, n_high, skip)
        X_test, Y_test = make_test_set(
            spec, a.n_test, a.sampler, seed, skip=skip + a.n_low + n_high
        )
        optim = OptimConfig(max_iters=a.max_iters, step=a.step, seed=seed)
        family, model = _fit_model(kind, dataset, optim)
        post = _predict(kind, model, X_test)
        save_dataset(
            dataset,
            out_dir / "dataset",
            {"spec": spec_doc, "seed": seed, "structure": a.structure, "aligned": a.aligned},
        )
        model_path = out_dir / "model.json"
        if family == "tgp":
            save_tgp(model, model_path, dataset_ref=str(out_dir / "dataset"))
        else:
            save_gar(model, model_path, dataset_ref=str(out_dir / "dataset"))
        row["rmse"] = repr(rmse(post.mean, Y_test))
        row["nll"] = repr(nll_metric(post.mean, post.variance_diag, Y_test))
        row["dataset_ref"] = str(out_dir / "dataset" / "manifest.json")
        row["model_ref"] = str(model_path)
    except Exception as exc:  # partial failure: flag the row, keep going
        row["status"] = f"failed: {type(exc).__name__}: {exc}"
        row["dataset_ref"] = ""
        row["model_ref"] = ""
    row["_wall_time"] = time.perf_counter() - start
    return row


def _sobol_dataset(spec, a, n_high, skip):
    """Sobol designs shifted per repeat so repeats see distinct points."""
    from .pdebench import sample_inputs, solve_field, upsample_bilinear

    X_low = sample_inputs(spec, a.n_low, "sobol", 0, skip=skip)
    if a.structure == "subset":
        X_high = X_low[:n_high]
    else:
        X_high = sample_inputs(spec, n_high, "sobol", 0, skip=skip + a.n_low)
    low_fields = [solve_field(spec, x, "low") for x in X_low]
    high_fields = [solve_field(spec, x, "high") for x in X_high]
    if a.aligned:
        target = high_fields[0].axes
        low_fields = [upsample_bilinear(s, target) for s in low_fields]
    from .gar import MultiFidelityDataset

    return MultiFidelityDataset(
        [
            (X_low, np.stack([s.field for s in low_fields])),
            (X_high, np.stack([s.field for s in high_fields])),
        ]
    )


RESULT_COLUMNS = [
    "model",
    "n_high",
    "repeat",
    "seed",
    "status",
    "rmse",
    "nll",
    "dataset_ref",
    "model_ref",
]


def cmd_benchmark(args) -> int:
    try:
        sweep = [int(v) for v in str(args.n_high_sweep).split(",") if v]
        kinds = [k.strip() for k in args.model.split(",") if k.strip()]
    except ValueError:
        sys.stderr.write("error: malformed --n-high-sweep\n")
        return USER_ERROR
    try:
        config = ExperimentConfig(
            pde=args.pde,
            mesh_variant=args.mesh_variant,
            models=kinds,
            n_low=args.n_low,
            sweep=sweep,
            n_test=args.n_test,
            structure=args.structure,
            aligned=args.aligned,
            sampler=args.sampler,
            repeats=args.repeats,
            seed=args.seed,
            max_iters=args.max_iters,
            step=args.step,
            out=args.out,
            workers=int(os.environ.get("MFGAR_WORKERS", "1")),
        )
    except ValueError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return USER_ERROR

    spec = pde_spec(config.pde, config.mesh_variant)
    config.out.mkdir(parents=True, exist_ok=True)
    args_doc = {
        "n_low": config.n_low,
        "n_test": config.n_test,
        "sampler": config.sampler,
        "structure": config.structure,
        "aligned": config.aligned,
        "seed": config.seed,
        "max_iters": config.max_iters,
        "step": config.step,
        "sweep": config.sweep,
        "out": str(config.out),
    }
    jobs = [
        (kind, n_high, repeat, spec_to_dict(spec), args_doc)
        for kind in config.models
        for n_high in config.sweep
        for repeat in range(config.repeats)
    ]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            rows = list(pool.map(_run_job, jobs))
    else:
        rows = [_run_job(job) for job in jobs]

    # deterministic ordering regardless of scheduling
    order = {k: i for i, k in enumerate(kinds)}
    rows.sort(key=lambda r: (order[r["model"]], r["n_high"], r["repeat"]))

    summary = []
    for kind in kinds:
        for n_high in sweep:
            vals = [
                (float(r["rmse"]), float(r["nll"]))
                for r in rows
                if r["model"] == kind and r["n_high"] == n_high and r["status"] == "ok"
            ]
            for stat, fn in (("mean", np.mean), ("std", np.std)):
                entry = {c: "" for c in RESULT_COLUMNS}
                entry.update(
                    {
                        "model": kind,
                        "n_high": n_high,
                        "repeat": stat,
                        "status": f"summary/{len(vals)}",
                    }
                )
                if vals:
                    entry["rmse"] = repr(float(fn([v[0] for v in vals])))
                    entry["nll"] = repr(float(fn([v[1] for v in vals])))
                summary.append(entry)

    results_path = args.out / "results.csv"
    with open(results_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        for r in rows + summary:
            writer.writerow({c: r.get(c, "") for c in RESULT_COLUMNS})
    with open(args.out / "timings.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "n_high", "repeat", "wall_time_s"])
        for r in rows:
            writer.writerow([r["model"], r["n_high"], r["repeat"], f"{r['_wall_time']:.3f}"])
    # gnuplot-friendly table: one block per model, columns n_high mean std
    with open(args.out / "results.dat", "w") as fh:
        fh.write("# model blocks: n_high rmse_mean rmse_std\n")
        for kind in kinds:
            fh.write(f'"{kind}"\n')
            for n_high in sweep:
                mean = next(
                    r for r in summary
                    if r["model"] == kind and r["n_high"] == n_high and r["repeat"] == "mean"
                )
                std = next(
                    r for r in summary
                    if r["model"] == kind and r["n_high"] == n_high and r["repeat"] == "std"
                )
                fh.write(f"{n_high} {mean['rmse'] or 'nan'} {std['rmse'] or 'nan'}\n")
            fh.write("\n\n")
    n_ok = sum(1 for r in rows if r["status"] == "ok")
    print(f"wrote {results_path} ({n_ok}/{len(rows)} jobs ok)")
    return 0 if n_ok else FIT_FAILURE


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "generate":
            return cmd_generate(args)
        if args.command == "train":
            return cmd_train(args)
        return cmd_benchmark(args)
    except ValueError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return USER_ERROR


if __name__ == "__main__":
    sys.exit(main())
