"""Command-line operator surface.

Subcommands: ``simulate`` (write a dataset), ``audit`` (assumption report),
``train``, ``evaluate`` (score a finished run), ``ablate``.  Every command
reads one JSON config, writes its artifacts under a run directory inside the
output root (flag ``--out`` or env ``FLOWIDENT_OUT``, default ``./runs``),
and records a manifest before long work starts.

Exit codes: 0 success; 2 invalid config; 3 unwritable output path; 4 audit
found a failing assumption; 5 referenced dataset missing; 6 corrupt
checkpoint.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from flowident import config as cf
from flowident import evaluation as ev
from flowident import process as pr
from flowident import runio
from flowident import training as tn

EXIT_OK = 0
EXIT_BAD_CONFIG = 2
EXIT_UNWRITABLE = 3
EXIT_AUDIT_FAIL = 4
EXIT_NO_DATASET = 5
EXIT_BAD_CHECKPOINT = 6


class _CliError(SystemExit):
    pass


def _fail(code, message, quiet=False):
    if not quiet:
        print(f"error: {message}", file=sys.stderr)
    raise SystemExit(code)


def _out_root(args):
    return Path(args.out or os.environ.get("FLOWIDENT_OUT", "runs"))


def _load_config(args):
    try:
        with open(args.config) as fh:
            doc = json.load(fh)
        cfg = cf.parse_config(doc)
    except FileNotFoundError:
        _fail(EXIT_BAD_CONFIG, f"config file not found: {args.config}", args.quiet)
    except json.JSONDecodeError as exc:
        _fail(EXIT_BAD_CONFIG, f"config is not valid JSON: {exc}", args.quiet)
    except cf.ConfigFieldError as exc:
        _fail(EXIT_BAD_CONFIG, str(exc), args.quiet)
    if args.seed is not None:
        cfg.process.seed = args.seed
        cfg.process._mix_cache = None
        cfg.process.transition.parameters = pr.default_transition_parameters(
            cfg.process.transition.family, cfg.process.transition.parent_map, args.seed
        )
        cfg.training = replace(cfg.training, seed=args.seed)
        cfg.evaluation.seed = args.seed
    return cfg


def _make_run_dir(args, cfg):
    root = _out_root(args)
    run_id = args.run_id or runio.make_run_id(cfg.training.seed)
    run_dir = root / run_id
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        probe = run_dir / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        _fail(EXIT_UNWRITABLE, f"cannot write to {run_dir}: {exc}", args.quiet)
    return run_dir


def _say(args, message):
    if not args.quiet:
        print(message)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(args):
    cfg = _load_config(args)
    run_dir = _make_run_dir(args, cfg)
    with runio.run_lock(run_dir):
        runio.write_manifest(
            run_dir,
            cf.serialize_config(cfg),
            {"dataset": "dataset.bin", "sidecar": "dataset.bin.json"},
            extra={"command": "simulate"},
        )
        ds = pr.sample_dataset(cfg.process, cfg.training.n_train)
        runio.write_dataset(ds, run_dir / "dataset.bin")
        runio.atomic_write_text(
            run_dir / "dataset.bin.json",
            json.dumps(runio.dataset_sidecar(ds), indent=2, sort_keys=True) + "\n",
        )
    _say(args, f"wrote {ds.n} trajectories to {run_dir / 'dataset.bin'}")
    return EXIT_OK


def cmd_audit(args):
    cfg = _load_config(args)
    report = pr.audit_assumptions(
        cfg.process, n_probes=args.probes, tol=args.tol, seed=cfg.evaluation.seed
    )
    doc = report.to_json_dict()
    if args.run_id or args.out:
        run_dir = _make_run_dir(args, cfg)
        with runio.run_lock(run_dir):
            runio.write_manifest(
                run_dir,
                cf.serialize_config(cfg),
                {"report": "audit.json"},
                extra={"command": "audit"},
            )
            runio.atomic_write_text(
                run_dir / "audit.json", json.dumps(doc, indent=2, sort_keys=True) + "\n"
            )
    if not args.quiet:
        print(f"{'assumption':<12}{'verdict':<10}evidence")
        print(f"{'B1':<12}{report.overall['B1']:<10}density in "
              f"[{report.b1_density['min_density']:.3e}, {report.b1_density['max_density']:.3e}]")
        print(f"{'B2':<12}{report.overall['B2']:<10}operator injectivity has no direct test")
        print(f"{'B3':<12}{report.overall['B3']:<10}min mixing-jacobian singular value "
              f"{report.b3_regularity['min_jacobian_singular_value']:.3e}")
        print(f"{'B4':<12}{report.overall['B4']:<10}model-side (architecture)")
        print(f"{'C1':<12}{report.overall['C1']:<10}family smoothness")
        ev_ = report.c2_sufficiency
        print(f"{'C2':<12}{report.overall['C2']:<10}pass fraction {ev_.pass_fraction:.2f} "
              f"at tol {ev_.tolerance:g}")
        print(f"{'C3':<12}{report.overall['C3']:<10}model-side (architecture)")
        for w in report.warnings:
            print(f"warning: {w}")
    tested = [v for v in report.overall.values() if v != "UNTESTED"]
    return EXIT_OK if all(v == "PASS" for v in tested) else EXIT_AUDIT_FAIL


def _load_or_make_dataset(cfg, args):
    if cfg.dataset:
        path = Path(cfg.dataset)
        if not path.exists():
            _fail(EXIT_NO_DATASET, f"dataset not found: {path}", args.quiet)
        ds = runio.read_dataset(path, spec=cfg.process)
        return ds
    return pr.sample_dataset(cfg.process, cfg.training.n_train)


def cmd_train(args):
    cfg = _load_config(args)
    run_dir = _make_run_dir(args, cfg)
    dataset = _load_or_make_dataset(cfg, args)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    metrics_path = run_dir / "metrics.jsonl"

    with runio.run_lock(run_dir):
        runio.write_manifest(
            run_dir,
            cf.serialize_config(cfg),
            {
                "checkpoints": "checkpoints",
                "final_checkpoint": "checkpoints/final.ckpt",
                "metrics": "metrics.jsonl",
            },
            extra={"command": "train"},
        )
        records = []

        def metrics_cb(rec):
            records.append(json.dumps(rec, sort_keys=True))

        def checkpoint_cb(model, step):
            runio.write_checkpoint(model, ckpt_dir / f"step_{step:07d}.ckpt")

        model, history = tn.train(
            cfg.process,
            cfg.training,
            model_cfg=cfg.model,
            dataset=dataset,
            quiet=args.quiet,
            metrics_cb=metrics_cb,
            checkpoint_cb=checkpoint_cb,
        )
        runio.write_checkpoint(model, ckpt_dir / "final.ckpt")
        runio.atomic_write_text(metrics_path, "\n".join(records) + ("\n" if records else ""))
    if history.diverged:
        _say(args, f"training diverged at step {history.aborted_at}; last good checkpoint kept")
    _say(args, f"final checkpoint at {ckpt_dir / 'final.ckpt'}")
    return EXIT_OK


def _locate_run(args, run_id):
    run_dir = _out_root(args) / run_id
    if not run_dir.exists():
        _fail(EXIT_NO_DATASET, f"run directory not found: {run_dir}", args.quiet)
    return run_dir


def cmd_evaluate(args):
    run_dir = _locate_run(args, args.run)
    manifest_path = run_dir / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
        cfg = cf.parse_config(manifest["config"])
    except FileNotFoundError:
        _fail(EXIT_BAD_CONFIG, f"run manifest missing: {manifest_path}", args.quiet)
    except (KeyError, json.JSONDecodeError, cf.ConfigFieldError) as exc:
        _fail(EXIT_BAD_CONFIG, f"manifest config invalid: {exc}", args.quiet)
    ckpt = run_dir / "checkpoints" / "final.ckpt"
    if not ckpt.exists():
        _fail(EXIT_BAD_CHECKPOINT, f"checkpoint missing: {ckpt}", args.quiet)
    try:
        model = runio.read_checkpoint(ckpt)
    except runio.FormatError as exc:
        _fail(EXIT_BAD_CHECKPOINT, str(exc), args.quiet)
    report = ev.evaluate_model(
        model,
        cfg.process,
        n_eval=cfg.evaluation.n_eval,
        corr=cfg.evaluation.corr,
        seed=cfg.evaluation.seed,
    )
    with runio.run_lock(run_dir):
        runio.atomic_write_text(
            run_dir / "report.json",
            json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n",
        )
        report.to_csv(run_dir / "report.csv", run_id=run_dir.name)
    _say(
        args,
        f"mcc_style={report.mcc_style:.4f} "
        f"r2_content={np.mean(report.r2_content):.4f} "
        f"r2_cross={np.mean(report.r2_cross):.4f}",
    )
    return EXIT_OK


def cmd_ablate(args):
    cfg = _load_config(args)
    run_dir = _make_run_dir(args, cfg)
    seeds = [int(s) for s in args.seeds.split(",")]
    with runio.run_lock(run_dir):
        runio.write_manifest(
            run_dir,
            cf.serialize_config(cfg),
            {"table": "ablation.csv", "plot_data": "ablation_plot.json"},
            extra={"command": "ablate", "seeds": seeds},
        )

        def spec_builder(seed):
            return pr.make_spec(
                family=cfg.process.transition.family,
                n_s=cfg.process.n_s,
                n_c=cfg.process.n_c,
                n_x=cfg.process.n_x,
                T=cfg.process.T,
                seed=seed,
                mixing_depth=cfg.process.mixing.depth,
                invertible=cfg.process.mixing.invertible,
                activation=cfg.process.mixing.activation,
            )

        table = ev.ablation_suite(
            spec_builder,
            cfg.training,
            seeds=seeds,
            model_cfg=cfg.model,
            n_eval=min(cfg.evaluation.n_eval, 384),
            quiet=args.quiet,
        )
        table.to_csv(run_dir / "ablation.csv")
        runio.atomic_write_text(
            run_dir / "ablation_plot.json",
            json.dumps(table.plot_data(), indent=2, sort_keys=True) + "\n",
        )
    if not args.quiet:
        for v in table.variants:
            agg = table.aggregates[v]
            print(f"{v:<10} mcc {agg['mcc_mean']:.3f} +- {agg['mcc_std']:.3f}   "
                  f"r2 {agg['r2_mean']:.3f} +- {agg['r2_std']:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="flowident",
        description="Identifiable latent sequence models: simulate, audit, train, evaluate, ablate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="path to a JSON run config")
        p.add_argument("--out", default=None, help="output root (default env FLOWIDENT_OUT or ./runs)")
        p.add_argument("--seed", type=int, default=None, help="override every seed in the config")
        p.add_argument("--run-id", default=None, help="run directory name (default timestamp+seed hash)")
        p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("simulate", help="sample a dataset and write it with its sidecar")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("audit", help="check theorem assumptions numerically")
    common(p)
    p.add_argument("--probes", type=int, default=50)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("train", help="fit a model with the configured backend")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a finished training run")
    p.add_argument("run", help="run id under the output root")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--run-id", default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and compare model variants across seeds")
    common(p)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated training seeds")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SystemExit as exc:
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
