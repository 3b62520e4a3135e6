"""Command-line entry point.

    adapterlab run CONFIG [--out DIR] [--set KEY=VAL ...] [--seed S] [--jobs N]
    adapterlab suite CONFIG [--out DIR] [--set KEY=VAL ...] [--seed S] [--jobs N]
    adapterlab scorelab PRESET [--out DIR] [--seed S] [--samples N] [--steps N]
    adapterlab validate CONFIG [--set KEY=VAL ...] [--seed S]
    adapterlab presets

Exit codes: 0 success, 1 runtime failure (see errors.log), 2 invalid input.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import os
import sys
import traceback

import numpy as np

from . import __version__
from . import config as C
from . import pipelines as P
from . import scorelab as SL
from . import world as W

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, config_path, model, files, extra=None) -> str:
    """Write manifest.json listing every output with its sha256.

    The wall-clock timestamp goes to timestamp.txt so the manifest itself is
    reproducible byte for byte.
    """
    stamp = os.path.join(out_dir, "timestamp.txt")
    with open(stamp, "w") as fh:
        fh.write(datetime.datetime.now(datetime.timezone.utc).isoformat() + "\n")
    rel = sorted({os.path.relpath(f, out_dir) for f in files})
    manifest = {
        "tool_version": __version__,
        "config_path": None if config_path is None else str(config_path),
        "config_hash": None if model is None else C.config_hash(model),
        "resolved_config": None if model is None else C.resolved(model),
        "output_dir": str(out_dir),
        "timestamp_file": "timestamp.txt",
        "files": [{"path": r.replace(os.sep, "/"), "sha256": _sha256(os.path.join(out_dir, r))} for r in rel],
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", newline="\n") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


def _write_errors(out_dir, failures) -> str:
    path = os.path.join(out_dir, "errors.log")
    with open(path, "w", newline="\n") as fh:
        for name, msg in failures:
            fh.write(f"[{name}]\n{msg.rstrip()}\n\n")
    return path


def _load(args):
    try:
        return C.load_file(args.config, args.set, args.seed)
    except C.ConfigError as err:
        print(f"invalid config {args.config}:", file=sys.stderr)
        for p in err.problems:
            print(f"  {p}", file=sys.stderr)
        return None
    except OSError as err:
        print(f"cannot read config: {err}", file=sys.stderr)
        return None


def _put(out_dir, name, text, written):
    path = os.path.join(out_dir, name)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)
    written.append(path)


def run_single(model, out_dir) -> tuple:
    """Run one pipeline; returns (written files, failures)."""
    from .render.io import write_obj, write_pfm, write_png

    cfg = C.to_pipeline(model)
    report = P.safe_run(cfg)
    written = []
    _put(out_dir, "report.json", P.dumps(report.summary()), written)
    head = ["seed"] + list(P.METRICS)
    vals = [str(report.seed)] + [P._num(report.metrics.get(m, float("nan"))) for m in P.METRICS]
    _put(out_dir, "table.csv", ",".join(head) + "\n" + ",".join(vals) + "\n", written)
    if not report.ok:
        return written, [(f"seed {report.seed}", report.error)]
    path = os.path.join(out_dir, "views.png")
    write_png(path, P.contact_sheet(report))
    written.append(path)
    for v, view in enumerate(report.terminal):
        path = os.path.join(out_dir, f"depth_{v:02d}.pfm")
        write_pfm(path, view[..., 4].astype(np.float32))
        written.append(path)
    state = report.state
    if state is not None and state.phase == "mesh" and state.mesh is not None:
        path = os.path.join(out_dir, "mesh.obj")
        write_obj(path, state.mesh)
        written.append(path)
    return written, []


def run_suite_model(model, out_dir, jobs) -> tuple:
    suite = model.suite or C.SuiteModel()
    configs = C.suite_configs(model)
    result = P.run_suite(configs, suite.n_seeds, base_seed=model.seed, jobs=jobs)
    written = P.write_suite(result, out_dir, images=suite.images)
    failures = [(f"{cid} seed {r.seed}", r.error) for cid, reps in sorted(result.runs.items()) for r in reps if not r.ok]
    return written, failures


def _execute(args, as_suite: bool) -> int:
    model = _load(args)
    if model is None:
        return EXIT_INVALID
    if args.jobs < 1:
        print("--jobs must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    try:
        if as_suite or model.suite is not None:
            written, failures = run_suite_model(model, out_dir, args.jobs)
        else:
            written, failures = run_single(model, out_dir)
    except C.ConfigError as err:
        for p in err.problems:
            print(f"  {p}", file=sys.stderr)
        return EXIT_INVALID
    except Exception:
        failures, written = [("run", traceback.format_exc())], []
    if failures:
        written.append(_write_errors(out_dir, failures))
    write_manifest(out_dir, args.config, model, written)
    if failures:
        print(f"{len(failures)} run(s) failed; see {os.path.join(out_dir, 'errors.log')}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {len(written)} files to {out_dir} (config {C.config_hash(model)[:12]})")
    return EXIT_OK


def cmd_run(args) -> int:
    return _execute(args, as_suite=False)


def cmd_suite(args) -> int:
    return _execute(args, as_suite=True)


def cmd_scorelab(args) -> int:
    if args.preset not in SL.PRESETS:
        print(f"unknown scorelab preset {args.preset!r}; known: {', '.join(sorted(SL.PRESETS))}", file=sys.stderr)
        return EXIT_INVALID
    os.makedirs(args.out, exist_ok=True)
    seed = 0 if args.seed is None else args.seed
    rep = SL.run_scorelab(args.preset, args.samples, args.steps, seed)
    written = []
    path = os.path.join(args.out, "density.csv")
    SL.write_density_csv(path, rep.table)
    written.append(path)
    summary = {"preset": args.preset, "n_samples": args.samples, "n_steps": args.steps, "seed": seed, **rep.summary()}
    _put(args.out, "summary.json", json.dumps(summary, sort_keys=True, indent=2) + "\n", written)
    write_manifest(args.out, None, None, written, {"scorelab": {"preset": args.preset, "seed": seed}})
    print(f"KL exact {rep.kl_exact:.4f}  KL averaged {rep.kl_averaged:.4f}  ratio {rep.kl_ratio:.2f}")
    return EXIT_OK


def cmd_validate(args) -> int:
    model = _load(args)
    if model is None:
        return EXIT_INVALID
    print(json.dumps(C.resolved(model), sort_keys=True, indent=2))
    print(f"config hash {C.config_hash(model)}")
    return EXIT_OK


def cmd_presets(args) -> int:
    print("worlds:   " + ", ".join(sorted(W.PRESETS)))
    print("scorelab: " + ", ".join(sorted(SL.PRESETS)))
    rows = P.table1_configs()
    print("suite table1 rows:")
    for cid in sorted(rows):
        print(f"  {cid}  {rows[cid].label}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adapterlab", description="Multi-view diffusion with 3D feedback on toy worlds.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def config_cmd(name, help_text, func, runs=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="TOML config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VAL", help="override a dotted config key")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if runs:
            p.add_argument("--out", default="out", metavar="DIR")
            p.add_argument("--jobs", type=int, default=1, metavar="N", help="parallel suite runs")
        p.set_defaults(func=func)

    config_cmd("run", "run the configured pipeline (or suite if the config has [suite])", cmd_run)
    config_cmd("suite", "run the table1 suite over paired seeds", cmd_suite)
    config_cmd("validate", "check a config without running it", cmd_validate, runs=False)

    p = sub.add_parser("scorelab", help="1D product-of-experts sampling study")
    p.add_argument("preset")
    p.add_argument("--out", default="out", metavar="DIR")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--steps", type=int, default=30)
    p.set_defaults(func=cmd_scorelab)

    p = sub.add_parser("presets", help="list world, scorelab and suite presets")
    p.set_defaults(func=cmd_presets)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
