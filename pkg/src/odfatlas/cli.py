"""Command line interface: ``odfatlas <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 validation error, 4 numerical failure.
Errors are reported on stderr as one JSON object per line.
"""
import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .atlas import EMError, run_em
from .diffeo import KernelSpec
from .errors import NumericalError, OdfAtlasError, ValidationError
from .manifold import karcher_mean_arrays
from .registration import RegProblem, register
from .synth import generate_cohort
from .transport import OdfField, check_compatible, field_distances

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3, 4


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _error_record(kind, code, message):
    line = json.dumps({"error": kind, "exit": code, "message": " ".join(str(message).split())})
    print(line, file=sys.stderr)
    return code


def cmd_synth(args):
    spec, _ = io.read_run_config(args.config)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cohort = generate_cohort(spec)
    io.write_ofv(cohort.atlas, out / "atlas.ofv")
    subj_dir = out / "subjects"
    subj_dir.mkdir(exist_ok=True)
    for i, (s, m) in enumerate(zip(cohort.subjects, cohort.momenta)):
        io.write_ofv(s, subj_dir / f"subject_{i:03d}.ofv")
        io.write_momv(m, out / f"subject_{i:03d}_m0.momv")
    lines = [f"{k} = {v}" for k, v in vars(spec).items()]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_register(args):
    src, tgt = io.read_ofv(args.source), io.read_ofv(args.target)
    check_compatible(src, tgt)
    w = io.read_weight_map(args.weights, src.lattice) if args.weights else None
    prob = RegProblem(src, tgt, KernelSpec(args.sigma_v), args.sigma2, weight_map=w, timesteps=args.timesteps)
    res = register(prob, args.max_iter, args.tol)
    io.write_momv(res.m0, args.out)
    io.write_trace_csv(res.objective_trace, args.trace or f"{args.out}.trace.csv")
    return EXIT_OK


def _subject_files(directory):
    files = sorted(Path(directory).glob("*.ofv"))
    if len(files) < 2:
        raise ValidationError(f"need at least two .ofv subjects in {directory}")
    return {f.stem: io.read_ofv(f) for f in files}


def cmd_estimate(args):
    _, cfg = io.read_run_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.workers:
        cfg = replace(cfg, workers=args.workers)
    hyper = io.read_ofv(args.hyperatlas)
    subjects = _subject_files(args.subjects)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "diagnostics.csv"

    def progress(state, diag):
        io.write_diagnostics_csv(state.diagnostics, csv_path)

    try:
        state = run_em(subjects, hyper, cfg, on_iteration=progress)
    except EMError as e:
        io.write_diagnostics_csv(e.state.diagnostics, csv_path)
        raise
    io.write_ofv(state.atlas, out / "atlas.ofv")
    io.write_momv(state.m0, out / "m0.momv")
    io.write_ofv(state.psi_bar, out / "psi_bar.ofv")
    io.write_diagnostics_csv(state.diagnostics, csv_path)
    return EXIT_OK


def cmd_karcher(args):
    fields = [io.read_ofv(p) for p in args.inputs]
    check_compatible(*fields)
    weights = np.ones(len(fields)) if args.weights is None else np.asarray(args.weights, dtype=np.float64)
    if weights.shape != (len(fields),):
        raise ValidationError("need one weight per input")
    ref = fields[0]
    mask = np.any([f.mask for f in fields], axis=0)
    sel = np.flatnonzero(mask)
    pts = np.stack([f.values.reshape(-1, ref.grid.K)[sel] for f in fields])
    w = np.repeat(weights[:, None], sel.size, axis=1)
    mean, _, _ = karcher_mean_arrays(pts, w, ref.grid.quad_weights, args.tol, args.max_iter)
    values = np.array(ref.values)
    values.reshape(-1, ref.grid.K)[sel] = mean
    io.write_ofv(OdfField(ref.lattice, ref.grid, values, mask), args.out)
    return EXIT_OK


def cmd_metrics(args):
    a, b = io.read_ofv(args.a), io.read_ofv(args.b)
    d2 = field_distances(a, b) ** 2
    mask = a.mask | b.mask
    with open(args.out, "w") as f:
        f.write("i,j,k,dist2\n")
        for i, j, k in np.argwhere(mask):
            f.write(f"{i},{j},{k},{float(d2[i, j, k])!r}\n")
    return EXIT_OK


def cmd_plot(args):
    io.plot_svg(io.read_diagnostics_csv(args.csv), args.out)
    return EXIT_OK


def build_parser():
    p = _Parser(prog="odfatlas", description="ODF atlas estimation by diffeomorphic EM")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic cohort")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("register", help="register source to target")
    s.add_argument("--source", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--sigma-v", type=float, required=True)
    s.add_argument("--sigma2", type=float, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--weights")
    s.add_argument("--trace")
    s.add_argument("--max-iter", type=int, default=50)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--timesteps", type=int, default=10)
    s.set_defaults(fn=cmd_register)

    s = sub.add_parser("estimate", help="estimate an atlas with EM")
    s.add_argument("--config", required=True)
    s.add_argument("--hyperatlas", required=True)
    s.add_argument("--subjects", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int)
    s.set_defaults(fn=cmd_estimate)

    s = sub.add_parser("karcher", help="voxelwise weighted Karcher mean of fields")
    s.add_argument("--inputs", nargs="+", required=True)
    s.add_argument("--weights", nargs="+", type=float)
    s.add_argument("--out", required=True)
    s.add_argument("--tol", type=float, default=1e-8)
    s.add_argument("--max-iter", type=int, default=200)
    s.set_defaults(fn=cmd_karcher)

    s = sub.add_parser("metrics", help="per-voxel squared geodesic distance")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_metrics)

    s = sub.add_parser("plot", help="metric-vs-iteration SVG from diagnostics.csv")
    s.add_argument("--csv", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_plot)
    return p


def cli_main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as e:
        return _error_record("UsageError", EXIT_USAGE, e)
    try:
        return args.fn(args)
    except EMError as e:
        code = EXIT_NUMERICAL if isinstance(e.cause, NumericalError) else EXIT_VALIDATION
        return _error_record(type(e.cause).__name__, code, e)
    except NumericalError as e:
        return _error_record(type(e).__name__, EXIT_NUMERICAL, e)
    except (ValidationError, OSError) as e:
        return _error_record(type(e).__name__, EXIT_VALIDATION, e)
    except OdfAtlasError as e:
        return _error_record(type(e).__name__, EXIT_VALIDATION, e)


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
