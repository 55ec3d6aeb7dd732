"""Command line entry point: ``matkaczmarz {generate,solve,benchmark,restore,replay}``.

Every run writes ``manifest.json`` into its output directory. The manifest
echoes the resolved configuration, so ``matkaczmarz replay manifest.json``
re-executes the run and checks that the outputs match byte for byte once
the timing fields are stripped.

Exit codes: 0 ok, 1 replay mismatch, 2 configuration error, 3 iteration
budget exhausted, 4 divergence, 5 I/O error.
"""
import argparse
import csv
import io
import json
import logging
import math
import os
import platform
import sys
import time
import warnings

import numpy as np

from . import __version__, analysis, imaging, matcore, problems
from .errors import (
    CapacityError,
    ConfigError,
    DivergenceError,
    DomainError,
    InconsistentSystemError,
    MatrixMarketError,
    ShapeError,
)
from .rng import ALGORITHM
from .solvers import METHOD_TAGS, Method, ResidualRel, SolutionRRN, SolveConfig, solve

log = logging.getLogger("matkaczmarz")

OUT_ENV = "MATKACZMARZ_OUT"
DEFAULT_OUT = "matkaczmarz-out"
EXIT_OK, EXIT_MISMATCH, EXIT_CONFIG, EXIT_BUDGET, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4, 5
TRACE_COLUMNS = ("k", "rrn", "residual_rel", "row")
TIMING_COLUMNS = ("wall_mean_s", "speed_up_vs_rbk")
# keys of the config echo that are paths and must be absolute for replay
PATH_KEYS = ("spec", "problem_dir", "image", "source")


# ---------------------------------------------------------------- output helpers

def load_schema(name):
    """Shipped JSON schema: ``"report"`` or ``"manifest"``."""
    from importlib import resources

    text = resources.files("matkaczmarz").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def _table_text(columns, rows, fmt):
    if fmt == "json":
        clean = [{c: (None if isinstance(r[c], float) and not math.isfinite(r[c]) else r[c]) for c in columns}
                 for r in rows]
        return json.dumps(clean, indent=2) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r[c]) for c in columns])
    return buf.getvalue()


def _write_text(path, text):
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _write_json(path, obj):
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _versions():
    import scipy

    v = {"matkaczmarz": __version__, "python": platform.python_version(), "numpy": np.__version__,
         "scipy": scipy.__version__}
    try:
        import PIL

        v["pillow"] = PIL.__version__
    except ImportError:
        pass
    return v


def _out_dir(args):
    out = args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT
    os.makedirs(out, exist_ok=True)
    return out


def _method(args):
    if args.method == "rgrbk" and args.theta is None:
        raise ConfigError("--method rgrbk requires --theta")
    return Method(args.method, args.theta if args.method == "rgrbk" else None)


def _check_theta_only_rgrbk(args):
    if args.theta is not None and args.method != "rgrbk":
        raise ConfigError(f"--theta only applies to rgrbk, not {args.method}")


def _load_problem(args):
    """Instance from ``--problem-dir`` (A/B/C.mtx) or a spec path / ``registry:name``."""
    if args.problem_dir:
        d = args.problem_dir
        A, B, C = (problems.load_matrix_market(os.path.join(d, f"{n}.mtx")) for n in "ABC")
        C = np.asarray(C.toarray() if hasattr(C, "toarray") else C, dtype=np.float64)
        spec = None
        if os.path.exists(os.path.join(d, "problem.json")):
            spec = problems.load_spec(os.path.join(d, "problem.json"))
        return problems.ProblemInstance(A=A, B=B, C=C, X_true=None, spec=spec,
                                        density={"A": problems.density(A), "B": problems.density(B)})
    return problems.generate(_spec(args.spec))


def _spec(ref):
    if ref is None:
        raise ConfigError("give a problem spec (file or registry:name) or --problem-dir")
    if ":" in ref and not os.path.exists(ref):
        reg, name = ref.removeprefix("registry:").split(":", 1)
        entries = problems.registry(reg)
        if name not in entries:
            raise ConfigError(f"registry {reg!r} has no problem {name!r}; available: {sorted(entries)}")
        return entries[name]
    spec = problems.load_spec(ref)
    if isinstance(spec, list):
        raise ConfigError("this subcommand needs a single problem spec, not a list")
    return spec


def _specs(ref):
    if ref in problems.REGISTRIES:
        return list(problems.registry(ref).values())
    if ":" in ref and not os.path.exists(ref):
        return [_spec(ref)]
    spec = problems.load_spec(ref)
    return spec if isinstance(spec, list) else [spec]


# ---------------------------------------------------------------- subcommands

def cmd_generate(args, out):
    spec = _spec(args.spec)
    inst = problems.generate(spec)
    names = {"A": inst.A, "B": inst.B, "C": inst.C, "Xtrue": inst.X_true}
    for name, M in names.items():
        problems.write_matrix_market(os.path.join(out, f"{name}.mtx"), M,
                                     comment=f"{spec.name} seed={spec.seed} {name}")
    _write_json(os.path.join(out, "problem.json"), spec.to_dict())
    print(f"wrote {spec.name}: A {inst.A.shape}, B {inst.B.shape} to {out}")
    return [f"{n}.mtx" for n in names] + ["problem.json"], EXIT_OK, {}


def cmd_solve(args, out):
    _check_theta_only_rgrbk(args)
    method = _method(args)
    inst = _load_problem(args)
    tol = 1e-6 if args.tol is None else args.tol
    ref = None
    if args.stop == "rrn":
        ref = analysis.reference_solution(inst.A, inst.B, inst.C)
        stop = SolutionRRN(tol, ref.X_star)
    else:
        stop = ResidualRel(tol)
    config = SolveConfig(method=method, stop=stop, alpha_rule=args.alpha_rule, alpha=args.alpha,
                         max_iter=args.max_iter, seed=args.seed, record_trace=True)
    report = solve(inst.A, inst.B, inst.C, None, config)
    body = report.to_dict(include_timing=False)
    body["problem"] = {
        "name": inst.spec.name if inst.spec is not None else os.path.basename(os.path.normpath(args.problem_dir)),
        "shape": list(inst.shape),
        "reference_case": ref.case if ref is not None else None,
        "stop_rule": stop.kind,
        "tol": tol,
    }
    _write_json(os.path.join(out, "report.json"), body)
    ext = "json" if args.format == "json" else "csv"
    trace_rows = [{"k": t.k, "rrn": t.rrn, "residual_rel": t.residual_rel, "row": t.row} for t in report.trace]
    _write_text(os.path.join(out, f"trace.{ext}"), _table_text(TRACE_COLUMNS, trace_rows, args.format))
    problems.write_matrix_market(os.path.join(out, "X.mtx"), report.X, comment=f"{method.label} iterate")
    print(f"{method.label}: {report.terminated_by} after {report.iterations} iterations, "
          f"rrn={report.final_rrn:.3e} residual_rel={report.final_residual_rel:.3e}")
    code = EXIT_BUDGET if report.terminated_by == "max_iter" else EXIT_OK
    return ["report.json", f"trace.{ext}", "X.mtx"], code, {"wall_seconds": report.wall_seconds}


def cmd_benchmark(args, out):
    tags = [t.strip() for t in args.methods.split(",") if t.strip()]
    methods = []
    for tag in tags:
        if tag == "rgrbk" and args.theta is None:
            raise ConfigError("rgrbk in --methods requires --theta")
        methods.append(Method(tag, args.theta if tag == "rgrbk" else None))
    specs = _specs(args.source)
    insts = [(s.name, problems.generate(s)) for s in specs]
    for name, inst in insts:
        # generated matrices are generic test inputs; report how well conditioned they came out
        conds = []
        for M in (inst.A, inst.B):
            f = matcore.svd(matcore.as_dense(M.toarray() if matcore.is_sparse(M) else M))
            conds.append(f.sigma_max / f.sigma_min_positive)
        log.info("%s: cond(A)=%.3g cond(B)=%.3g (smallest positive singular value)", name, *conds)
    rows = analysis.benchmark(insts, methods, trials=args.trials, alpha_rule=args.alpha_rule,
                              tol=1e-6 if args.tol is None else args.tol, max_iter=args.max_iter,
                              seed=args.seed, workers=args.workers)
    ext = "json" if args.format == "json" else "csv"
    if args.format == "json":
        text = _table_text(analysis.BENCHMARK_COLUMNS, rows, "json")
    else:
        text = analysis.benchmark_csv(rows, timing=True)
    _write_text(os.path.join(out, f"benchmark.{ext}"), text)
    for r in rows:
        print(f"{r['problem_id']:<20} {r['method']:<6} IT={_cell(r['it_mean']) or '-':<22} "
              f"failures={r['failures']}")
    all_failed = all(r["failures"] == r["trials"] for r in rows)
    return [f"benchmark.{ext}"], EXIT_BUDGET if all_failed else EXIT_OK, {}


def cmd_restore(args, out):
    _check_theta_only_rgrbk(args)
    method = _method(args)
    if args.image:
        image = imaging.load_png(args.image)
        name = os.path.splitext(os.path.basename(args.image))[0]
    else:
        image = imaging.synthetic_image(args.size, args.size)
        name = "synthetic"
    h, w, _ = image.shape
    if min(h, w) < imaging.SSIM_WINDOW:
        raise ConfigError(f"image is {h}x{w}; SSIM needs at least {imaging.SSIM_WINDOW} pixels per side")
    model = imaging.BlurModel.gaussian(h, w, args.kernel_size, args.sigma, boundary=args.boundary)
    observed = imaging.forward_blur(model, imaging.to_stack(image))
    stop = ResidualRel(0.0 if args.tol is None else args.tol)
    config = SolveConfig(method=method, stop=stop, alpha_rule=args.alpha_rule, alpha=args.alpha,
                         max_iter=args.iters, seed=args.seed)
    X, report = imaging.restore(model, observed, config)
    blurred = imaging.clamp(imaging.from_stack(observed, h, w))
    restored = imaging.clamp(imaging.from_stack(X, h, w))
    files = ["restored.png"]
    imaging.save_png(os.path.join(out, "restored.png"), restored)
    if args.save_blurred:
        imaging.save_png(os.path.join(out, "blurred.png"), blurred)
        files.append("blurred.png")
    row = {
        "image": name,
        "method": method.tag,
        "theta": method.theta,
        "iterations": report.iterations,
        "psnr_blurred": imaging.psnr(image, blurred),
        "psnr_restored": imaging.psnr(image, restored),
        "ssim_blurred": imaging.ssim(image, blurred),
        "ssim_restored": imaging.ssim(image, restored),
    }
    ext = "json" if args.format == "json" else "csv"
    if args.format == "json":
        text = _table_text(imaging.METRICS_COLUMNS, [row], "json")
    else:
        text = imaging.metrics_csv([row])
    _write_text(os.path.join(out, f"metrics.{ext}"), text)
    files.append(f"metrics.{ext}")
    print(f"{name} {method.label}: PSNR {row['psnr_blurred']:.2f} -> {row['psnr_restored']:.2f} dB, "
          f"SSIM {row['ssim_blurred']:.4f} -> {row['ssim_restored']:.4f}")
    return files, EXIT_OK, {"wall_seconds": report.wall_seconds}


def strip_timing(name, data):
    """Deterministic view of an output file: timing fields removed."""
    if name.endswith(".json"):
        obj = json.loads(data.decode())
        if isinstance(obj, dict):
            obj.pop("timing", None)
        elif isinstance(obj, list):
            for r in obj:
                if isinstance(r, dict):
                    for c in TIMING_COLUMNS:
                        r.pop(c, None)
        return json.dumps(obj, sort_keys=True).encode()
    if name.endswith(".csv"):
        rows = list(csv.reader(io.StringIO(data.decode(), newline="")))
        if rows and any(c in rows[0] for c in TIMING_COLUMNS):
            keep = [j for j, c in enumerate(rows[0]) if c not in TIMING_COLUMNS]
            rows = [[r[j] for j in keep] for r in rows]
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\r\n").writerows(rows)
        return buf.getvalue().encode()
    return data


def cmd_replay(args, out):
    with open(args.manifest) as fh:
        manifest = json.load(fh)
    try:
        sub = manifest["subcommand"]
        config = manifest["config"]
        outputs = manifest["outputs"]
    except KeyError as exc:
        raise ConfigError(f"manifest is missing {exc.args[0]!r}") from None
    if sub not in HANDLERS or sub == "replay":
        raise ConfigError(f"cannot replay subcommand {sub!r}")
    src_dir = os.path.dirname(os.path.abspath(args.manifest))
    if os.path.abspath(out) == src_dir:
        raise ConfigError("replay output directory must differ from the original run")
    ns = argparse.Namespace(**config)
    ns.out = out
    files, code, _ = HANDLERS[sub](ns, out)
    mismatched = []
    for name in outputs:
        with open(os.path.join(src_dir, name), "rb") as fh:
            old = fh.read()
        with open(os.path.join(out, name), "rb") as fh:
            new = fh.read()
        if strip_timing(name, old) != strip_timing(name, new):
            mismatched.append(name)
    result = {"replayed": sub, "compared": outputs, "mismatched": mismatched, "original_exit": code}
    _write_json(os.path.join(out, "replay.json"), result)
    if mismatched:
        print(f"replay mismatch in: {', '.join(mismatched)}", file=sys.stderr)
        return files + ["replay.json"], EXIT_MISMATCH, {}
    print(f"replay of {sub}: {len(outputs)} outputs identical")
    return files + ["replay.json"], EXIT_OK, {}


HANDLERS = {
    "generate": cmd_generate,
    "solve": cmd_solve,
    "benchmark": cmd_benchmark,
    "restore": cmd_restore,
    "replay": cmd_replay,
}


# ---------------------------------------------------------------- parser

def _solver_flags(p, method_required=True):
    p.add_argument("--method", choices=METHOD_TAGS, required=method_required, default=None)
    p.add_argument("--theta", type=float, default=None, help="relaxation factor for rgrbk, in (0, 1)")
    p.add_argument("--alpha-rule", choices=("safe", "paper", "fixed"), default="safe")
    p.add_argument("--alpha", type=float, default=None, help="step size when --alpha-rule fixed")
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)


def _common(p):
    p.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    p.add_argument("--format", choices=("csv", "json"), default="csv", help="format of tabular outputs")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="matkaczmarz", description="Kaczmarz solvers for A X B = C")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("generate", help="materialize a problem spec as Matrix Market files")
    p.add_argument("spec", help="spec JSON file or registry:name (e.g. mini:fullcol-dense)")
    _common(p)

    p = sub.add_parser("solve", help="run one solver and write report.json and a trace")
    p.add_argument("spec", nargs="?", default=None, help="spec JSON file or registry:name")
    p.add_argument("--problem-dir", default=None, help="directory holding A.mtx, B.mtx, C.mtx")
    _solver_flags(p)
    p.add_argument("--stop", choices=("rrn", "residual"), default="rrn",
                   help="rrn: squared relative error against the reference solution")
    p.add_argument("--max-iter", type=int, default=1_000_000)
    _common(p)

    p = sub.add_parser("benchmark", help="seeded trials over a registry or spec list")
    p.add_argument("source", nargs="?", default="mini", help="registry name, spec file or registry:name")
    p.add_argument("--methods", default="rbk,grbk,rgrbk,mwrbk")
    p.add_argument("--theta", type=float, default=0.8)
    p.add_argument("--alpha-rule", choices=("safe", "paper", "fixed"), default="safe")
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--max-iter", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--workers", type=int, default=1)
    _common(p)

    p = sub.add_parser("restore", help="blur a color image and restore it")
    p.add_argument("image", nargs="?", default=None, help="8-bit RGB PNG (default: synthetic fixture)")
    p.add_argument("--size", type=int, default=32, help="side of the synthetic fixture")
    p.add_argument("--kernel-size", type=int, default=5)
    p.add_argument("--sigma", type=float, default=6.0)
    p.add_argument("--boundary", choices=imaging.BOUNDARIES, default="zero")
    _solver_flags(p)
    p.add_argument("--iters", type=int, default=20_000, help="iteration budget")
    p.add_argument("--save-blurred", action="store_true")
    _common(p)

    p = sub.add_parser("replay", help="re-run a manifest and compare outputs")
    p.add_argument("manifest")
    _common(p)
    return parser


def _config_echo(args):
    cfg = {k: v for k, v in vars(args).items() if k not in ("out", "verbose", "subcommand")}
    for key in PATH_KEYS:
        v = cfg.get(key)
        if v and os.path.exists(v):
            cfg[key] = os.path.abspath(v)
    return cfg


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        out = _out_dir(args)
        cfg = _config_echo(args)
        handler_args = argparse.Namespace(**cfg, out=out)
        start = time.perf_counter()
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            try:
                files, code, timing = HANDLERS[args.subcommand](handler_args, out)
            finally:
                for wmsg in caught:
                    print(f"warning: {wmsg.message}", file=sys.stderr)
        timing["total_seconds"] = time.perf_counter() - start
        manifest = {
            "tool": "matkaczmarz",
            "subcommand": args.subcommand,
            "argv": argv,
            "config": cfg,
            "seed": cfg.get("seed"),
            "rng_algorithm": ALGORITHM,
            "versions": _versions(),
            "outputs": files,
            "exit_code": code,
            "timing": timing,
        }
        if args.subcommand != "replay":
            _write_json(os.path.join(out, "manifest.json"), manifest)
        return code
    except DivergenceError as exc:
        print(f"error: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except MatrixMarketError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ShapeError, DomainError, InconsistentSystemError, CapacityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
