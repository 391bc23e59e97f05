"""``gscem`` command line: generate, fit, eval, bench.

Every option can also come from a JSON file given with ``--config``; keys are
the long option names with dashes or underscores. Options given on the
command line override the file. Unknown keys are an error.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure.
"""
import argparse
import hashlib
import json
import logging
import os
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__, io
from .datagen import (ParseError, bundled_sources_path, load_sources_csv,
                      mix_sources, random_orthogonal, sample_sc)
from .em import FitOptions, default_jobs, multi_restart, restart_seed
from .metrics import (amari_index, format_table, select_likelihood_cluster,
                      select_orthogonal_cluster, summarize_runs)
from .model import (MAX_HIDDEN, InputError, NumericalError, StateCapError,
                    check_hidden_cap, random_gsc_params, sample_gsc)
from .rng import derive_seed

log = logging.getLogger("gscem")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


class Manifest:
    def __init__(self, command, argv, config, seed):
        self.data = {"command": command, "argv": list(argv), "config": config,
                     "seed": seed, "inputs": {}, "outputs": [], "timings": {},
                     "version": __version__, "threads": config.get("threads")}
        self._t0 = time.perf_counter()

    def add_input(self, path):
        self.data["inputs"][str(path)] = _digest(path)

    def add_output(self, *paths):
        self.data["outputs"].extend(str(p) for p in paths)

    def time(self, stage, seconds):
        self.data["timings"][stage] = seconds

    def write(self, out_dir):
        self.data["timings"]["total"] = time.perf_counter() - self._t0
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(self.data, indent=2))
        return path


def _positive_int(v):
    v = int(v)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser():
    p = _Parser(prog="gscem", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON file with option values")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="master seed (default 0)")

    def fitting(sp):
        sp.add_argument("--restarts", type=_positive_int, help="default 10")
        sp.add_argument("--max-iters", type=_positive_int, help="default 300")
        sp.add_argument("--rel-tol", type=float,
                        help="relative log-likelihood tolerance (default 1e-8; 0 = fixed count)")
        sp.add_argument("--isotropic", action=argparse.BooleanOptionalAction,
                        help="isotropic noise covariance in the M-step")
        sp.add_argument("--threads", type=_positive_int,
                        help="parallel restarts (default $GSC_THREADS or 1)")

    g = sub.add_parser("generate", help="write a synthetic dataset")
    common(g)
    g.add_argument("--model", choices=["gsc", "cauchy-sc", "laplace-sc"])
    g.add_argument("--D", type=int)
    g.add_argument("--H", type=int)
    g.add_argument("--N", type=int)
    g.add_argument("--noise-sigma", type=float,
                   help="SC models only; default gives amplitude SNR 10")
    g.add_argument("--params", help="generating parameters JSON (gsc)")
    g.add_argument("--header", action=argparse.BooleanOptionalAction)

    f = sub.add_parser("fit", help="multi-restart EM on a dataset")
    common(f)
    fitting(f)
    f.add_argument("--data", help="dataset CSV")
    f.add_argument("--H", type=int, help="hidden units (default D)")
    f.add_argument("--header", action=argparse.BooleanOptionalAction)

    e = sub.add_parser("eval", help="score fit results against a ground truth")
    common(e)
    e.add_argument("--fits", help="directory written by 'gscem fit'")
    e.add_argument("--truth", help="truth.json or params JSON with the generating W")
    e.add_argument("--bin-width", type=float, help="orthogonality bin width, degrees (default 2)")
    e.add_argument("--ll-bin-width", type=float,
                   help="likelihood bin width, nats per point (default 0.1)")
    e.add_argument("--threshold-deg", type=float, help="override cluster threshold")
    e.add_argument("--name", help="dataset label for the table")

    b = sub.add_parser("bench", help="load, mix, fit and evaluate source data")
    common(b)
    fitting(b)
    b.add_argument("--sources", help="sources CSV (default: bundled synthetic set)")
    b.add_argument("--N", type=int, nargs="+", help="window sizes (default 200 500)")
    b.add_argument("--offset", type=int, help="window start (default 0)")
    b.add_argument("--standardize", action=argparse.BooleanOptionalAction)
    b.add_argument("--identity-mix", action=argparse.BooleanOptionalAction,
                   help="debug: skip the random rotation")
    b.add_argument("--bin-width", type=float)
    b.add_argument("--name", help="dataset label for the table")
    return p


DEFAULTS = {
    "generate": dict(model="gsc", D=2, H=None, N=500, seed=0, noise_sigma=None,
                     params=None, header=False, out="gscem-data"),
    "fit": dict(data=None, H=None, restarts=10, max_iters=300, rel_tol=1e-8,
                isotropic=False, threads=None, seed=0, header=False, out="gscem-fit"),
    "eval": dict(fits=None, truth=None, bin_width=2.0, ll_bin_width=0.1,
                 threshold_deg=None, name=None, seed=0, out=None),
    "bench": dict(sources=None, N=[200, 500], offset=0, standardize=True,
                  identity_mix=False, restarts=20, max_iters=300, rel_tol=0.0,
                  isotropic=True, threads=None, seed=0, bin_width=2.0,
                  name=None, out="gscem-bench"),
}


def resolve_config(args):
    """Merge defaults, ``--config`` file and explicit command-line values."""
    defaults = DEFAULTS[args.command]
    cfg = dict(defaults)
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
        for key, value in raw.items():
            k = key.replace("-", "_")
            if k not in defaults:
                raise UsageError(f"unknown config key {key!r} for '{args.command}'")
            cfg[k] = value
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    if "threads" in cfg and cfg["threads"] is None:
        cfg["threads"] = default_jobs()
    return cfg


def _require(cfg, *keys):
    for k in keys:
        if cfg.get(k) is None:
            raise UsageError(f"--{k.replace('_', '-')} is required")


def _out_dir(cfg):
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(cfg, manifest):
    model = cfg["model"]
    if model not in ("gsc", "cauchy-sc", "laplace-sc"):
        raise UsageError(f"unknown model {model!r}")
    N, D = cfg["N"], cfg["D"]
    H = cfg["H"] if cfg["H"] is not None else D
    if N is None or N < 1:
        raise UsageError("N must be >= 1")
    if D is None or D < 1 or H < 1:
        raise UsageError("D and H must be >= 1")
    seed = cfg["seed"]
    out = _out_dir(cfg)
    t0 = time.perf_counter()
    if model == "gsc":
        if cfg["params"]:
            manifest.add_input(cfg["params"])
            params = io.read_params(cfg["params"])
        else:
            params = random_gsc_params(D, H, derive_seed(seed, "generate", "params"))
        ds = sample_gsc(params, N, derive_seed(seed, "generate", "data"))
        truth = {"mixing": params.W.tolist(), "params": params.to_dict()}
        io.write_params(out / "params.json", params)
        manifest.add_output(out / "params.json")
    else:
        prior = model.split("-")[0]
        W = 3.0 * np.random.default_rng(derive_seed(seed, "generate", "W")).standard_normal((D, H))
        ds = sample_sc(prior, W, cfg["noise_sigma"], N, derive_seed(seed, "generate", "data"))
        truth = {"mixing": W.tolist(), "noise_sigma": ds.meta["noise_sigma"], "prior": prior}
    manifest.time("generate", time.perf_counter() - t0)
    written = io.write_dataset(out / "data.csv", ds, header=cfg["header"])
    (out / "truth.json").write_text(json.dumps(truth, indent=2))
    manifest.data["ground_truth"] = truth
    manifest.add_output(*written, out / "truth.json")
    return out


def _fit_and_write(Y, cfg, out, manifest, stage="fit"):
    H = cfg.get("H") or Y.shape[1]
    check_hidden_cap(H)
    options = FitOptions(max_iters=cfg["max_iters"], rel_tol=cfg["rel_tol"],
                         isotropic_sigma=bool(cfg["isotropic"]), seed=cfg["seed"],
                         n_hidden=H)
    t0 = time.perf_counter()
    results = multi_restart(Y, options, cfg["restarts"], n_jobs=cfg["threads"])
    manifest.time(stage, time.perf_counter() - t0)
    out.mkdir(parents=True, exist_ok=True)
    runs = []
    for r in results:
        stem = f"run_{r.restart:03d}"
        io.write_fit_result(out / f"{stem}.json", r)
        io.write_trace_csv(out / f"{stem}.trace.csv", r.log_lik_trace)
        manifest.add_output(out / f"{stem}.json", out / f"{stem}.trace.csv")
        runs.append({"restart": r.restart, "seed": r.seed, "file": f"{stem}.json",
                     "final_log_lik": r.final_log_lik if r.ok else None,
                     "iterations": r.iterations_run, "converged": r.converged,
                     "ortho_deviation_deg": r.to_dict()["ortho_deviation_deg"],
                     "error": r.error})
    summary = {"n_points": int(Y.shape[0]), "D": int(Y.shape[1]), "H": int(H),
               "options": {"max_iters": options.max_iters, "rel_tol": options.rel_tol,
                           "isotropic_sigma": options.isotropic_sigma,
                           "seed": options.seed, "restarts": cfg["restarts"]},
               "succeeded": sum(r.ok for r in results), "runs": runs}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    manifest.add_output(out / "summary.json")
    return results


def cmd_fit(cfg, manifest):
    _require(cfg, "data")
    if cfg["H"] is not None and cfg["H"] > MAX_HIDDEN:
        raise StateCapError(f"H={cfg['H']} exceeds the exact-inference cap H<={MAX_HIDDEN} "
                            "(cost grows as 2**H)")
    path = Path(cfg["data"])
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    manifest.add_input(path)
    ds = io.read_dataset(path, header=cfg["header"])
    out = _out_dir(cfg)
    results = _fit_and_write(ds.Y, cfg, out, manifest)
    best = results[0]
    log.info("best run %d: log-lik %.6f after %d iterations",
             best.restart, best.final_log_lik, best.iterations_run)
    return out


def _load_truth(path):
    d = json.loads(Path(path).read_text())
    if "mixing" in d:
        return np.array(d["mixing"], dtype=float)
    if "W" in d:
        return np.array(d["W"], dtype=float)
    raise InputError(f"{path}: no 'mixing' or 'W' entry")


def evaluate(results, W_gen, n_points, bin_width=2.0, ll_bin_width=0.1,
             threshold_deg=None):
    """Metrics for a set of fit results. ``W_gen`` may be None."""
    ok = [r for r in results if r.ok]
    report = {"n_runs": len(results), "n_ok": len(ok),
              "final_log_lik": [r.final_log_lik for r in ok],
              "ortho_deviation_deg": [r.ortho_deviation_deg for r in ok],
              "restart": [r.restart for r in ok]}
    sel = select_orthogonal_cluster(ok, bin_width, threshold_deg)
    report["selection"] = {"threshold_deg": sel.threshold_deg,
                           "selected": [ok[i].restart for i in sel.selected],
                           "gap_found": sel.gap_found}
    high = select_likelihood_cluster(ok, n_points, ll_bin_width)
    report["high_likelihood"] = [ok[i].restart for i in high]
    edges, counts = np.histogram([r.final_log_lik / n_points for r in ok],
                                 bins=min(20, max(1, len(ok))))
    hists = {"ortho": sel.histogram, "loglik": (edges, counts)}
    summary = None
    if W_gen is None:
        report["amari"] = None
        report["notice"] = "no ground truth: Amari index skipped"
    else:
        summary = summarize_runs(ok, sel, W_gen)
        report["amari"] = summary.to_dict()
        amari_high = summary.amari[high]
        report["amari"]["high_likelihood"] = {"mean": float(amari_high.mean()),
                                              "std": float(amari_high.std()),
                                              "n": len(high)}
    return report, summary, hists


def _write_eval(out, name, rows_for_table, reports, hists_by_label, manifest):
    (out / "eval.json").write_text(json.dumps(reports, indent=2, default=float))
    manifest.add_output(out / "eval.json")
    if rows_for_table:
        table = format_table(rows_for_table)
        (out / "table.txt").write_text(table)
        manifest.add_output(out / "table.txt")
        sys.stdout.write(table)
    for label, hists in hists_by_label.items():
        for kind, (edges, counts) in hists.items():
            p = out / f"{label}{kind}_hist.csv"
            io.write_histogram_csv(p, edges, counts)
            manifest.add_output(p)


def cmd_eval(cfg, manifest):
    _require(cfg, "fits")
    fits = Path(cfg["fits"])
    summary_path = fits / "summary.json"
    if not summary_path.exists():
        raise FileNotFoundError(f"no summary.json in {fits}")
    fit_summary = json.loads(summary_path.read_text())
    results = [io.read_fit_result(fits / run["file"]) for run in fit_summary["runs"]]
    W_gen = None
    if cfg["truth"]:
        manifest.add_input(cfg["truth"])
        W_gen = _load_truth(cfg["truth"])
    else:
        print("gscem eval: notice: no ground truth given, Amari index skipped",
              file=sys.stderr)
    n = fit_summary["n_points"]
    report, summ, hists = evaluate(results, W_gen, n, cfg["bin_width"],
                                   cfg["ll_bin_width"], cfg["threshold_deg"])
    out = Path(cfg["out"]) if cfg["out"] else fits
    out.mkdir(parents=True, exist_ok=True)
    name = cfg["name"] or fits.name
    rows = [(name, n, summ)] if summ is not None else []
    _write_eval(out, name, rows, report, {"": hists}, manifest)
    return out


def cmd_bench(cfg, manifest):
    src_path = Path(cfg["sources"]) if cfg["sources"] else None
    if src_path is not None:
        if not src_path.exists():
            raise FileNotFoundError(f"sources file not found: {src_path}")
        manifest.add_input(src_path)
        sources = load_sources_csv(src_path, standardize=cfg["standardize"])
        name = cfg["name"] or src_path.stem
    else:
        with resources.as_file(bundled_sources_path()) as p:
            manifest.add_input(p)
            sources = load_sources_csv(p, standardize=cfg["standardize"])
        name = cfg["name"] or "speechlike4"
    out = _out_dir(cfg)
    seed = cfg["seed"]
    mix_seed = derive_seed(seed, "bench", "mix")
    mix = random_orthogonal(sources.H, mix_seed)
    A = np.eye(sources.H) if cfg["identity_mix"] else mix.A
    manifest.data["stage_seeds"] = {"mix": mix_seed}
    manifest.data["ground_truth"] = {"mixing": A.tolist()}
    rows, reports, hists_by_label = [], {"name": name, "mixing": A.tolist(),
                                         "sources": sources.summary(), "runs": {}}, {}
    for N in cfg["N"]:
        ds = mix_sources(sources, A, int(N), cfg["offset"])
        fit_seed = derive_seed(seed, "bench", "fit", int(N))
        manifest.data["stage_seeds"][f"fit_N{N}"] = fit_seed
        run_cfg = dict(cfg, seed=fit_seed, H=sources.H)
        results = _fit_and_write(ds.Y, run_cfg, out / f"N{N}", manifest, stage=f"fit_N{N}")
        t0 = time.perf_counter()
        report, summ, hists = evaluate(results, A, int(N), cfg["bin_width"])
        manifest.time(f"eval_N{N}", time.perf_counter() - t0)
        reports["runs"][str(N)] = report
        rows.append((name, N, summ))
        hists_by_label[f"N{N}_"] = hists
    _write_eval(out, name, rows, reports, hists_by_label, manifest)
    return out


COMMANDS = {"generate": cmd_generate, "fit": cmd_fit, "eval": cmd_eval,
            "bench": cmd_bench}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        manifest = Manifest(args.command, argv, cfg, cfg.get("seed"))
        out = COMMANDS[args.command](cfg, manifest)
        manifest.write(out)
    except (UsageError, StateCapError) as exc:
        print(f"gscem {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, ParseError, InputError) as exc:
        print(f"gscem {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"gscem {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
