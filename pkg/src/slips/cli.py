"""Command-line experiment runner: ``slips sample | verify | compare``.

Every subcommand writes a results bundle into the output directory:

* ``manifest.json``: normalized config echo, seed, package versions and the
  list of files.  Feeding it back through ``--config`` reruns the experiment.
* ``samples.csv`` / ``trace.csv`` / ``metrics.json`` (sample),
  ``checks.json`` (verify, compare), ``compare.csv`` and ``c_disc.csv``
  (compare).
* ``run_info.json``: wall-clock timestamps and worker count.  It is the only
  file that legitimately differs between reruns.

The output directory is, in order of precedence, ``--out``, the
``SLIPS_OUTPUT_DIR`` environment variable, or ``[output] directory``.

Exit codes: 0 success, 1 configuration error, 2 a check failed, 3 some runs
of a batch failed, 4 every run failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import verify as V
from .config import ExperimentConfig, load
from .errors import ConfigError, SlipsError
from .metrics import mode_weights, moment_error, sliced_tv
from .sampler import run_batch
from .sl_core import resolve_sigma

log = logging.getLogger("slips")

EXIT_OK, EXIT_CONFIG, EXIT_CHECK, EXIT_PARTIAL, EXIT_FAILED = 0, 1, 2, 3, 4
OUTPUT_ENV = "SLIPS_OUTPUT_DIR"

# stream ids far above any run index, for randomness outside the runs
_METRICS_STREAM = 2**63
_CHECK_STREAM = 2**63 + 1

DEFAULT_CHECKS = ["martingale", "covariance-identity", "trace-cov-decay", "grid-optimality",
                  "information-bound", "tweedie", "compare-schedules", "dimension-scaling"]


def _stream(seed, key):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))


def _stream_seed(seed, key, index):
    ss = np.random.SeedSequence(seed, spawn_key=(key, index))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _fmt(v):
    return repr(float(v))


def _write_json(path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")


def _write_rows(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


class Bundle:
    """Collects the files of one results bundle and writes the manifest last."""

    def __init__(self, directory, command, cfg: ExperimentConfig):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.cfg = cfg
        self.files = []
        self.started = time.time()

    def path(self, name):
        self.files.append(name)
        return self.dir / name

    def finish(self, workers, status):
        config = self.cfg.as_dict()
        # neither the worker count nor the output location changes any result
        config["run"] = {k: v for k, v in config["run"].items() if k != "workers"}
        config["output"] = {k: v for k, v in config["output"].items() if k != "directory"}
        manifest = {
            "command": self.command,
            "config": config,
            "seed": config["run"]["seed"],
            "resolved": {"slips": self.cfg.slips_config().as_dict(),
                         "sigma": resolve_sigma(self.cfg.target(), self.cfg.slips_config())},
            "status": status,
            "files": sorted(self.files),
            "versions": {"slips": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version()},
        }
        _write_json(self.dir / "manifest.json", manifest)
        now = time.time()
        _write_json(self.dir / "run_info.json", {
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(self.started)),
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(now)),
            "wall_seconds": now - self.started, "workers": workers})


def _output_dir(cfg, out):
    return out or os.environ.get(OUTPUT_ENV) or cfg.section("output")["directory"]


def _sample_metrics(target, samples, cfg, seed):
    gen = _stream(seed, _METRICS_STREAM)
    m = cfg.section("metrics")
    records = []
    gmm = target.params.get("gmm")
    if gmm is not None and gmm.n_components >= 2:
        records.append(mode_weights(samples, gmm.means).as_dict())
    if target.mean is not None and target.variance_proxy is not None:
        records.append(moment_error(samples, target).as_dict())
    if target.sample is not None and m["n_reference"] > 0:
        ref = target.sample(m["n_reference"], gen)
        records.append(sliced_tv(samples, ref, m["n_projections"], rng=gen).as_dict())
    return records


def cmd_sample(cfg: ExperimentConfig, out=None, workers=None):
    """Run the configured batch and write samples, metrics and manifest."""
    target, scfg = cfg.target(), cfg.slips_config()
    run = cfg.section("run")
    workers = workers or run["workers"]
    trace = cfg.section("output")["trace"]
    bundle = Bundle(_output_dir(cfg, out), "sample", cfg)
    batch = run_batch(target, scfg, run["n_runs"], workers=workers,
                      block_size=run["block_size"], keep_trace=trace)
    d = target.dim
    _write_rows(bundle.path("samples.csv"), ["run_id"] + [f"x{i}" for i in range(d)],
                ([str(int(r))] + [_fmt(v) for v in x] for r, x in zip(batch.run_ids, batch.samples)))
    if trace:
        header = (["run_id", "k", "t"] + [f"y{i}" for i in range(d)] + [f"u{i}" for i in range(d)]
                  + ["acceptance"])
        rows = []
        for res in batch.results():
            for rec in res.trace_rows():
                rows.append([str(rec["run_id"]), str(rec["k"]), _fmt(rec["t"])]
                            + [_fmt(v) for v in rec["state"]] + [_fmt(v) for v in rec["u_hat"]]
                            + [_fmt(rec["acceptance"])])
        _write_rows(bundle.path("trace.csv"), header, rows)
    records = _sample_metrics(target, batch.samples, cfg, run["seed"]) if batch.run_ids.size else []
    _write_json(bundle.path("metrics.json"), {
        "metrics": records,
        "sigma": batch.sigma,
        "n_ok": int(batch.run_ids.size),
        "failures": {str(k): v for k, v in sorted(batch.failures.items())},
        "mean_acceptance": (None if np.all(np.isnan(batch.acceptance))
                            else float(np.nanmean(batch.acceptance))),
    })
    if not batch.run_ids.size:
        status = EXIT_FAILED
    elif batch.failures:
        status = EXIT_PARTIAL
    else:
        status = EXIT_OK
    bundle.finish(workers, status)
    return status, bundle


def _run_check(name, cfg, target, sigma, seed, workers):
    v = cfg.section("verify")
    scfg = cfg.slips_config()
    if name == "martingale":
        return V.check_martingale(target, sigma, v["times"], v["n_paths"], seed)
    if name == "covariance-identity":
        return V.check_covariance_identity(target, sigma, v["cov_s"], v["cov_t"], v["n_paths"], seed)
    if name == "trace-cov-decay":
        return V.check_trace_cov_decay(target, sigma, v["times"], v["n_paths"], seed)
    if name == "grid-optimality":
        return V.check_grid_optimality(v["grid_t0"], v["grid_tK"], v["grid_K"], v["n_restarts"], seed)
    if name in ("information-bound", "tweedie"):
        # one-dimensional checks use the first-coordinate marginal of the target
        gmm = V._gmm_of(target)
        marginal = type(gmm)(gmm.weights, gmm.means[:, :1], gmm.component_variance)
        if name == "information-bound":
            return V.check_information_bound(marginal, sigma, v["info_t"])
        return V.check_tweedie_identity(marginal, sigma, v["tweedie_t"])
    if name == "compare-schedules":
        return V.compare_schedules(target, scfg, v["n_runs"], seed, v["n_reference"], workers=workers)
    if name == "dimension-scaling":
        return V.check_dimension_scaling(v["eps"], [int(d) for d in v["dims"]], seed, t0=scfg.t0,
                                         n_runs=v["n_runs"], n_reference=v["n_reference"], workers=workers)
    raise ConfigError(f"unknown check {name!r}; available: {', '.join(DEFAULT_CHECKS)}")


def cmd_verify(cfg: ExperimentConfig, checks=None, out=None, workers=None):
    """Run the named checks (all of them if none are named)."""
    names = list(checks or cfg.section("verify")["checks"] or DEFAULT_CHECKS)
    unknown = [n for n in names if n not in DEFAULT_CHECKS]
    if unknown:
        raise ConfigError(f"unknown check(s) {', '.join(unknown)}; available: {', '.join(DEFAULT_CHECKS)}")
    target, scfg = cfg.target(), cfg.slips_config()
    sigma = resolve_sigma(target, scfg)
    seed = cfg.section("run")["seed"]
    workers = workers or cfg.section("run")["workers"]
    bundle = Bundle(_output_dir(cfg, out), "verify", cfg)
    reports = []
    for name in names:
        rep = _run_check(name, cfg, target, sigma, _stream_seed(seed, _CHECK_STREAM, DEFAULT_CHECKS.index(name)),
                         workers)
        log.info("%s: %s", name, "pass" if rep.passed else "FAIL")
        reports.append(rep)
    _write_json(bundle.path("checks.json"), [r.as_dict() for r in reports])
    status = EXIT_OK if all(r.passed for r in reports) else EXIT_CHECK
    bundle.finish(workers, status)
    return status, bundle


def cmd_compare(cfg: ExperimentConfig, out=None, workers=None):
    """Schedule comparison table plus c_disc sweeps, ready for plotting."""
    target, scfg = cfg.target(), cfg.slips_config()
    c = cfg.section("compare")
    seed = cfg.section("run")["seed"]
    workers = workers or cfg.section("run")["workers"]
    bundle = Bundle(_output_dir(cfg, out), "compare", cfg)
    K_values = [int(k) for k in c["K_values"]] or [scfg.K]
    reports, rows = [], []
    for i, K in enumerate(K_values):
        rep = V.compare_schedules(target, scfg.with_(K=K), c["n_runs"], _stream_seed(seed, _CHECK_STREAM, 100 + i),
                                  c["n_reference"], workers=workers)
        reports.append(rep)
        for kind, row in rep.details["schedules"].items():
            rows.append([kind.replace("_", "-"), str(K), _fmt(row["sliced_tv"]), _fmt(row["std_error"]),
                         _fmt(row["c_disc"])])
    _write_rows(bundle.path("compare.csv"), ["schedule", "K", "sliced_tv", "std_error", "c_disc"], rows)
    sweep = V.c_disc_sweep(scfg.t0, c["ratios"], scfg.K)
    _write_rows(bundle.path("c_disc.csv"), ["T_over_t0", "log_snr", "uniform"],
                ([_fmt(r["T_over_t0"]), _fmt(r["log_snr"]), _fmt(r["uniform"])] for r in sweep))
    _write_json(bundle.path("checks.json"), [r.as_dict() for r in reports])
    status = EXIT_OK if all(r.passed for r in reports) else EXIT_CHECK
    bundle.finish(workers, status)
    return status, bundle


def build_parser():
    p = argparse.ArgumentParser(prog="slips", description="Stochastic-localization sampler experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("sample", "run a seeded batch and write samples"),
                        ("verify", "run numerical checks"),
                        ("compare", "compare log-SNR and uniform grids")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="config file or manifest.json")
        s.add_argument("--seed", type=int)
        s.add_argument("--workers", type=int)
        s.add_argument("--out", help="output directory")
        s.add_argument("--grid", choices=["log-snr", "uniform"])
        s.add_argument("--denoiser", choices=["mala", "oracle"])
        s.add_argument("--trace", action="store_true", help="also write the per-step trace")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "verify":
            s.add_argument("checks", nargs="*", help=f"subset of: {', '.join(DEFAULT_CHECKS)}")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load(args.config).with_overrides(
            run__seed=args.seed, slips__grid=args.grid, slips__denoiser=args.denoiser,
            output__trace=True if args.trace else None)
        if args.workers is not None and args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        if args.command == "sample":
            status, bundle = cmd_sample(cfg, args.out, args.workers)
        elif args.command == "verify":
            status, bundle = cmd_verify(cfg, args.checks, args.out, args.workers)
        else:
            status, bundle = cmd_compare(cfg, args.out, args.workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SlipsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{args.command}: wrote {bundle.dir} (exit {status})")
    return status


if __name__ == "__main__":
    sys.exit(main())
