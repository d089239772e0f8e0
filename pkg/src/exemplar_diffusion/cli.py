"""Command-line driver: ``exemplar-diffusion <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
import time
from typing import Sequence

from . import io
from .evalkit import EvalConfig
from .experiment import ExperimentConfig, evaluate_runs, run_calibration, run_dataset
from .sampler import SamplerConfig
from .synthworld import OracleParams, make_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
SWEEP_PARAMS = {"n_star": "num_exemplars", "tau": "tau", "copies": "n_star", "sigma_px": "sigma_px"}

log = logging.getLogger("exemplar_diffusion")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _add_sampling_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("sampling")
    g.add_argument("--n-star", type=int, default=0, help="exemplars per scene (N*)")
    g.add_argument("--copies", type=int, default=200, help="noised copies per exemplar (n*)")
    g.add_argument("--n", type=int, default=300, help="random proposals")
    g.add_argument("--tau", type=int, default=10, help="forward steps applied to exemplars")
    g.add_argument("--steps", type=int, default=10)
    g.add_argument("--t-start", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0, help="sampler seed")
    g.add_argument("--exemplar-seed", type=int, default=0, help="seed for exemplar selection")
    g.add_argument("--sigma-px", type=float, default=0.0, help="exemplar noise in reference pixels")
    g.add_argument("--renew-threshold", type=float, default=0.5)
    g.add_argument("--rho", type=float, default=OracleParams.attraction_radius, help="oracle attraction radius")
    g.add_argument("--kappa", type=float, default=OracleParams.context_gain, help="oracle context gain")
    g.add_argument("--detector-noise", type=float, default=OracleParams.detector_noise)
    g.add_argument("--jobs", type=int, default=1, help="worker processes")


def _experiment_config(a: argparse.Namespace, **override) -> ExperimentConfig:
    vals = dict(
        n=a.n, n_star=a.copies, tau=a.tau, num_steps=a.steps, t_start=a.t_start,
        seed=a.seed, renew_threshold=a.renew_threshold,
        num_exemplars=a.n_star, sigma_px=a.sigma_px, exemplar_seed=a.exemplar_seed,
    )
    vals.update(override)
    try:
        sampler = SamplerConfig(
            n=vals["n"], n_star=vals["n_star"], tau=vals["tau"], num_steps=vals["num_steps"],
            t_start=vals["t_start"], seed=vals["seed"], renew_threshold=vals["renew_threshold"],
        )
        oracle = OracleParams(
            attraction_radius=a.rho, context_gain=a.kappa, detector_noise=a.detector_noise
        )
        return ExperimentConfig(
            sampler, oracle, num_exemplars=vals["num_exemplars"],
            sigma_px=vals["sigma_px"], exemplar_seed=vals["exemplar_seed"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _run_record(ds, cfg: ExperimentConfig, jobs: int, dataset_path: str | None) -> io.RunRecord:
    t0 = time.perf_counter()
    entropy = ds.entropy()
    runs = run_dataset(ds, cfg, jobs=jobs, entropy=entropy)
    metrics = evaluate_runs(ds, runs).to_dict()
    metrics["H"] = entropy
    return io.RunRecord(
        config=cfg.to_dict(),
        dataset=io.dataset_ref(ds, entropy, dataset_path),
        runs=tuple(runs),
        metrics=metrics,
        created_at=_now(),
        wall_clock_s=time.perf_counter() - t0,
    )


def _csv_row(ds_name: str, cfg: ExperimentConfig, metrics: dict) -> dict:
    return {
        "dataset": ds_name,
        "seed": cfg.sampler.seed,
        "N_star": cfg.num_exemplars,
        "n_star": cfg.sampler.n_star,
        "tau": cfg.sampler.tau,
        "sigma_px": cfg.sigma_px,
        "AP": metrics["AP"],
        "AP50": metrics["AP50"],
        "AR": metrics["AR"],
    }


# ---------------------------------------------------------------------------
# commands


def cmd_generate(a) -> int:
    try:
        ds = make_dataset(a.layout, a.scenes, a.objects, a.jitter, a.seed, name=a.name)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    io.save_dataset(ds, a.out)
    print(json.dumps({"out": a.out, "scenes": len(ds.scenes), "H": ds.entropy()}))
    return EXIT_OK


def cmd_sample(a) -> int:
    cfg = _experiment_config(a)
    ds = io.load_dataset(a.dataset)
    rec = _run_record(ds, cfg, a.jobs, a.dataset)
    io.save_record(rec, a.out)
    m = rec.metrics
    print(json.dumps({"out": a.out, "AP": m["AP"], "AP50": m["AP50"], "AR": m["AR"]}))
    return EXIT_OK


def cmd_eval(a) -> int:
    rec = io.load_record(a.run)
    path = a.dataset or rec.dataset.get("path")
    if not path:
        raise io.DataError("run record has no dataset path; pass --dataset")
    ds = io.load_dataset(path)
    if rec.dataset.get("digest") != io.dataset_digest(ds):
        raise io.DataError(f"{path}: dataset does not match the run record")
    cfg = ExperimentConfig.from_dict(rec.config)
    metrics = evaluate_runs(ds, rec.runs, EvalConfig(max_detections=a.max_detections)).to_dict()
    row = _csv_row(ds.name, cfg, metrics)
    io.write_csv([row], a.out, stream=sys.stdout)
    if a.out:
        print(json.dumps({"out": a.out, "AP": row["AP"], "AP50": row["AP50"], "AR": row["AR"], "H": ds.entropy()}))
    return EXIT_OK


def cmd_sweep(a) -> int:
    field_name = SWEEP_PARAMS[a.param]
    cast = float if a.param == "sigma_px" else int
    try:
        values = [cast(v) for v in a.values.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--values must be a comma list of numbers for {a.param}") from None
    if not values:
        raise UsageError("--values is empty")
    seeds = _int_list(a.seeds) if a.seeds else [a.seed]
    ds = io.load_dataset(a.dataset)
    entropy = ds.entropy()
    rows = []
    for seed in seeds:
        for v in values:
            cfg = _experiment_config(a, seed=seed, exemplar_seed=a.exemplar_seed + seed, **{field_name: v})
            runs = run_dataset(ds, cfg, jobs=a.jobs, entropy=entropy)
            rows.append(_csv_row(ds.name, cfg, evaluate_runs(ds, runs).to_dict()))
            log.info("seed=%s %s=%s done", seed, a.param, v)
    io.write_csv(rows, a.out, stream=sys.stdout)
    return EXIT_OK


def cmd_uncertainty(a) -> int:
    if a.ensemble < 2:
        raise UsageError("--ensemble must be at least 2")
    if not 0 < a.alpha < 1:
        raise UsageError("--alpha must lie in (0, 1)")
    cfg = _experiment_config(a, num_exemplars=max(1, a.n_star))
    ds = io.load_dataset(a.dataset)
    result, ellipses = run_calibration(ds, cfg, a.ensemble, a.alpha, jobs=a.jobs)
    doc = result.to_dict()
    doc["ensemble"] = a.ensemble
    doc["config"] = cfg.to_dict()
    doc["ellipses"] = ellipses
    if a.out:
        io.atomic_write(a.out, io.dumps(doc))
    print(json.dumps({
        "median_coverage": result.median_coverage,
        "calibration_error": result.calibration_error,
        "scenes": len(result.scenes),
        "skipped": result.skipped,
    }))
    return EXIT_OK


def cmd_serve(a) -> int:
    from .service import serve

    serve(a.data, host=a.host, port=a.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="exemplar-diffusion", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--layout", required=True, choices=["grid-arc", "grid-column", "uniform"])
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--objects", type=int, default=4)
    g.add_argument("--jitter", type=float, default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--name", default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("sample", help="run the sampler on every scene")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    _add_sampling_args(s)
    s.set_defaults(func=cmd_sample)

    w = sub.add_parser("sweep", help="sample and evaluate over a parameter grid")
    w.add_argument("--dataset", required=True)
    w.add_argument("--param", required=True, choices=sorted(SWEEP_PARAMS))
    w.add_argument("--values", required=True)
    w.add_argument("--seeds", default=None, help="comma list of sampler seeds")
    w.add_argument("--out", default=None, help="CSV path (stdout if omitted)")
    _add_sampling_args(w)
    w.set_defaults(func=cmd_sweep)

    e = sub.add_parser("eval", help="evaluate a run record")
    e.add_argument("--run", required=True)
    e.add_argument("--dataset", default=None)
    e.add_argument("--out", default=None)
    e.add_argument("--max-detections", type=int, default=100)
    e.set_defaults(func=cmd_eval)

    u = sub.add_parser("uncertainty", help="ensemble calibration and ellipse export")
    u.add_argument("--dataset", required=True)
    u.add_argument("--ensemble", type=int, default=100)
    u.add_argument("--alpha", type=float, default=0.95)
    u.add_argument("--out", default=None)
    _add_sampling_args(u)
    u.set_defaults(func=cmd_uncertainty)

    v = sub.add_parser("serve", help="start the HTTP service")
    v.add_argument("--port", type=int, default=8000)
    v.add_argument("--host", default="127.0.0.1")
    v.add_argument("--data", required=True, help="directory of dataset files")
    v.set_defaults(func=cmd_serve)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(message)s")
    if getattr(a, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return a.func(a)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except io.DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
