"""Command-line front end.

One JSON config document drives each job; command-line flags override config
fields. Reports are JSON (schema-versioned, config echoed, floats at full
round-trip precision) and failure samples are CSV, so repeated runs with the
same seed produce byte-identical artifacts.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys as _sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import blackbox as bb
from . import hdr
from .ess import LinearStlSampler
from .lingauss import LtvSystem, unroll
from .rng import substream
from .stl import StlSyntaxError, parse
from .synthesis import SynthesisProblem, fresh_failure_samples, synthesize
from .warp import (
    Affine,
    Bijector,
    ComponentwiseInverseCdf,
    CoordinateSlice,
    ExponentialTarget,
    MonotoneSpline,
    TruncatedNormalTarget,
    UniformTarget,
    compose,
    identity,
)

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_BUDGET = 2
EXIT_PROTOCOL = 3


class ConfigError(ValueError):
    pass


_SAMPLER_DEFAULTS = {
    "kind": "lipschitz",
    "n_ess": 250,
    "n_skip": 5,
    "n_bo": 8,
    "kappa": 2.576,
    "xi": 0.0,
    "acquisition": "UCB",
    "m_init": None,
    "eps_inflate": 0.5,
    "budget": 1_000_000,
}

_SYNTH_DEFAULTS = {
    "parameter": "mu0",
    "v_dir": -1,
    "alpha": 0.1,
    "n_samples": 500,
    "max_iters": 100,
    "target_p": None,
}


def _resolve_config(raw: dict) -> dict:
    config = {
        "mode": raw.get("mode"),
        "spec": raw.get("spec"),
        "spec_file": raw.get("spec_file"),
        "system_file": raw.get("system_file"),
        "simulator_cmd": raw.get("simulator_cmd"),
        "seed": int(raw.get("seed", 0)),
        "threads": int(raw.get("threads", 1)),
        "report": raw.get("report"),
        "failures_csv": raw.get("failures_csv"),
        "count": int(raw.get("count", 100)),
        "sampler": {**_SAMPLER_DEFAULTS, **raw.get("sampler", {})},
        "synthesis": {**_SYNTH_DEFAULTS, **raw.get("synthesis", {})},
        "bijector": raw.get("bijector"),
        "mc": {"n_sim": int(raw.get("mc", {}).get("n_sim", 100_000))},
    }
    if not (0 <= config["seed"] < 2**64):
        raise ConfigError("seed must be a 64-bit unsigned integer")
    return config


def _load_spec_text(config: dict) -> str:
    if config.get("spec"):
        return config["spec"]
    if config.get("spec_file"):
        path = Path(config["spec_file"])
        if not path.exists():
            raise ConfigError(f"spec file not found: {path}")
        return path.read_text()
    raise ConfigError("config needs 'spec' text or a 'spec_file'")


def load_system(path_or_dict) -> LtvSystem:
    """Build an LtvSystem from the system description document."""
    if isinstance(path_or_dict, (str, Path)):
        path = Path(path_or_dict)
        if not path.exists():
            raise ConfigError(f"system file not found: {path}")
        doc = json.loads(path.read_text())
    else:
        doc = dict(path_or_dict)
    try:
        n = int(doc["n"])
        N = int(doc["N"])
    except KeyError as exc:
        raise ConfigError(f"system document missing field {exc}") from exc
    m = int(doc.get("m", 0))
    q = int(doc.get("q", 0))
    feedback = doc.get("feedback", {"mode": "open_loop"})
    mode = feedback.get("mode", "open_loop")

    def arr(key, default=None):
        return np.asarray(doc[key], dtype=float) if key in doc else default

    try:
        return LtvSystem(
            n=n, m=m, q=q, N=N,
            mu0=arr("mu0", np.zeros(n)),
            Sigma0=arr("Sigma0", np.zeros((n, n))),
            A=arr("A"), B=arr("B"), C=arr("C"),
            w_mean=arr("w_mean"), w_cov=arr("w_cov"),
            v_mean=arr("v_mean"), v_cov=arr("v_cov"),
            r=arr("r"),
            feedback=mode,
            K=np.asarray(feedback["K"], dtype=float) if "K" in feedback else None,
            L=np.asarray(feedback["L"], dtype=float) if "L" in feedback else None,
            K_shared=bool(feedback.get("K_shared", True)),
            xhat0=arr("xhat0"),
            state_names=tuple(doc.get("state_names", ())),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid system document: {exc}") from exc


def build_bijector(block) -> Bijector | None:
    """Bijector description block: ordered list of {kind, parameters} entries,
    each optionally restricted to a coordinate range via "coords": [start, stop)."""
    if block is None:
        return None
    parts = []
    for entry in block:
        kind = entry.get("kind")
        if kind == "affine":
            parts.append(Affine(entry["scale"], entry["offset"]))
        elif kind == "identity":
            parts.append(identity())
        elif kind == "inverse_cdf":
            targets = []
            for target in entry["targets"]:
                family = target.get("family")
                if family == "uniform":
                    targets.append(UniformTarget(float(target["a"]), float(target["b"])))
                elif family == "exponential":
                    targets.append(ExponentialTarget(float(target["rate"])))
                elif family == "truncated_normal":
                    targets.append(TruncatedNormalTarget(float(target["lo"]), float(target["hi"])))
                else:
                    raise ConfigError(f"unknown inverse_cdf family {family!r}")
            parts.append(ComponentwiseInverseCdf(targets))
        elif kind == "spline":
            parts.append(MonotoneSpline([(k["x"], k["w"]) for k in entry["knots"]]))
        else:
            raise ConfigError(f"unknown bijector kind {kind!r}")
        if "coords" in entry:
            start, stop = entry["coords"]
            parts[-1] = CoordinateSlice(parts[-1], int(start), int(stop))
    return compose(parts)


def _verify_config(config: dict) -> hdr.VerifyConfig:
    sampler = config["sampler"]
    return hdr.VerifyConfig(
        n_ess=int(sampler["n_ess"]),
        n_skip=int(sampler["n_skip"]),
        seed=config["seed"],
        threads=config["threads"],
    )


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)!r}")


def _write_report(config: dict, payload: dict):
    report = {"schema": SCHEMA_VERSION, "config": config, **payload}
    text = json.dumps(report, sort_keys=True, indent=2, default=_json_default)
    if config.get("report"):
        path = Path(config["report"])
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text + "\n")
    else:
        print(text)


def _write_failures_csv(path, samples: np.ndarray, rhos: np.ndarray):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"w{i}" for i in range(samples.shape[1])] + ["robustness"])
        for row, rho in zip(samples, rhos):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(rho))])


def _result_payload(result: hdr.VerificationResult) -> dict:
    return {
        "result": {
            "p_estimate": result.p_estimate,
            "variance": result.variance,
            "thresholds": result.ladder.thresholds[1:],
            "conditionals": result.ladder.conditionals[1:],
            "n_nestings": result.ladder.n_nestings,
            "simulations_used": result.simulations_used,
        }
    }


def _linear_sampler(config: dict) -> LinearStlSampler:
    if not config.get("system_file"):
        raise ConfigError("verify-linear needs a 'system_file'")
    system = load_system(config["system_file"])
    spec_text = _load_spec_text(config)
    try:
        phi = parse(spec_text, system.state_names)
    except StlSyntaxError:
        raise
    gaussian = unroll(system)
    return LinearStlSampler(gaussian, phi)


def cmd_verify_linear(config: dict) -> int:
    sampler = _linear_sampler(config)
    result = hdr.verify(sampler, _verify_config(config))
    _write_report(config, _result_payload(result))
    if config.get("failures_csv"):
        _write_failures_csv(config["failures_csv"], result.failure_samples, result.failure_rhos)
    return EXIT_OK


def _blackbox_run(config: dict) -> bb.SubprocessRunFunction:
    if not config.get("simulator_cmd"):
        raise ConfigError("verify-blackbox needs a 'simulator_cmd'")
    return bb.SubprocessRunFunction(config["simulator_cmd"], budget=int(config["sampler"]["budget"]))


def cmd_verify_blackbox(config: dict) -> int:
    run = _blackbox_run(config)
    try:
        spec_text = _load_spec_text(config)
        phi = parse(spec_text, run.channels)
        sampler_cfg = config["sampler"]
        bo = bb.BoConfig(
            n_bo=int(sampler_cfg["n_bo"]),
            kappa=float(sampler_cfg["kappa"]),
            xi=float(sampler_cfg["xi"]),
            acquisition=sampler_cfg["acquisition"],
        )
        lip = bb.LipschitzState(
            M=sampler_cfg["m_init"],
            eps_inflate=float(sampler_cfg["eps_inflate"]),
        )
        sampler = bb.BlackboxSampler(
            run, phi,
            bijector=build_bijector(config.get("bijector")),
            method=sampler_cfg["kind"],
            bo_config=bo,
            lipschitz_state=lip,
        )
        result = hdr.verify(sampler, _verify_config(config))
        payload = _result_payload(result)
        payload["simulator"] = {
            "cmd": config["simulator_cmd"],
            "l": run.l,
            "channels": list(run.channels),
            "horizon": run.horizon,
        }
        _write_report(config, payload)
        if config.get("failures_csv"):
            base = result.failure_samples
            _write_failures_csv(config["failures_csv"], base, result.failure_rhos)
    finally:
        run.close()
    return EXIT_OK


def cmd_mc(config: dict) -> int:
    n_sim = config["mc"]["n_sim"]
    rng = substream(config["seed"], "mc")
    if config.get("system_file"):
        sampler = _linear_sampler(config)
        mc = hdr.mc_estimate(sampler.mc_rhos, n_sim, rng)
    else:
        run = _blackbox_run(config)
        try:
            phi = parse(_load_spec_text(config), run.channels)
            sampler = bb.BlackboxSampler(run, phi, bijector=build_bijector(config.get("bijector")))
            mc = hdr.mc_estimate(sampler.mc_rhos, n_sim, rng)
        finally:
            run.close()
    _write_report(
        config,
        {
            "result": {
                "p_hat": mc.p_hat,
                "ci_low": mc.ci_low,
                "ci_high": mc.ci_high,
                "failures": mc.failures,
                "n_sim": mc.n_sim,
            }
        },
    )
    return EXIT_OK


def cmd_bound(args, config: dict) -> int:
    value = hdr.error_bound(args.lam, args.delta, args.ness, args.k)
    print(repr(value))
    if config.get("report"):
        _write_report(
            config,
            {
                "result": {
                    "bound": value,
                    "lambda": args.lam,
                    "delta": args.delta,
                    "n_ess": args.ness,
                    "k": args.k,
                }
            },
        )
    return EXIT_OK


def cmd_synthesize(config: dict) -> int:
    if not config.get("system_file"):
        raise ConfigError("synthesize needs a 'system_file'")
    system = load_system(config["system_file"])
    phi = parse(_load_spec_text(config), system.state_names)
    synth = config["synthesis"]
    problem = SynthesisProblem(
        system=system,
        phi=phi,
        parameter=synth["parameter"],
        v_dir=int(synth["v_dir"]),
        alpha=float(synth["alpha"]),
        n_samples=int(synth["n_samples"]),
        max_iters=int(synth["max_iters"]),
        target_p=synth["target_p"],
        verify_config=_verify_config(config),
    )
    trace = synthesize(problem, seed=config["seed"])
    lines = [json.dumps(r.to_dict(), sort_keys=True) for r in trace.records]
    if config.get("report"):
        path = Path(config["report"])
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")
    else:
        for line in lines:
            print(line)
    print(f"status: {trace.status}", file=_sys.stderr)
    return EXIT_OK


def cmd_sample_failures(config: dict) -> int:
    sampler = _linear_sampler(config)
    result = hdr.verify(sampler, _verify_config(config))
    rng = substream(config["seed"], "sample-failures")
    samples, rhos = fresh_failure_samples(
        sampler, result, config["count"], config["sampler"]["n_skip"], rng
    )
    out = config.get("failures_csv") or "failures.csv"
    _write_failures_csv(out, samples, rhos)
    return EXIT_OK


def _load_config(args) -> dict:
    raw = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        raw = json.loads(path.read_text())
    if getattr(args, "mode", None):
        raw["mode"] = args.mode
    for flag in ("seed", "report", "failures_csv", "count", "threads", "spec", "spec_file", "system_file"):
        value = getattr(args, flag, None)
        if value is not None:
            raw[flag] = value
    sampler_over = {}
    for flag in ("n_ess", "n_skip", "budget"):
        value = getattr(args, flag, None)
        if value is not None:
            sampler_over[flag] = value
    if getattr(args, "sampler_kind", None):
        sampler_over["kind"] = args.sampler_kind
    if sampler_over:
        raw["sampler"] = {**raw.get("sampler", {}), **sampler_over}
    if getattr(args, "n_sim", None) is not None:
        raw["mc"] = {**raw.get("mc", {}), "n_sim": args.n_sim}
    return _resolve_config(raw)


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="JSON config document")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--report", help="report output path")
    parser.add_argument("--failures-csv", dest="failures_csv")
    parser.add_argument("--spec")
    parser.add_argument("--spec-file", dest="spec_file")
    parser.add_argument("--system-file", dest="system_file")
    parser.add_argument("--threads", type=int)
    parser.add_argument("--n-ess", dest="n_ess", type=int)
    parser.add_argument("--n-skip", dest="n_skip", type=int)
    parser.add_argument("--budget", type=int)
    parser.add_argument("--sampler", dest="sampler_kind", choices=["lipschitz", "bo"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stless", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("verify-linear", "verify-blackbox", "synthesize", "mc", "sample-failures"):
        p = sub.add_parser(name)
        _add_common(p)
        if name == "mc":
            p.add_argument("--n-sim", dest="n_sim", type=int)
        if name == "sample-failures":
            p.add_argument("--count", type=int)

    p_bound = sub.add_parser("bound")
    p_bound.add_argument("--lambda", dest="lam", type=float, required=True)
    p_bound.add_argument("--delta", type=float, required=True)
    p_bound.add_argument("--ness", type=int, required=True)
    p_bound.add_argument("--k", type=int, required=True)
    p_bound.add_argument("--report")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "bound":
            config = _resolve_config({"mode": "bound", "report": args.report})
            return cmd_bound(args, config)
        config = _load_config(args)
        config["mode"] = args.command
        if args.command == "verify-linear":
            return cmd_verify_linear(config)
        if args.command == "verify-blackbox":
            return cmd_verify_blackbox(config)
        if args.command == "mc":
            return cmd_mc(config)
        if args.command == "synthesize":
            return cmd_synthesize(config)
        if args.command == "sample-failures":
            return cmd_sample_failures(config)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, StlSyntaxError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return EXIT_VALIDATION
    except (hdr.LadderError, bb.SimulationBudgetExceeded) as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return EXIT_BUDGET
    except bb.SimulatorError as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return EXIT_PROTOCOL


if __name__ == "__main__":
    raise SystemExit(main())
