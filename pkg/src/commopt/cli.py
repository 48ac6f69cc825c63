"""Command line interface: ``commopt gen | run | bench | verify``.

Every report is JSON and embeds the build id, seed, preset and schema
version.  Parameters that are not flags are passed as ``-P key=value``.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import subprocess
import sys
import warnings
from typing import Optional

import numpy as np

from . import __version__, checks
from .commsim import (Network, RowPartitionedMatrix, even_partition, load_instance, quantize,
                      save_instance)
from .config import SCHEMA_VERSION, get_preset
from .embed import (block_lev_sample, block_sample_size, estimate_block_leverages,
                    refinement_overestimates)
from .hardgen import (RegimeWarning, check_inner_product, gen_feasibility, gen_high_precision,
                      gen_inner_product, gen_regression_gap, load_hard_instance,
                      regression_distinguisher, verify_feasibility)
from .leverage import block_leverage, leverage_exact, pencil_bounds
from .lowrank import best_rank_k_error, low_rank_projection
from .lp import ipm_solve, load_lp, lp_oracle, random_feasible_lp, save_lp
from .regression import (build_preconditioner, exact_least_squares, l1_solve, lp_regression_solve,
                         richardson_solve, solve_l2_high_accuracy, solve_lp_constant)

GEN_KINDS = ("random", "planted-rank", "lp", "inner-product", "regression-gap", "feasibility",
             "high-precision")
PROTOCOLS = ("overestimates", "preconditioner", "richardson", "l2_constant", "lp_constant",
             "block_leverage", "lowrank", "lp")
VERIFY_SUITES = {
    "overestimates": ["overestimates"],
    "preconditioner": ["preconditioner"],
    "richardson": ["richardson", "richardson_bits"],
    "l2_constant": ["constant_regression"],
    "lp_constant": ["constant_regression"],
    "block_leverage": ["block_leverage"],
    "lowrank": ["lowrank"],
    "lp_sampler": ["lp_sampler"],
    "lewis": ["lewis"],
    "lp": ["lp"],
    "hardgen": ["hard_instances"],
    "ledger": ["ledger_additivity"],
    "determinism": ["determinism"],
    "all": list(checks.ALL_CHECKS),
}
CSV_HEADER = ["param", "value", "mean_bits", "std_bits", "mean_rounds"]


def build_id() -> str:
    """``git describe --always --dirty`` of the source tree, else the package version."""
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def _parse_value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_params(items) -> dict:
    """``["n=100", "eps=0.5"]`` -> ``{"n": 100, "eps": 0.5}``."""
    out = {}
    for item in items or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise SystemExit(f"parameter {item!r} is not of the form key=value")
        out[key.strip()] = _parse_value(val.strip())
    return out


def parse_sweep(text: Optional[str]) -> tuple[str, list]:
    """``"s=2,4,8"`` -> ``("s", [2, 4, 8])``; an empty value list is allowed."""
    if not text:
        return "", []
    key, sep, vals = text.partition("=")
    if not sep:
        raise SystemExit(f"sweep {text!r} is not of the form name=v1,v2,...")
    return key.strip(), [_parse_value(v.strip()) for v in vals.split(",") if v.strip()]


def _envelope(args, preset, **body) -> dict:
    doc = {"schema_version": SCHEMA_VERSION, "build": build_id(), "seed": args.seed,
           "preset": preset.name}
    doc.update(body)
    return doc


def _write_json(doc: dict, path: Optional[str]) -> None:
    text = json.dumps(doc, indent=1, sort_keys=True, default=_json_default)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _json_default(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return str(x)


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def generate(kind: str, params: dict, seed: int, out: str) -> list[str]:
    """Write the instance(s) for ``kind``; returns the paths written."""
    rng = np.random.default_rng(seed)
    s = int(params.get("s", 4))
    if kind == "random":
        n, d, L = int(params.get("n", 100)), int(params.get("d", 5)), int(params.get("L", 8))
        A = RowPartitionedMatrix.from_dense(rng.standard_normal((n, d)), even_partition(n, s), L)
        b = quantize(rng.standard_normal(n), L)
        save_instance(out, A, "random", {"seed": seed}, {"b": b})
        return [out]
    if kind == "planted-rank":
        n, L = int(params.get("n", 128)), int(params.get("L", 12))
        spectrum = params.get("spectrum")
        spectrum = checks.LOWRANK_SPECTRUM if spectrum is None else \
            [float(v) for v in str(spectrum).split(":")]
        A = checks.planted_spectrum_instance(n, spectrum, s, L, seed,
                                             float(params.get("scale", 4.0)))
        save_instance(out, A, "planted-rank", {"seed": seed, "spectrum": list(spectrum)})
        return [out]
    if kind == "lp":
        n, d, L = int(params.get("n", 40)), int(params.get("d", 5)), int(params.get("L", 12))
        inst = random_feasible_lp(n, d, s, L, seed)
        save_lp(out, inst, seed)
        return [out]
    eps = float(params.get("eps", 2.0 ** -16))
    d = int(params.get("d", 6))
    L = int(params.get("L", 24))
    case = str(params.get("case", "a"))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RegimeWarning)
        if kind == "inner-product":
            inst = gen_inner_product(s, d, float(params.get("eps", 0.1)), case, seed)
        elif kind == "regression-gap":
            inst = gen_regression_gap(s, d, L, eps, seed)[0 if case == "a" else 1]
        elif kind == "feasibility":
            inst = gen_feasibility(s, d, L, eps, case, seed)
        elif kind == "high-precision":
            inst = gen_high_precision(s, d, seed, int(params.get("L", 52)))
        else:
            raise SystemExit(f"unknown instance kind {kind!r}")
    inst.save(out)
    return [out, out + ".cert.json"]


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def _ledger_doc(net: Network, protocol: str) -> dict:
    rep = net.ledger.report(protocol)
    rep["bits_total"] = net.ledger.total_bits
    rep["additive"] = net.ledger.check_additivity()
    return rep


def run_protocol(protocol: str, instance: str, params: dict, seed: int, preset) -> tuple[dict, Network]:
    """Run one protocol on an instance file; returns (result metrics, network)."""
    preset = get_preset(preset)
    if protocol == "lp":
        inst = load_lp(instance)
        net = Network(inst.A.s, mode=params.get("mode", "coordinator"), seed=seed)
        eps = float(params.get("eps", 1e-3))
        r = ipm_solve(inst, eps, net, preset)
        A = inst.A.dense()
        opt, _ = lp_oracle(A, inst.b, inst.c)
        return {"x": r.x, "objective": r.objective, "oracle_objective": opt,
                "objective_bound": opt + eps * float(np.linalg.norm(inst.c)) * inst.R,
                "residual": r.residual, "residual_bound": r.report["residual_bound"],
                "iters": r.iterations, "resamples": r.resamples,
                "phase_bits": r.report["phase_bits"], "max_kkt": r.report["max_kkt"]}, net
    A, doc, vecs = load_instance(instance, ("b",))
    X = A.dense()
    net = Network(A.s, mode=params.get("mode", "coordinator"), seed=seed)
    kappa = float(params.get("kappa", 1e3))
    b = vecs.get("b")
    if protocol in ("richardson", "l2_constant", "lp_constant") and b is None:
        raise SystemExit(f"{protocol} needs an instance with a b vector")
    if protocol == "overestimates":
        r = refinement_overestimates(A, net, kappa=kappa, preset=preset)
        tau = leverage_exact(X).tau
        return {"tau_hat_exponents": r.exponents, "tau_hat_sum": float(r.tau_hat.sum()),
                "dominates": bool(np.all(r.tau_hat >= tau)), "sums": r.sums}, net
    if protocol == "preconditioner":
        pre = build_preconditioner(A, net, kappa=kappa, preset=preset)
        lo, hi = pencil_bounds(pre.M_sampled, X.T @ X)
        return {"pencil_bounds": [lo, hi], "lam": pre.lam}, net
    if protocol == "richardson":
        eps = float(params.get("eps", 1e-6))
        lam = float(params.get("lam", 1.23))
        xe = exact_least_squares(A, b)
        pre = build_preconditioner(A, net, kappa=kappa, preset=preset)
        r = richardson_solve(A, b, net, pre.M, lam, eps, bool(params.get("truncate", 1)),
                             x_star=xe)
        xs = np.array([float(v) for v in xe])
        return {"x": r.x, "iters": r.iterations, "bits_total": net.ledger.total_bits,
                "bits_per_iter": r.history["bits_machine"],
                "residual": float(np.linalg.norm(X @ r.x - b)),
                "oracle_residual": float(np.linalg.norm(X @ xs - b))}, net
    if protocol in ("l2_constant", "lp_constant"):
        p = 2.0 if protocol == "l2_constant" else float(params.get("p", 1.0))
        eps = float(params.get("eps", 0.5))
        r = solve_lp_constant(A, b, net, p, eps, preset=preset)
        if p == 2:
            xo = np.linalg.lstsq(X, b, rcond=None)[0]
        elif p == 1:
            xo = l1_solve(X, b)
        else:
            xo = lp_regression_solve(X, b, p)
        opt = float(np.sum(np.abs(X @ xo - b) ** p) ** (1 / p))
        return {"x": r.x, "p": p, "residual": r.residual, "oracle_residual": opt,
                "ratio": r.residual / opt if opt > 0 else (0.0 if r.residual == 0 else np.inf)}, net
    if protocol == "block_leverage":
        est = estimate_block_leverages(A, net, preset)
        N = int(params.get("N", block_sample_size(A.d, 0.25, float(params.get("eps", 0.5)))))
        sa = block_lev_sample(A, net, est.L / est.L.sum(), N, float(params.get("eps", 0.5)))
        return {"L": est.L, "true": block_leverage(X, A.partition), "rounds_used": est.rounds,
                "samples": N, "sample_bounds": list(sa.bounds(X))}, net
    if protocol == "lowrank":
        k = int(params.get("k", 3))
        eps = float(params.get("eps", 0.5))
        r = low_rank_projection(A, net, k, eps, preset=preset)
        best = best_rank_k_error(X, k)
        return {"V": r.V, "k": k, "error": r.error(X), "best_error": best,
                "ratio": r.error(X) / best if best > 0 else 1.0, "rows": r.rows}, net
    raise SystemExit(f"unknown protocol {protocol!r}")


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

BENCH_DEFAULTS = {"n": 128, "d": 6, "s": 4, "L": 12, "eps": None, "k": 3}
BENCH_EPS = {"richardson": 1e-6, "lp": 1e-3, "lowrank": 0.5, "l2_constant": 0.5,
             "lp_constant": 0.5}


def bench_once(protocol: str, cfg: dict, seed: int, preset) -> Network:
    """Run ``protocol`` on a fresh seeded instance described by ``cfg``."""
    n, d, s, L = int(cfg["n"]), int(cfg["d"]), int(cfg["s"]), int(cfg["L"])
    eps = cfg.get("eps") or BENCH_EPS.get(protocol, 0.5)
    net = Network(s, seed=seed)
    if protocol == "lp":
        ipm_solve(random_feasible_lp(n, d, s, L, seed), eps, net, preset)
        return net
    if protocol == "lowrank":
        A = checks.gaussian_instance(n, d, s, L, seed, with_b=False)
        low_rank_projection(A, net, int(cfg["k"]), eps, preset=preset)
        return net
    A, b = checks.noisy_instance(n, d, s, L, seed)
    if protocol == "overestimates":
        refinement_overestimates(A, net, preset=preset)
    elif protocol == "preconditioner":
        build_preconditioner(A, net, preset=preset)
    elif protocol == "richardson":
        solve_l2_high_accuracy(A, b, net, eps, preset=preset)
    elif protocol in ("l2_constant", "lp_constant"):
        solve_lp_constant(A, b, net, 2.0 if protocol == "l2_constant" else float(cfg.get("p", 1)),
                          eps, preset=preset)
    elif protocol == "block_leverage":
        estimate_block_leverages(A, net, preset)
    else:
        raise SystemExit(f"unknown protocol {protocol!r}")
    return net


def bench(protocol: str, sweep: str, seeds: int, params: dict, preset, out) -> list[list]:
    """Mean and spread of total bits and rounds over seeds for each sweep value."""
    key, values = parse_sweep(sweep)
    rows = []
    for value in values:
        cfg = dict(BENCH_DEFAULTS, **params)
        cfg[key] = value
        bits, rounds = [], []
        for seed in range(seeds):
            net = bench_once(protocol, cfg, seed, preset)
            bits.append(net.ledger.total_bits)
            rounds.append(net.ledger.rounds)
        rows.append([key, value, float(np.mean(bits)), float(np.std(bits)), float(np.mean(rounds))])
    fh = open(out, "w", newline="") if out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        w.writerows(rows)
    finally:
        if out:
            fh.close()
    return rows


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def verify_instance(path: str) -> dict:
    """Check the planted certificate of a generated hard instance."""
    inst = load_hard_instance(path)
    if inst.kind == "inner_product":
        ok = check_inner_product(inst)
    elif inst.kind == "feasibility":
        ok = verify_feasibility(inst)
    elif inst.kind == "regression_gap":
        x = np.linalg.lstsq(inst.A.dense(), inst.b, rcond=None)[0]
        ok = regression_distinguisher(inst, x) == inst.certificate["case"]
    elif inst.kind == "high_precision":
        X = inst.A.dense()
        ev = np.linalg.eigvalsh(X.T @ X)
        ok = bool(np.isclose(ev[0], inst.certificate["lambda_min"], rtol=1e-9)
                  and np.isclose(ev[-1], inst.certificate["lambda_max"], rtol=1e-9))
    else:
        raise SystemExit(f"no certificate check for kind {inst.kind!r}")
    return {"kind": inst.kind, "ok": bool(ok)}


def verify(protocol: str, seeds: Optional[int], preset) -> list:
    names = VERIFY_SUITES.get(protocol)
    if names is None:
        raise SystemExit(f"unknown verify target {protocol!r}; choose from {sorted(VERIFY_SUITES)}")
    results = []
    for name in names:
        fn = checks.ALL_CHECKS.get(name) or checks.EXTRA_CHECKS[name]
        kw = {}
        code = fn.__code__.co_varnames[:fn.__code__.co_argcount]
        if seeds is not None and "seeds" in code:
            kw["seeds"] = seeds
        if "preset" in code:
            kw["preset"] = preset
        res = fn(**kw)
        print(res.line(), flush=True)
        results.append(res)
    return results


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="commopt", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", default=os.environ.get("COMMOPT_PRESET", "desk"),
                        help="constant preset (paper or desk; default $COMMOPT_PRESET or desk)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=None, help="output path (default stdout)")
    common.add_argument("-P", "--param", action="append", default=[], metavar="KEY=VALUE",
                        help="extra parameter, repeatable")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="write an instance file")
    g.add_argument("kind", choices=GEN_KINDS)

    r = sub.add_parser("run", parents=[common], help="run one protocol on an instance")
    r.add_argument("--protocol", required=True, choices=PROTOCOLS)
    r.add_argument("--instance", required=True)

    b = sub.add_parser("bench", parents=[common], help="parameter sweep to CSV")
    b.add_argument("--protocol", required=True, choices=PROTOCOLS)
    b.add_argument("--sweep", default="", help='e.g. "s=2,4,8,16,32"')
    b.add_argument("--seeds", type=int, default=5)

    v = sub.add_parser("verify", parents=[common], help="oracle checks; nonzero exit on failure")
    v.add_argument("--protocol", default="all", choices=sorted(VERIFY_SUITES))
    v.add_argument("--instance", default=None, help="check a generated hard instance instead")
    v.add_argument("--seeds", type=int, default=None)
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    preset = get_preset(args.preset)
    params = parse_params(args.param)
    if args.command == "gen":
        if not args.out:
            raise SystemExit("gen needs --out")
        paths = generate(args.kind, params, args.seed, args.out)
        print("\n".join(paths))
        return 0
    if args.command == "run":
        result, net = run_protocol(args.protocol, args.instance, params, args.seed, preset)
        doc = _envelope(args, preset, protocol=args.protocol, instance=args.instance,
                        params=params, ledger=_ledger_doc(net, args.protocol),
                        rounds=net.ledger.rounds, result=result)
        _write_json(doc, args.out)
        return 0
    if args.command == "bench":
        bench(args.protocol, args.sweep, args.seeds, params, preset, args.out)
        return 0
    if args.instance:
        res = verify_instance(args.instance)
        _write_json(_envelope(args, preset, verify=res), args.out)
        return 0 if res["ok"] else 1
    results = verify(args.protocol, args.seeds, preset)
    summary = [{"name": r.name, "ok": r.ok, "passed": r.passed, "total": r.total,
                "required": r.required, "summary": r.summary} for r in results]
    if args.out:
        _write_json(_envelope(args, preset, checks=summary), args.out)
    return 0 if all(r.ok for r in results) else 1


if __name__ == "__main__":
    sys.exit(main())
