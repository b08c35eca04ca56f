"""Command line front end: ``towerdecay <command> ...``.

Exit codes: 0 success, 2 validation failure, 64 usage error, 70 numeric failure.
Outputs go to ``--out``, else ``$TOWERDECAY_OUT``, else ``./out``.
"""
from __future__ import annotations

import argparse
import csv
import io as _io
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .tails import TailError, parse_tail

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_USAGE = 64
EXIT_NUMERIC = 70
OUT_ENV = "TOWERDECAY_OUT"


class UsageError(Exception):
    pass


class ValidationFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int(text):
    """Integer flag that also accepts forms such as ``1e6``."""
    try:
        val = float(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from exc
    if val != int(val) or val < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text!r}")
    return int(val)


def _positive(text):
    val = _int(text)
    if val <= 0:
        raise argparse.ArgumentTypeError("budget must be positive")
    return val


def out_dir(args):
    path = args.out or os.environ.get(OUT_ENV) or "out"
    return Path(path)


def _tail(text, name):
    try:
        return parse_tail(text)
    except TailError as exc:
        raise UsageError(f"--{name}: {exc}") from exc


def _csv_text(header, rows):
    buf = _io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for row in rows:
        wr.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _load(path):
    from .tower import load_spec
    return load_spec(path)


# ---------------------------------------------------------------------------
# commands

def cmd_validate(args):
    from .tower import MarkovViolation, spectral_decomposition, validate_tower
    spec, variation, _ = _load(args.spec)
    try:
        report = validate_tower(spec, variation)
    except MarkovViolation as exc:
        doc = {"ok": False, "error": str(exc), "atom": exc.atom_id}
        io.write_json(out_dir(args) / "validate.json", doc, "validate")
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID
    spectral = spectral_decomposition(report.spec)
    doc = report.to_dict()
    doc["spectral"] = spectral.to_dict()
    io.write_json(out_dir(args) / "validate.json", doc, "validate")
    for name, ax in report.axioms.items():
        print(f"{name:5s} {'pass' if ax['passed'] else 'FAIL'}  {ax['name']}")
    print(f"eta = {report.eta:.6g}, normalization factor = {report.normalization_factor:.6g}")
    for note in spectral.notes():
        print(note)
    return EXIT_OK if report.ok else EXIT_INVALID


def cmd_spectral(args):
    from .tower import spectral_decomposition
    spec, _, _ = _load(args.spec)
    rep = spectral_decomposition(spec)
    io.write_json(out_dir(args) / "spectral.json", rep.to_dict(), "spectral")
    print(f"{len(rep.components)} recurrent components, {len(rep.transient)} transient atoms")
    for note in rep.notes():
        print(note)
    return EXIT_OK


def _operator(args, spec, variation):
    from .tower import validate_tower
    from .transfer import JacobianModel, build_operator, invariant_density
    report = validate_tower(spec, variation)
    if not report.ok:
        raise ValidationFailure(f"tower fails {report.failures()}")
    tail = variation.tail if variation is not None else None
    jac = JacobianModel(tail, seed=args.seed, amplitude=args.amplitude) if tail is not None else JacobianModel()
    op = build_operator(report.spec, jac, depth=args.depth)
    dens = invariant_density(op, tol=args.tol, max_iter=args.max_iter)
    return op.with_density(dens.h), dens, report


def cmd_density(args):
    from .transfer import (distortion_check, gibbs_check, normalized_apply,
                           write_density_csv, write_matrix_triplets)
    spec, variation, _ = _load(args.spec)
    op, dens, report = _operator(args, spec, variation)
    out = out_dir(args)
    with io.atomic_path(out / "density.csv") as tmp:
        write_density_csv(op, tmp)
    with io.atomic_path(out / "operator.txt") as tmp:
        write_matrix_triplets(op, tmp)
    conf = float(np.max(np.abs(op.L0.T @ op.nu - op.nu)))
    support = op.h > 0
    l1 = float(np.max(np.abs(normalized_apply(op, np.ones(op.size))[support] - 1))) if support.all() else None
    doc = {"size": op.size, "depth": op.depth, "iterations": dens.iterations,
           "residual": dens.residual, "period": dens.period, "notes": dens.notes,
           "conformality_error": conf, "l1_error": l1, "eta": report.eta}
    if variation is not None and op.depth >= 2:
        dist = distortion_check(op, variation.tail)
        gib = gibbs_check(op, variation.tail)
        doc["distortion"] = {"max_ratio": dist.max_ratio, "constant": dist.constant, "ok": dist.ok}
        doc["gibbs"] = {"constant_nu": gib.constant_nu, "constant_mu": gib.constant_mu,
                        "predicted": gib.predicted}
    io.write_json(out / "density.json", doc, "density")
    print(f"h computed on {op.size} cylinders in {dens.iterations} iterations "
          f"(residual {dens.residual:.2e}, conformality {conf:.2e})")
    return EXIT_OK


def cmd_rates(args):
    from .rates import compute_rates
    if args.omega is None or args.nu is None:
        raise UsageError("rates needs both --omega and --nu")
    omega, nu = _tail(args.omega, "omega"), _tail(args.nu, "nu")
    report = compute_rates(omega, nu, args.nmax, eps=args.eps, D=args.D, k0=args.k0)
    n = np.unique(np.concatenate([np.arange(0, min(args.nmax, 100) + 1),
                                  np.geomspace(1, max(args.nmax, 1), 400).astype(np.int64)]))
    ell, _, logu = report.evaluate(n)
    out = out_dir(args)
    io.write_text(out / "rates.csv", _csv_text(["n", "ell", "u_n"],
                  ((int(a), int(b), float(np.exp(c))) for a, b, c in zip(n, ell, logu))))
    summary = report.summary()
    summary["n_max"] = args.nmax
    summary["kappa"] = summary.get("kappa")
    io.write_json(out / "rates.json", summary, "rates")
    _plot_rates(out / "rates.svg", n, logu, summary)
    print(f"class {summary['class']}, s = {report.s}, k0 = {report.k0}, D = {report.D:g}")
    if "exponent" in summary:
        print(f"exponent {summary['exponent']:.6g}")
    if summary.get("kappa") is not None:
        print(f"kappa {summary['kappa']:.6g}")
    return EXIT_OK


def _plot_rates(path, n, logu, summary):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    matplotlib.rcParams["svg.hashsalt"] = "towerdecay"
    fig, ax = plt.subplots(figsize=(6, 4))
    mask = n > 0
    ax.plot(n[mask], logu[mask], lw=1.2, label="log u_n")
    fit = summary.get("fitted")
    cls = summary.get("class")
    if fit:
        x = n[mask].astype(float)
        if cls == "exponential":
            ax.plot(x, fit["slope"] * x, "--", lw=1, label=f"slope {fit['slope']:.3g}")
        elif cls == "polynomial":
            ax.set_xscale("log")
            anchor = logu[mask][-1] - fit["slope"] * math.log(x[-1])
            ax.plot(x, anchor + fit["slope"] * np.log(x), "--", lw=1,
                    label=f"n^{fit['slope']:.3g}")
        else:
            ax.set_xscale("log")
    ax.set_xlabel("n")
    ax.set_ylabel("log u_n")
    ax.set_title(f"{summary['omega']} / {summary['nu']} ({cls})")
    ax.legend(loc="lower left")
    fig.tight_layout()
    with io.atomic_path(path) as tmp:
        fig.savefig(tmp, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_cones(args):
    from .birkhoff import PositiveCone, contraction_certificate
    from .cones import (ConeSpec, build_cone_config, cone_step_check, normalized_power,
                        paper_cone_membership, random_cone_members, write_diagnostics_csv)
    from .rates import Weight
    spec, variation, _ = _load(args.spec)
    if variation is None:
        raise ValidationFailure("cones need a summable variation sequence")
    op, _, _ = _operator(args, spec, variation)
    weight = Weight("exponential", args.v_base)
    cfg = build_cone_config(op, variation.tail, weight, D=args.D, j_max=args.levels + 1)
    rows, steps = [], []
    for j in range(args.levels):
        res = paper_cone_membership(np.ones(op.size), ConeSpec(j, 0.0, 1.0, 1.0, cfg))
        rows.extend((j, c, m) for c, m in sorted(res.margins.items()))
        st = cone_step_check(cfg, j, args.samples, seed=args.seed)
        rows.extend((j + 1, f"step{c}", m) for c, m in sorted(st.worst.items()))
        steps.append({"level": j, "k": st.k, "target": list(st.target), "samples": st.samples,
                      "failures": st.failures, "ok": st.ok})
    out = out_dir(args)
    with io.atomic_path(out / "cone_diagnostics.csv") as tmp:
        write_diagnostics_csv(rows, tmp)
    members = random_cone_members(cfg, 0, min(args.samples, 30), seed=args.seed)
    k1 = int(cfg.ks[0])
    cert = contraction_certificate(lambda f: normalized_power(cfg, f, k1), PositiveCone(),
                                   PositiveCone(), members)
    io.write_json(out / "certificate.json", cert.to_dict(), "certificate")
    doc = {"config": cfg.summary(), "steps": steps, "ok": all(s["ok"] for s in steps)}
    io.write_json(out / "cones.json", doc, "cones")
    print(f"s = {cfg.s}, t = {cfg.t}, k0 = {cfg.k0}, k_j = {[int(k) for k in cfg.ks]}")
    for s in steps:
        print(f"level {s['level']} -> {s['level'] + 1}: {s['failures']} failures of {s['samples']}")
    return EXIT_OK if doc["ok"] else EXIT_INVALID


def _observable_vector(name, op):
    """Observable on tower cylinders: ``const``, ``atom:<id>``, ``floor[:cap]``, ``bump``."""
    if name == "const":
        return np.ones(op.size)
    if name.startswith("atom:"):
        aid = int(name.split(":", 1)[1])
        k = op.spec.index.get(aid)
        if k is None:
            raise UsageError(f"unknown atom {aid}")
        return (op.base_atoms() == k).astype(float)
    if name.startswith("floor"):
        cap = int(name.split(":", 1)[1]) if ":" in name else 10
        return np.minimum(op.floors(), cap).astype(float)
    if name == "bump":
        # depends on the second letter only: Lipschitz for d0
        second = np.array([w[1] if len(w) > 1 else w[0] for w in op.words])
        return np.cos(second.astype(float))
    raise UsageError(f"unknown observable {name!r}")


def _map_observable(name):
    if name == "const":
        return lambda x: np.ones_like(x)
    if name == "x":
        return lambda x: x
    if name == "bump":
        return lambda x: np.maximum(0.0, 1 - 4 * np.abs(x - 0.25))
    raise UsageError(f"unknown map observable {name!r}")


def cmd_correlate(args):
    from .correlations import NoCleanDecay, fit_decay, operator_correlations, monte_carlo_correlations
    out = out_dir(args)
    verdict = {"mode": None}
    if args.spec:
        import scipy.linalg
        from .transfer import normalized_matrix
        spec, variation, _ = _load(args.spec)
        op, _, _ = _operator(args, spec, variation)
        phi = _observable_vector(args.phi, op)
        psi = _observable_vector(args.psi, op)
        series = operator_correlations(op, phi, psi, args.nmax)
        ev = np.sort(np.abs(scipy.linalg.eigvals(normalized_matrix(op).toarray())))[::-1]
        lam2 = float(ev[1]) if len(ev) > 1 else 0.0
        predicted = -math.log(lam2) if lam2 > 0 else math.inf
        verdict.update(mode="operator", predicted_exponent=predicted, decay_class="exponential")
        fit_cls = "exponential"
        floor = 1e-12 * max(abs(series.cor[0]), 1e-300)
        keep = (np.abs(series.cor) > floor) | (series.n == 0)
        series.n, series.cor, series.stderr = series.n[keep], series.cor[keep], series.stderr[keep]
        window = (series.n >= 10) & (series.n <= 20)
        if lam2 > 0 and np.any(window):
            # constant fixed on [10, 20], long enough to span an oscillation of complex pairs
            C = float(np.max(np.abs(series.cor[window]) / lam2 ** series.n[window].astype(float)))
            tail = series.n >= 10
            bound = C * lam2 ** series.n[tail].astype(float) * (1 + 1e-6) + floor
            verdict["bound_respected"] = bool(np.all(np.abs(series.cor[tail]) <= bound))
            verdict["fit_window"] = [10, 20]
        else:
            verdict["bound_respected"] = True
    else:
        from .induction import MapParams, sample_orbits
        from .rates import compute_rates
        from .tails import TailModel
        params = MapParams(args.gamma, args.alpha, args.eps0, args.left)
        A, B = sample_orbits(params, args.chains, args.length, args.burn_in, args.seed,
                             (_map_observable(args.phi), _map_observable(args.psi)))
        series = monte_carlo_correlations((A, B), None, None, args.nmax, seed=args.seed)
        rep = compute_rates(TailModel.polynomial(args.alpha), TailModel.polynomial(1 / args.gamma),
                            args.nmax, eps=args.eps)
        predicted = min(args.alpha - 1, 1 / args.gamma - 1 - args.eps)
        verdict.update(mode="monte-carlo", predicted_exponent=predicted, decay_class="polynomial",
                       seed=args.seed, dropped_lags=series.truncated)
        fit_cls = "polynomial"
        verdict["bound_respected"] = _dominated(series, rep)
    if np.all(np.abs(series.cor) <= 1e-12):
        verdict.update(bound_respected=True, fitted_exponent=None, fit_note="zero series")
        return _finish_correlate(out, series, verdict)
    pos = series.n >= 1
    y = np.abs(series.cor[pos])
    if verdict["mode"] == "operator":
        # running maximum from the right: the envelope of oscillating series
        y = np.maximum.accumulate(y[::-1])[::-1]
    try:
        fit = fit_decay(series.n[pos], y, fit_cls, seed=args.seed)
        verdict["fitted_exponent"] = fit.value
        verdict["fit_r2"] = fit.r2
    except NoCleanDecay as exc:
        verdict["fitted_exponent"] = None
        verdict["fit_note"] = str(exc)
    return _finish_correlate(out, series, verdict)


def _finish_correlate(out, series, verdict):
    with io.atomic_path(out / "correlations.csv") as tmp:
        series.to_csv(tmp)
    io.write_json(out / "correlate.json", verdict, "correlate")
    print(f"bound respected: {verdict['bound_respected']}; fitted {verdict['fitted_exponent']}, "
          f"predicted {verdict['predicted_exponent']}")
    return EXIT_OK


def _dominated(series, report, n_fit=10):
    """``|Cor(n)| <= C u_n`` for measured lags ``n >= n_fit`` with C fixed at ``n_fit``."""
    n = series.n
    mask = n >= n_fit
    if not np.any(mask):
        return True
    _, _, logu = report.evaluate(n[mask])
    i0 = int(np.argmin(np.abs(n[mask] - n_fit)))
    C = abs(series.cor[mask][i0]) / math.exp(logu[i0])
    return bool(np.all(np.abs(series.cor[mask]) <= C * np.exp(logu) * (1 + 1e-12)))


def cmd_induce(args):
    from .induction import MapParams, induce_tower, write_tail_csv
    from .tower import spec_to_dict
    params = MapParams(args.gamma, args.alpha, args.eps0, args.left)
    tower = induce_tower(params, grid=args.grid, max_level=args.max_level,
                         max_return=args.max_return, budget=args.budget,
                         osc_samples=args.osc_samples, seed=args.seed)
    out = out_dir(args)
    with io.atomic_path(out / "tail_mass.csv") as m, io.atomic_path(out / "tail_oscillation.csv") as o:
        write_tail_csv(tower.tail, m, o)
    spec = tower.spec(args.max_atoms)
    io.write_json(out / "tower.json", spec_to_dict(spec, truncation={"max_return": int(spec.return_times.max())}))
    doc = {"params": {"gamma": params.gamma, "alpha": params.alpha, "eps0": params.eps0,
                      "left": params.left},
           "cells": len(tower.cells), "censored_cells": len(tower.censored),
           "censored_mass": tower.tail.censored_mass, "evaluations": tower.evaluations,
           "nu_fit": tower.tail.nu_fit, "omega_fit": tower.tail.omega_fit,
           "claimed": {"nu_exponent": 1 / params.gamma, "omega_exponent": params.alpha},
           "seed": args.seed, "atoms": len(spec.atoms)}
    io.write_json(out / "induce.json", doc, "induce")
    print(f"{len(tower.cells)} cells, censored mass {tower.tail.censored_mass:.3g}; "
          f"floor tail exponent {tower.tail.nu_fit.get('exponent', float('nan')):.3f} "
          f"(claimed {1 / params.gamma:.3f})")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="towerdecay", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./out)")
        sp.add_argument("--seed", type=_int, default=0)

    def operator_flags(sp):
        sp.add_argument("--depth", type=_positive, default=6)
        sp.add_argument("--tol", type=float, default=1e-12)
        sp.add_argument("--max-iter", type=_positive, default=200_000)
        sp.add_argument("--amplitude", type=float, default=1.0,
                        help="fraction of the variation envelope used by the Jacobian perturbation")

    sp = sub.add_parser("validate", help="check the tower axioms")
    sp.add_argument("spec")
    common(sp)
    sp = sub.add_parser("spectral", help="spectral decomposition of the partition graph")
    sp.add_argument("spec")
    common(sp)
    sp = sub.add_parser("density", help="transfer operator and invariant density")
    sp.add_argument("spec")
    common(sp)
    operator_flags(sp)
    sp = sub.add_parser("rates", help="explicit decay bound u_n")
    sp.add_argument("--omega")
    sp.add_argument("--nu")
    sp.add_argument("--nmax", type=_positive, default=1000)
    sp.add_argument("--eps", type=float, default=0.05)
    sp.add_argument("--D", type=float, default=5.0)
    sp.add_argument("--k0", type=_positive, default=1)
    common(sp)
    sp = sub.add_parser("cones", help="cone configuration and cone-step check")
    sp.add_argument("spec")
    sp.add_argument("--samples", type=_positive, default=100)
    sp.add_argument("--levels", type=_positive, default=1)
    sp.add_argument("--D", type=float, default=5.0)
    sp.add_argument("--v-base", type=float, default=0.75,
                    help="weight v_n = base^-n")
    common(sp)
    operator_flags(sp)
    sp = sub.add_parser("correlate", help="correlation decay against the bound")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--spec")
    src.add_argument("--map", action="store_true", help="use the indifferent interval map")
    sp.add_argument("--phi", default=None)
    sp.add_argument("--psi", default=None)
    sp.add_argument("--nmax", type=_positive, default=1000)
    sp.add_argument("--gamma", type=float, default=0.4)
    sp.add_argument("--alpha", type=float, default=2.0)
    sp.add_argument("--eps0", type=float, default=0.01)
    sp.add_argument("--eps", type=float, default=0.05)
    sp.add_argument("--left", choices=("lsv", "literal"), default="lsv")
    sp.add_argument("--chains", type=_positive, default=1000)
    sp.add_argument("--length", type=_positive, default=10_000)
    sp.add_argument("--burn-in", type=_int, default=10_000)
    common(sp)
    operator_flags(sp)
    sp = sub.add_parser("induce", help="induce the interval map onto [1/2, 1]")
    sp.add_argument("--gamma", type=float, default=0.4)
    sp.add_argument("--alpha", type=float, default=2.0)
    sp.add_argument("--eps0", type=float, default=0.01)
    sp.add_argument("--left", choices=("lsv", "literal"), default="lsv")
    sp.add_argument("--grid", type=_positive, default=4096)
    sp.add_argument("--max-level", type=_int, default=12)
    sp.add_argument("--max-return", type=_positive, default=100_000)
    sp.add_argument("--budget", type=_positive, default=10**7)
    sp.add_argument("--osc-samples", type=_positive, default=1 << 16)
    sp.add_argument("--max-atoms", type=_positive, default=None)
    common(sp)
    return p


COMMANDS = {"validate": cmd_validate, "spectral": cmd_spectral, "density": cmd_density,
            "rates": cmd_rates, "cones": cmd_cones, "correlate": cmd_correlate,
            "induce": cmd_induce}


def main(argv=None):
    from .birkhoff import ConeDomainError
    from .cones import ConeConfigError
    from .rates import RateError
    from .tower import TowerError
    from .transfer import OperatorError

    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "correlate":
        args.phi = args.phi or ("atom:1" if args.spec else "x")
        args.psi = args.psi or args.phi
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"towerdecay: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationFailure, TowerError) as exc:
        print(f"towerdecay: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"towerdecay: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OperatorError, RateError, ConeConfigError, ConeDomainError, TailError,
            FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"towerdecay: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
