"""Command-line entry point: ``merton-poisson <command> --seed N [--config FILE] [--model exp|pow] [--out DIR]``.

Exit status 0 on success, 1 on a domain/model failure, 2 on a usage or
configuration error.  Failures print a JSON object to stderr and, when an
output directory is known, also write it to ``error.json``.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import diffusion, kesten
from .errors import MertonPoissonError
from .inference import (PortfolioSeries, build_priors, map_estimate, preliminary_estimates,
                        prior_init)
from .io import (ConfigError, RunConfig, atomic_write, format_dataset, load_bundled_dataset,
                 load_dataset, csv_preamble, write_csv, write_json)
from .latent import EXPONENTIAL, POWER, CorrelationKernel
from .merton import IntensityParams, MertonParams, simulate_merton, simulate_poisson_lognormal
from .selection import compare_models, default_t0_range, select_sc

COMMANDS = ("simulate", "scaling", "impact", "fit", "compare", "kesten")
MODEL_FLAGS = {"exp": EXPONENTIAL, "pow": POWER}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="merton-poisson", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="64-bit seed (overrides the config)")
    p.add_argument("--model", choices=sorted(MODEL_FLAGS), help="kernel family (overrides the config)")
    p.add_argument("--out", type=Path, help="output directory (overrides the config)")
    return p


def resolve_config(args) -> RunConfig:
    overrides = {"seed": args.seed, "out": None if args.out is None else str(args.out),
                 "model": None if args.model is None else MODEL_FLAGS[args.model]}
    if args.config is not None:
        return RunConfig.from_file(args.config, overrides)
    return RunConfig.from_dict({k: v for k, v in overrides.items() if v is not None})


def _kernel(cfg: RunConfig) -> CorrelationKernel:
    return CorrelationKernel(cfg.model, cfg.kernel_value)


def _series(cfg: RunConfig) -> PortfolioSeries:
    return load_dataset(cfg.dataset) if cfg.dataset else load_bundled_dataset()


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, out: Path) -> list[Path]:
    rng = cfg.rng()
    kernel = _kernel(cfg)
    if cfg.process == "merton":
        params = MertonParams(cfg.p_prime, cfg.rho_A, cfg.N, cfg.beta)
        counts = simulate_merton(params, kernel, cfg.T, rng)
        obligors = np.full(cfg.T, cfg.N)
    else:
        counts = simulate_poisson_lognormal(IntensityParams(cfg.lambda0, cfg.alpha), kernel, cfg.T, rng)
        obligors = np.maximum(cfg.portfolio_size, counts)
    years = np.arange(cfg.start_year, cfg.start_year + cfg.T)
    series = PortfolioSeries(years, obligors, counts)
    text = format_dataset(series, csv_preamble(cfg, "simulate"))
    return [atomic_write(out / "series.csv", text)]


def cmd_scaling(cfg: RunConfig, out: Path) -> list[Path]:
    kernels = ([CorrelationKernel.exponential(t) for t in cfg.thetas]
               + [CorrelationKernel.power(g) for g in cfg.gammas])
    curve_rows, delta_rows, summary = [], [], []
    for ker in kernels:
        curve = diffusion.scaling_curve(ker, cfg.T_max)
        for T, v in zip(curve.horizons.tolist(), curve.values.tolist()):
            curve_rows.append((ker.family, ker.param, T, v))
        for T, d in diffusion.scaling_exponent(curve):
            delta_rows.append((ker.family, ker.param, T, d))
        lo = max(2, curve.horizons[-1] // 16)
        summary.append({"family": ker.family, "param": ker.param,
                        "phase": diffusion.classify_phase(ker).value,
                        "delta_at_T_max_half": delta_rows[-1][3],
                        "loglog_slope": diffusion.loglog_slope(curve, int(lo), int(curve.horizons[-1]))})
    summary.append({"log_correction_delta": diffusion.log_correction_delta(int(cfg.T_max) // 2)})
    return [write_csv(out / "scaling_curve.csv", ("family", "param", "T", "variance_of_mean"), curve_rows, cfg,
                      "scaling"),
            write_csv(out / "delta.csv", ("family", "param", "T", "delta"), delta_rows, cfg, "scaling"),
            write_json(out / "scaling.json", {"kernels": summary}, cfg, "scaling")]


def cmd_impact(cfg: RunConfig, out: Path) -> list[Path]:
    kernels = ([CorrelationKernel.exponential(t) for t in cfg.thetas]
               + [CorrelationKernel.power(g) for g in cfg.gammas])
    rows = []
    for ker in kernels:
        for h in list(cfg.horizons) + [math.inf]:
            r = diffusion.impact_ratio(ker, cfg.alpha, cfg.shock, h)
            rows.append((ker.family, ker.param, "inf" if math.isinf(h) else int(h), r.value,
                         r.divergence.value, r.growth_exponent))
    return [write_csv(out / "impact.csv", ("family", "param", "horizon", "impact", "divergence", "growth_exponent"),
                      rows, cfg, "impact")]


def cmd_fit(cfg: RunConfig, out: Path) -> list[Path]:
    rng = cfg.rng()
    series = _series(cfg)
    prelim = preliminary_estimates(series)
    family = cfg.model
    grid = cfg.sc_grid
    sc_info = None
    if grid is None or len(grid) > 1:
        t0 = cfg.t0_range or default_t0_range(len(series))
        sc, score = select_sc(series, family, grid or (1, 2, 3, 4, 5, 10, 20), t0, rng, prelim,
                              n_starts=cfg.n_starts)
        sc_info = {"grid": list(grid or (1, 2, 3, 4, 5, 10, 20)), "t0_range": list(t0), "lfo": score}
    else:
        sc = float(grid[0])
    priors = build_priors(prelim, family, sc)
    fit = map_estimate(series, family, priors, init=prior_init(priors, family), rng=rng,
                       n_starts=cfg.n_starts, gtol=cfg.gtol)
    payload = {"years": series.years, "preliminary": prelim.to_dict(), "sc": sc, "sc_selection": sc_info,
               "fit": fit.to_dict()}
    return [write_json(out / "fit.json", payload, cfg, "fit")]


def cmd_compare(cfg: RunConfig, out: Path) -> list[Path]:
    series = _series(cfg)
    t0 = cfg.t0_range or default_t0_range(len(series))
    name = Path(cfg.dataset).stem if cfg.dataset else "synthetic 1920-2023"
    report = compare_models(series, t0, cfg.rng(), families=cfg.families,
                            sc_grid=cfg.sc_grid or (1, 2, 3, 4, 5, 10, 20), chains=cfg.chains,
                            draws=cfg.draws, warmup=cfg.warmup, thin=cfg.thin, dataset=name)
    table = report.to_csv().splitlines()
    header, row = table[0].split(","), table[1].split(",")
    return [write_json(out / "comparison.json", report.to_dict(), cfg, "compare"),
            write_csv(out / "comparison.csv", header, [row], cfg, "compare")]


def cmd_kesten(cfg: RunConfig, out: Path) -> list[Path]:
    a, bb = cfg.kesten_a, cfg.kesten_beta_b
    samples = kesten.simulate_kesten(a, bb, int(cfg.kesten_samples), cfg.rng(), burn_in=int(cfg.kesten_burn_in))
    kappa = kesten.kesten_theoretical_exponent(a, bb)
    ks = [k for k in cfg.hill_k if k < samples.size / 10]
    hill = kesten.hill_plot(samples, ks)
    top = np.sort(samples)[::-1][: (max(ks) + 1 if ks else 1)]
    summary = {"a": a, "beta_b": bb, "kappa_theory": kappa,
               "moment_at_kappa": kesten.kesten_moment(a, bb, kappa),
               "hill": [{"k_top": k, "kappa_hat": e, "se": s, "rel_error": e / kappa - 1.0} for k, e, s in hill],
               "n_samples": int(samples.size), "mean": float(samples.mean())}
    return [write_csv(out / "hill.csv", ("k_top", "kappa_hat", "se"), hill, cfg, "kesten"),
            write_csv(out / "tail_samples.csv", ("rank", "value"), list(enumerate(top.tolist(), start=1)), cfg,
                      "kesten"),
            write_json(out / "kesten.json", summary, cfg, "kesten")]


HANDLERS = {"simulate": cmd_simulate, "scaling": cmd_scaling, "impact": cmd_impact, "fit": cmd_fit,
            "compare": cmd_compare, "kesten": cmd_kesten}


def run_command(command: str, cfg: RunConfig) -> list[Path]:
    if command not in HANDLERS:
        raise ConfigError(f"unknown command {command!r}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return HANDLERS[command](cfg, out)


def _fail(status: int, exc: BaseException, out: Path | None) -> int:
    doc = {"status": status, "error": type(exc).__name__, "message": str(exc)}
    diag = getattr(exc, "diagnostics", None)
    if diag:
        doc["diagnostics"] = {k: v for k, v in diag.items() if isinstance(v, (int, float, str, list, dict))}
    text = json.dumps(doc, sort_keys=True, default=str)
    print(text, file=sys.stderr)
    if out is not None:
        try:
            atomic_write(out / "error.json", text + "\n")
        except OSError:
            pass
    return status


def main(argv=None) -> int:
    out = None
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        out = Path(cfg.out)
        paths = run_command(args.command, cfg)
    except ConfigError as exc:
        return _fail(2, exc, out)
    except (MertonPoissonError, ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return _fail(1, exc, out)
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
