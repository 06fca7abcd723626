"""Posterior sampling and model comparison (WAIC, WBIC, leave-future-out).

The sampler is an adaptive random-walk Metropolis on the unconstrained joint
space ``(log lambda0, log alpha, logit theta | log gamma, y_1..y_T)``,
started near the MAP with proposals preconditioned by the MAP covariance.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
import scipy.signal
from scipy import special

from .errors import DomainError, InsufficientDraws, NonConvergence
from .inference import (EXPONENTIAL, KERNEL_PARAM, POWER, FitResult, LatentPoissonModel,
                        PortfolioSeries, PreliminaryEstimates, PriorSpec, build_priors,
                        map_estimate, preliminary_estimates, prior_init)
from .latent import canonical_family, conditional_forecast
from .merton import poisson_lognormal_logpdf

SC_GRID = (1, 2, 3, 4, 5, 10, 20)
RHAT_LIMIT = 1.1
TARGET_ACCEPT = (0.2, 0.4)
REPORT_SCHEMA = "merton-poisson/comparison/v1"
FAMILY_LABEL = {EXPONENTIAL: "Exp", POWER: "Pow"}


def default_t0_range(T: int) -> list[int]:
    """50..100 step 5 for long series, 30..42 step 1 for short ones (clipped to T - 1)."""
    if T > 100:
        grid = range(50, 101, 5)
    elif T > 42:
        grid = range(30, 43)
    else:
        grid = range(max(2, T // 2), T)
    return [t for t in grid if t < T]


# --------------------------------------------------------------------------
# Generic adaptive random-walk Metropolis
# --------------------------------------------------------------------------

@dataclass
class ChainResult:
    draws: np.ndarray
    acceptance: float
    scale: float


def rwm_chain(log_target: Callable[[np.ndarray], float], x0, cov, n_draws: int,
              rng: np.random.Generator, warmup: int = 1000, thin: int = 1,
              moves: Sequence[Callable] = ()) -> ChainResult:
    """One adaptive RWM chain.

    Warmup tunes the global scale by Robbins-Monro towards acceptance 0.3 and,
    at its midpoint, replaces the proposal covariance by a blend of the
    initial one and the empirical covariance of the warmup draws so far.
    After warmup the kernel is frozen, so the retained draws form a valid
    Markov chain.

    ``moves`` are extra one-dimensional random-walk moves ``m(x, c) ->
    (x_new, log_jacobian)`` with symmetric ``c ~ N(0, s^2)`` and invertible
    ``m(., c)`` whose inverse is ``m(., -c)``; each is applied after the
    main step and gets its own tuned step size.
    """
    x = np.array(x0, dtype=float)
    d = x.size
    cov0 = np.atleast_2d(np.asarray(cov, dtype=float))
    chol = _safe_cholesky(cov0)
    log_s = math.log(2.38 / math.sqrt(d))
    lp = log_target(x)
    if not math.isfinite(lp):
        raise NonConvergence("sampler start has zero target density")
    target = 0.3
    hist = np.empty((warmup, d))
    acc_window = 0
    move_log_s = [math.log(0.1)] * len(moves)
    move_acc = [0] * len(moves)

    def extra(x, lp):
        for j, m in enumerate(moves):
            c = math.exp(move_log_s[j]) * rng.standard_normal()
            prop, log_jac = m(x, c)
            lq = log_target(prop)
            if math.log(rng.uniform()) < lq - lp + log_jac:
                x, lp = prop, lq
                move_acc[j] += 1
        return x, lp

    for i in range(warmup):
        prop = x + math.exp(log_s) * (chol @ rng.standard_normal(d))
        lq = log_target(prop)
        if math.log(rng.uniform()) < lq - lp:
            x, lp = prop, lq
            acc_window += 1
        x, lp = extra(x, lp)
        hist[i] = x
        if (i + 1) % 50 == 0:
            gain = 2.0 / math.sqrt(1.0 + (i + 1) / 500.0)
            log_s += (acc_window / 50.0 - target) * gain
            acc_window = 0
            for j in range(len(moves)):
                move_log_s[j] += (move_acc[j] / 50.0 - 0.4) * gain
                move_acc[j] = 0
        if i + 1 == warmup // 2 and warmup // 4 >= 2 * d:
            emp = np.cov(hist[warmup // 4: i + 1].T).reshape(d, d)
            blend = 0.8 * emp + 0.2 * cov0
            chol = _safe_cholesky(blend)
            log_s = math.log(2.38 / math.sqrt(d))
    out = np.empty((n_draws, d))
    accepted = 0
    total = n_draws * thin
    scale = math.exp(log_s)
    for i in range(total):
        prop = x + scale * (chol @ rng.standard_normal(d))
        lq = log_target(prop)
        if math.log(rng.uniform()) < lq - lp:
            x, lp = prop, lq
            accepted += 1
        x, lp = extra(x, lp)
        if (i + 1) % thin == 0:
            out[(i + 1) // thin - 1] = x
    return ChainResult(out, accepted / total, scale)


def _safe_cholesky(cov: np.ndarray) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    for jitter in (0.0, 1e-10, 1e-8, 1e-6, 1e-4):
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]) * max(1.0, np.max(np.diag(cov))))
        except np.linalg.LinAlgError:
            continue
    return np.diag(np.sqrt(np.clip(np.diag(cov), 1e-8, None)))


def chain_rngs(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Independent child generators derived deterministically from ``rng``."""
    seeds = rng.integers(0, 2 ** 63, size=n)
    return [np.random.default_rng(int(s)) for s in seeds]


# --------------------------------------------------------------------------
# Posterior draws and diagnostics
# --------------------------------------------------------------------------

@dataclass
class PosteriorDraws:
    family: str
    param_names: tuple
    params: np.ndarray          # S x n_params, natural scale (fixed params included)
    latent: np.ndarray          # S x T
    chain: np.ndarray           # S
    loglik: np.ndarray          # S x T, pointwise Poisson log-density given y
    acceptance: list = field(default_factory=list)
    temperature: float = 1.0

    def __post_init__(self) -> None:
        if self.loglik.ndim != 2 or self.loglik.shape[0] != self.params.shape[0]:
            raise DomainError("loglik must be an S x T matrix aligned with the draws")
        if not np.all(np.isfinite(self.loglik)):
            raise DomainError("pointwise log-likelihood contains non-finite entries")

    @property
    def n_draws(self) -> int:
        return int(self.params.shape[0])

    @property
    def n_chains(self) -> int:
        return int(np.unique(self.chain).size)

    def by_chain(self, values: np.ndarray) -> np.ndarray:
        ids = np.unique(self.chain)
        return np.stack([values[self.chain == c] for c in ids])

    def parameter(self, name: str) -> np.ndarray:
        return self.params[:, self.param_names.index(name)]

    def summary(self) -> dict:
        out = {}
        for j, n in enumerate(self.param_names):
            v = self.params[:, j]
            out[n] = {"mean": float(v.mean()), "sd": float(v.std(ddof=1)) if v.size > 1 else 0.0}
        return out


def rhat(draws, parameter=None) -> float:
    """Split-chain Gelman-Rubin R-hat.

    ``draws`` is either a :class:`PosteriorDraws` (with ``parameter`` naming a
    parameter) or an array of shape (chains, draws).
    """
    if isinstance(draws, PosteriorDraws):
        chains = draws.by_chain(draws.parameter(parameter))
    else:
        chains = np.asarray(draws, dtype=float)
    if chains.ndim != 2 or chains.shape[0] < 2 or chains.shape[1] < 10:
        raise InsufficientDraws(f"R-hat needs >= 2 chains of >= 10 draws, got shape {chains.shape}")
    n = chains.shape[1] // 2
    split = np.concatenate([chains[:, :n], chains[:, chains.shape[1] - n:]])
    means = split.mean(axis=1)
    W = float(np.mean(split.var(axis=1, ddof=1)))
    B = float(n * means.var(ddof=1))
    if W <= 0.0:
        return 1.0 if B <= 0.0 else math.inf
    var_plus = (n - 1) / n * W + B / n
    return float(math.sqrt(var_plus / W))


def lppd(loglik) -> float:
    ll = np.asarray(loglik, dtype=float)
    return float(np.sum(special.logsumexp(ll, axis=0) - math.log(ll.shape[0])))


def waic(draws) -> float:
    """``-2 (lppd - p_waic)`` from a PosteriorDraws or an S x T log-likelihood matrix."""
    ll = draws.loglik if isinstance(draws, PosteriorDraws) else np.asarray(draws, dtype=float)
    if ll.ndim != 2 or ll.shape[0] < 1:
        raise DomainError("need an S x T log-likelihood matrix")
    p_waic = float(np.sum(ll.var(axis=0, ddof=1))) if ll.shape[0] > 1 else 0.0
    return -2.0 * (lppd(ll) - p_waic)


# --------------------------------------------------------------------------
# Posterior sampling
# --------------------------------------------------------------------------

def ridge_moves(model: LatentPoissonModel) -> list[Callable]:
    """Moves along directions that leave every intensity lambda0 e^{alpha y_t} unchanged.

    shift: log lambda0 += c, y -= c / alpha (a shear, unit Jacobian);
    scale: log alpha += c, y *= e^{-c} (Jacobian e^{-T c}).
    The likelihood is constant along both, so only prior terms decide.
    """
    free = model.free
    nf, T = model.n_free, model.T
    moves = []
    if "lambda0" in free and ("alpha" in free or model.fixed.get("alpha", 0.0) > 0):
        i_l = free.index("lambda0")

        def shift(x, c):
            alpha = math.exp(x[free.index("alpha")]) if "alpha" in free else model.fixed["alpha"]
            out = x.copy()
            out[i_l] += c
            out[nf:] -= c / alpha
            return out, 0.0
        moves.append(shift)
    if "alpha" in free:
        i_a = free.index("alpha")

        def scale(x, c):
            out = x.copy()
            out[i_a] += c
            out[nf:] *= math.exp(-c)
            return out, -T * c
        moves.append(scale)
    kname = KERNEL_PARAM.get(model.family)
    if kname in free:
        i_k = free.index(kname)

        def whitened(x, c):
            # change the kernel parameter with the innovations L^{-1} y held fixed
            out = x.copy()
            out[i_k] += c
            p_old, p_new = model.params_from_z(x)[kname], model.params_from_z(out)[kname]
            if not (0.0 < p_new < 1.0 if kname == "theta" else 0.0 < p_new < math.inf):
                return x, -math.inf
            w, ld_old = _whiten(model, p_old, x[nf:])
            out[nf:], ld_new = _colour(model, p_new, w)
            return out, 0.5 * (ld_new - ld_old)
        moves.append(whitened)
    return moves


def _whiten(model: LatentPoissonModel, kp: float, y: np.ndarray):
    """Innovations ``L^{-1} y`` and ``log det Sigma`` for the model's kernel."""
    if model.family == EXPONENTIAL:
        s = math.sqrt(1.0 - kp * kp)
        w = np.empty_like(y)
        w[0] = y[0]
        w[1:] = (y[1:] - kp * y[:-1]) / s
        return w, 2.0 * (y.size - 1) * math.log(s)
    L, logdet = model._power_chol(kp)
    return scipy.linalg.solve_triangular(L, y, lower=True), logdet


def _colour(model: LatentPoissonModel, kp: float, w: np.ndarray):
    if model.family == EXPONENTIAL:
        s = math.sqrt(1.0 - kp * kp)
        y = scipy.signal.lfilter([1.0], [1.0, -kp], np.concatenate([[w[0]], s * w[1:]]))
        return y, 2.0 * (w.size - 1) * math.log(s)
    L, logdet = model._power_chol(kp)
    return L @ w, logdet


def posterior_sample(series, family: str, priors: PriorSpec | None = None, chains: int = 4,
                     draws: int = 1000, rng: np.random.Generator | None = None, warmup: int = 4000,
                     thin: int = 20, temperature: float = 1.0, fixed: dict | None = None,
                     fit: FitResult | None = None, check: bool = True) -> PosteriorDraws:
    """Adaptive RWM draws from the (optionally tempered) joint posterior.

    Chains start at the MAP plus a draw from the MAP covariance; each gets an
    independent child generator of ``rng``.  With ``check=True`` a split
    R-hat above 1.1 on any free parameter raises :class:`NonConvergence`
    (the draws are attached to its diagnostics).
    """
    if chains < 1 or draws < 1:
        raise DomainError("chains and draws must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    counts = series.counts if isinstance(series, PortfolioSeries) else np.asarray(series, dtype=float)
    model = LatentPoissonModel(counts, family, priors, fixed=fixed, temperature=temperature)
    if fit is None:
        init = prior_init(model.priors, model.family) if model.priors.priors else None
        fit = map_estimate(counts, family, model.priors, init=init, rng=rng, fixed=fixed,
                           temperature=temperature)
    params = {**model.fixed, **fit.estimates}
    z_map = model.z_from_params(params, fit.latent)
    cov = fit.covariance_z
    if cov is None or cov.shape != (model.dim, model.dim) or not np.all(np.isfinite(cov)):
        cov = np.eye(model.dim) * 0.01

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        results = []
        start_chol = _safe_cholesky(cov)
        for crng in chain_rngs(rng, chains):
            x0 = z_map + 0.5 * (start_chol @ crng.standard_normal(model.dim))
            if not math.isfinite(model.log_target(x0)):
                x0 = z_map.copy()
            results.append(rwm_chain(model.log_target, x0, cov, draws, crng, warmup, thin,
                                     ridge_moves(model)))

    nf = model.n_free
    z = np.concatenate([r.draws for r in results])
    chain_id = np.repeat(np.arange(chains), draws)
    P = np.empty((z.shape[0], len(model.param_names)))
    ll = np.empty((z.shape[0], model.T))
    for s in range(z.shape[0]):
        p = model.params_from_z(z[s])
        P[s] = [p[n] for n in model.param_names]
        ll[s] = model.pointwise_loglik(p, z[s, nf:])
    out = PosteriorDraws(model.family, model.param_names, P, z[:, nf:].copy(), chain_id, ll,
                         [r.acceptance for r in results], temperature)
    if check and chains >= 2 and draws >= 10:
        rh = {n: rhat(out, n) for n in model.free}
        bad = {n: v for n, v in rh.items() if not v <= RHAT_LIMIT}
        if bad:
            raise NonConvergence(f"R-hat above {RHAT_LIMIT}: {bad}",
                                 {"rhat": rh, "acceptance": out.acceptance, "draws": out})
    return out


def wbic(series, family: str, priors: PriorSpec | None = None, rng: np.random.Generator | None = None,
         temperature: float | None = None, **sampler) -> float:
    """``-2 E_beta[sum_t ll_t]`` with the likelihood tempered by ``beta = 1 / log T``.

    Deviance scale (same units as WAIC); lower is better.  ``temperature``
    overrides beta (1 gives the posterior mean deviance).
    """
    counts = series.counts if isinstance(series, PortfolioSeries) else np.asarray(series, dtype=float)
    T = counts.size
    if T < 2:
        raise DomainError("WBIC needs T >= 2")
    beta = 1.0 / math.log(T) if temperature is None else float(temperature)
    d = posterior_sample(counts, family, priors, rng=rng, temperature=beta, **sampler)
    return -2.0 * float(np.mean(np.sum(d.loglik, axis=1)))


# --------------------------------------------------------------------------
# Leave-future-out
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LfoTerm:
    t0: int
    log_pred: float
    mean: float
    var: float
    converged: bool


def lfo_term(counts, family: str, priors: PriorSpec | None, t0: int, rng: np.random.Generator,
             fixed: dict | None = None, n_starts: int | None = None) -> LfoTerm:
    """Fit on the first ``t0`` observations and score observation ``t0 + 1``."""
    counts = np.asarray(counts, dtype=float)
    if not 1 <= t0 < counts.size:
        raise DomainError(f"t0 must lie in [1, T-1], got {t0}")
    priors = priors or PriorSpec.flat()
    init = prior_init(priors, canonical_family(family)) or None
    kw = {} if n_starts is None else {"n_starts": n_starts}
    try:
        fit = map_estimate(counts[:t0], family, priors, init=init, rng=rng, fixed=fixed, **kw)
    except NonConvergence as exc:
        exc.diagnostics["t0"] = t0
        raise
    if not math.isfinite(fit.objective):
        raise NonConvergence(f"refit at t0={t0} has a non-finite objective", {"t0": t0})
    mean, var = conditional_forecast(fit.kernel(), fit.latent, horizon=1)
    est = fit.estimates
    lp = float(poisson_lognormal_logpdf(counts[t0], est["lambda0"], est["alpha"], mean, var))
    return LfoTerm(t0, lp, mean, var, fit.converged)


def lfo_terms(series, family: str, priors: PriorSpec | None, t0_range: Sequence[int],
              rng: np.random.Generator | None = None, fixed: dict | None = None,
              n_starts: int | None = None) -> list[LfoTerm]:
    counts = series.counts if isinstance(series, PortfolioSeries) else np.asarray(series, dtype=float)
    t0s = [int(t) for t in t0_range]
    if not t0s:
        raise DomainError("t0_range is empty")
    if max(t0s) >= counts.size:
        raise DomainError(f"max(t0_range)={max(t0s)} must be < T={counts.size}")
    rng = rng if rng is not None else np.random.default_rng(0)
    # one seed for the whole sweep; each term's generator depends only on (seed, t0)
    base = int(rng.integers(0, 2 ** 63))
    return [lfo_term(counts, family, priors, t0, np.random.default_rng([base, t0]), fixed, n_starts)
            for t0 in t0s]


def lfo(series, family: str, priors: PriorSpec | None, t0_range: Sequence[int],
        rng: np.random.Generator | None = None, fixed: dict | None = None,
        n_starts: int | None = None) -> float:
    """``-sum_t0 log p(k*_{t0+1} | k*_1..t0)``; lower is better."""
    return -float(sum(t.log_pred for t in lfo_terms(series, family, priors, t0_range, rng, fixed, n_starts)))


def select_sc(series, family: str, sc_grid: Sequence[float] = SC_GRID, t0_range: Sequence[int] | None = None,
              rng: np.random.Generator | None = None, prelim: PreliminaryEstimates | None = None,
              n_starts: int | None = None) -> tuple[float, float]:
    """The sc with the lowest LFO; failed fits count as +inf and are skipped, ties go to the smaller sc."""
    if not len(sc_grid):
        raise DomainError("sc_grid is empty")
    if not isinstance(series, PortfolioSeries):
        series = PortfolioSeries.from_counts(series)
    rng = rng if rng is not None else np.random.default_rng(0)
    prelim = prelim or preliminary_estimates(series)
    t0_range = list(t0_range) if t0_range is not None else default_t0_range(len(series))
    base = int(rng.integers(0, 2 ** 63))
    scores = []
    for sc in sc_grid:
        try:
            score = lfo(series, family, build_priors(prelim, family, sc), t0_range,
                        np.random.default_rng(base), n_starts=n_starts)
        except (NonConvergence, np.linalg.LinAlgError, FloatingPointError):
            score = math.inf
        scores.append((float(sc), score if math.isfinite(score) else math.inf))
    return _argmin_sc(scores)


def _argmin_sc(scores: list[tuple[float, float]]) -> tuple[float, float]:
    finite = [(s, v) for s, v in scores if math.isfinite(v)]
    if not finite:
        raise NonConvergence("LFO failed for every sc in the grid", {"scores": scores})
    return min(finite, key=lambda sv: (sv[1], sv[0]))


# --------------------------------------------------------------------------
# Model comparison
# --------------------------------------------------------------------------

CRITERIA = ("lfo", "waic", "wbic")


@dataclass
class ComparisonReport:
    families: tuple
    scores: dict                 # family -> {"lfo", "waic", "wbic", "sc"}
    rhat: dict = field(default_factory=dict)
    t0_range: tuple = ()
    dataset: str = ""

    def __post_init__(self) -> None:
        for fam, s in self.scores.items():
            for c in CRITERIA:
                if not math.isfinite(s[c]):
                    raise DomainError(f"{c} for {fam} is not finite")

    @property
    def winners(self) -> dict:
        """Argmin per criterion; ties go to the family listed first."""
        return {c: min(self.families, key=lambda f: (self.scores[f][c], self.families.index(f)))
                for c in CRITERIA}

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "dataset": self.dataset,
            "t0_range": list(self.t0_range),
            "families": list(self.families),
            "scores": {f: {k: float(v) for k, v in self.scores[f].items()} for f in self.families},
            "winners": self.winners,
            "rhat": self.rhat,
            "conventions": {
                "waic": "-2 * (lppd - p_waic), pointwise density conditional on each draw's latent y_t",
                "wbic": "-2 * mean over tempered draws of sum_t ll_t, temperature 1/log(T)",
                "lfo": "-sum over t0 of log p(k*_{t0+1} | MAP fit on 1..t0), Gauss-Hermite predictive",
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        """One row per dataset with LFO/WAIC/WBIC columns per model."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header, row = ["Dataset"], [self.dataset]
        for f in self.families:
            lab = FAMILY_LABEL.get(f, f)
            for c in CRITERIA:
                header.append(f"{c.upper()} ({lab})")
                row.append(f"{self.scores[f][c]:.2f}")
        w.writerow(header)
        w.writerow(row)
        return buf.getvalue()


def compare_models(series, t0_range: Sequence[int] | None = None, rng: np.random.Generator | None = None,
                   families: Sequence[str] = (EXPONENTIAL, POWER), sc_grid: Sequence[float] = SC_GRID,
                   chains: int = 4, draws: int = 1000, warmup: int = 4000, thin: int = 20,
                   dataset: str = "", check: bool = False) -> ComparisonReport:
    """select_sc, then LFO, WAIC and WBIC for each family at its selected sc."""
    if not isinstance(series, PortfolioSeries):
        series = PortfolioSeries.from_counts(series)
    rng = rng if rng is not None else np.random.default_rng(0)
    t0_range = list(t0_range) if t0_range is not None else default_t0_range(len(series))
    prelim = preliminary_estimates(series)
    fams = tuple(canonical_family(f) for f in families)
    seeds = rng.integers(0, 2 ** 63, size=(len(fams), 3))
    scores, rhats = {}, {}
    for fam, (s1, s2, s3) in zip(fams, seeds):
        sc, lfo_score = select_sc(series, fam, sc_grid, t0_range, np.random.default_rng(int(s1)), prelim)
        priors = build_priors(prelim, fam, sc)
        post = posterior_sample(series, fam, priors, chains=chains, draws=draws,
                                rng=np.random.default_rng(int(s2)), warmup=warmup, thin=thin, check=check)
        rhats[fam] = {n: rhat(post, n) for n in post.param_names} if chains >= 2 else {}
        w_bic = wbic(series, fam, priors, rng=np.random.default_rng(int(s3)), chains=chains, draws=draws,
                     warmup=warmup, thin=thin, check=check)
        scores[fam] = {"lfo": lfo_score, "waic": waic(post), "wbic": w_bic, "sc": sc}
    return ComparisonReport(fams, scores, rhats, tuple(t0_range), dataset)
