"""Openness pipeline: constants for a base family, perturbations, certificates.

:func:`build_bundle` measures the base family and turns its constants into
cone apertures, chart radii and C1 radii. :func:`certify_perturbed` then
checks a nearby family against those cones. :func:`openness_experiment`
repeats this for seeded random perturbations.
"""
from dataclasses import dataclass, field, replace
import math
import multiprocessing as mp

import numpy as np

from . import _kernels as K
from .adapted_metric import (
    DEFAULT_TAIL_TOL,
    AdaptedMetric,
    default_epsilon,
    delta_table,
    verify_strict,
)
from .cones import (
    DEFAULT_CHART_SAMPLES,
    DEFAULT_SAFETY,
    STRICT_TOL,
    ConstantsBundle,
    SplittingFrames,
    admissible_beta,
    alpha_range,
    cone_report,
    epsilon_sequence,
    eta_bound,
    family_frame_derivatives,
    frame_derivatives,
    lambda_prime,
    perturbed_cone_check,
    sigma_bound,
    sigma_bound_contraction,
)
from .errors import AnosovError, GenerationError, ParameterError
from .family import DEFAULT_C1_GRID, NeighborhoodSpec, c1_distance, in_neighborhood
from .report import SCHEMA_VERSION, csv_text, dumps
from .splitting import (
    DEFAULT_FIT_HORIZON,
    DEFAULT_N_MAX,
    DEFAULT_TOL,
    angle_property,
    dg_invariance_check,
    estimate_splitting,
    fit_constants,
)

CERTIFIED, FAILED, INCONCLUSIVE = "CERTIFIED", "FAILED", "INCONCLUSIVE"
DEFAULT_CERT_GRID = 12
INVARIANCE_TOL = 1e-7
COMPLEMENT_TOL = 1e-8
NOTES = (
    "flat charts: each component is covered by one global chart",
    "checks are sampled at the stated resolutions; this is a numerical certificate",
    "C1 distance: grid maximum of displacement and Jacobian deviation",
)


def convert_constants(alpha, lam, eps, c):
    """``c' = 2 (1+alpha) ((lam+eps)/eps) c / (1 - alpha ((lam+eps)/eps) c)``."""
    r = (lam + eps) / eps * c
    denom = 1.0 - alpha * r
    if not denom > 0.0:
        raise ParameterError(
            f"alpha = {alpha} too large: need alpha < eps/(c (lam+eps)) = {1.0 / r!r}")
    return 2.0 * (1.0 + alpha) * r / denom


@dataclass
class Resolutions:
    grid: int = DEFAULT_CERT_GRID
    boundary_samples: object = None
    chart_samples: int = DEFAULT_CHART_SAMPLES
    c1_grid: int = DEFAULT_C1_GRID
    fit_horizon: int = DEFAULT_FIT_HORIZON
    n_max: int = DEFAULT_N_MAX
    tol: float = DEFAULT_TOL

    def __post_init__(self):
        for name in ("grid", "chart_samples", "c1_grid", "fit_horizon"):
            if getattr(self, name) < 2:
                raise ParameterError(f"resolution {name} must be at least 2")
        if self.boundary_samples is not None and self.boundary_samples < 2:
            raise ParameterError("resolution boundary_samples must be at least 2")

    def to_dict(self):
        return dict(self.__dict__)


class PipelineFailure(AnosovError):
    def __init__(self, verdict, stage, reason, details=None):
        super().__init__(f"{verdict} at {stage}: {reason}")
        self.verdict = verdict
        self.stage = stage
        self.reason = reason
        self.details = details or {}


def _angle_floor(alpha):
    # two alpha-cones around orthogonal axes are separated by at least this angle
    return 1.0 - 2.0 * alpha / (1.0 + alpha * alpha)


def build_bundle(F, alpha=None, res=None, safety=DEFAULT_SAFETY, epsilon=None, dims=None,
                 strict_tol=STRICT_TOL, tail_tol=DEFAULT_TAIL_TOL):
    """Constants, working frames and C1 radii for the base family ``F``.

    Raises :class:`PipelineFailure` when the base family cannot be certified.
    """
    res = Resolutions() if res is None else res
    split = estimate_splitting(F, res.grid, dims, res.n_max, res.tol)
    fit = fit_constants(F, split, res.fit_horizon)
    if fit.lambda_hat >= 1.0:
        raise PipelineFailure(FAILED, "fit", "not hyperbolic", fit.to_dict())
    if not split.converged:
        raise PipelineFailure(INCONCLUSIVE, "splitting", "splitting did not converge",
                              split.diagnostics())
    angles = angle_property(F, split)
    X = split.points
    strict = fit.c_hat <= 1.0 + strict_tol and angles.mu_hat >= 1.0 - strict_tol
    info = {}
    if strict:
        frames = SplittingFrames(split)
        lam = fit.lambda_hat
        hi = alpha_range(lam)[1]
        alpha = 0.5 * hi if alpha is None else float(alpha)
        c_prime = 1.0
        conversion = None
    else:
        eps = default_epsilon(fit.lambda_hat) if epsilon is None else float(epsilon)
        am = AdaptedMetric(F, split, fit.lambda_hat, eps, fit.c_hat, tail_tol)
        frames = am
        lam = am.rate
        delta, _, c_used = delta_table(F, am, angles)
        cap = eps / (c_used * (fit.lambda_hat + eps))
        hi = min(alpha_range(lam)[1], cap)
        alpha = 0.5 * hi if alpha is None else float(alpha)
        c_prime = convert_constants(alpha, fit.lambda_hat, eps, c_used)
        strict_report = verify_strict(F, am, X)
        if not strict_report.passed:
            raise PipelineFailure(FAILED, "adapted_metric", "adapted metric is not strict",
                                  strict_report.to_dict())
        conversion = delta
        info = {"epsilon": eps, "truncation": am.N, "tail_bound": am.tail,
                "c_used": c_used, "delta": {str(i): v for i, v in delta.items()},
                "strict_check": strict_report.to_dict()}
    if not 0.0 < alpha < hi:
        raise ParameterError(f"alpha = {alpha} outside admissible range (0, {hi})")
    base_cones = cone_report(
        family_frame_derivatives(F, X, frames),
        X, split.k, alpha, 1.0 / lambda_prime(lam, alpha), res.boundary_samples)
    if not base_cones.passed:
        raise PipelineFailure(FAILED, "base_cones", "base family violates the cone lemma",
                              base_cones.summary())
    betas, sigmas = [], []
    for i in F.components:
        beta, est, bound = admissible_beta(F, i, alpha, lam, frames, X, res.chart_samples)
        betas.append(beta)
        sigmas.append(est.sigma)
    nb, subs = epsilon_sequence(betas, sigmas, safety, bound, F.extension)
    eff_sigma = np.where(np.asarray(sigmas) == 0.0, bound, sigmas)
    eta = eta_bound(alpha, lam, float(np.max(np.maximum(eff_sigma, nb.radii))))
    if conversion is None:
        radii = nb.radii.copy()
    else:
        # |v| <= 2 |v|_1 and |v|_1 <= Delta_i |v| turn working radii into original ones
        radii = np.array([nb.radius(i) / (2.0 * conversion[i]) for i in F.components])
    return ConstantsBundle(
        alpha=alpha, lam=lam, sigma=np.asarray(sigmas), beta=np.asarray(betas),
        epsilon=nb.radii, radii=radii, eta=eta, lambda_prime=lambda_prime(lam, alpha),
        sigma_bound=bound, sigma_bound_stated=sigma_bound(lam, alpha),
        sigma_bound_contraction=sigma_bound_contraction(lam, alpha), substituted=subs,
        safety=safety, window=F.window, extension=F.extension, adapted=not strict,
        c_prime=c_prime, fit=fit, frames=frames, split=split,
        adapted_info=dict(info, base_cones=base_cones.summary(),
                          base_mu_hat=angles.mu_hat, base_fit=fit.to_dict(),
                          splitting=split.diagnostics()))


# --- perturbations ---------------------------------------------------------------

@dataclass
class PerturbationModel:
    """Random trigonometric bumps sized to a fraction of each radius."""

    seed: int = 0
    fraction: tuple = (0.3, 0.8)
    accept: tuple = (0.2, 0.9)
    terms_per_axis: int = 2
    max_freq: int = 2
    c1_grid: int = DEFAULT_C1_GRID
    inflate: float = 1.0
    bisection_steps: int = 40

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def _random_terms(rng, d, model):
    terms = []
    for axis in range(d):
        for _ in range(model.terms_per_axis):
            freq = np.zeros(d, dtype=int)
            while not freq.any():
                freq = rng.integers(-model.max_freq, model.max_freq + 1, size=d)
            terms.append({"axis": axis, "freq": freq.tolist(),
                          "amplitude": float(rng.standard_normal()),
                          "phase": float(rng.uniform(0.0, 2.0 * np.pi))})
    return terms


def _scaled(terms, s):
    return [dict(t, amplitude=t["amplitude"] * s) for t in terms]


def trial_seed(seed, trial):
    """Per-trial seed derived from the experiment seed and the trial index."""
    return int(np.random.SeedSequence([int(seed), int(trial)]).generate_state(1)[0])


def generate_perturbation(F, radii, model=None, trial=0):
    """Perturbed family ``G`` with ``d_C1(f_i, g_i)`` in ``accept * radius_i``.

    Returns ``(G, distances)``. Targets are drawn uniformly from
    ``fraction * radius_i * inflate``; the amplitude is solved by a linear
    estimate refined with bisection and verified on the C1 grid.
    """
    model = PerturbationModel() if model is None else model
    nb = radii if isinstance(radii, NeighborhoodSpec) else NeighborhoodSpec(
        np.asarray(radii, dtype=float), F.window, F.extension)
    rng = np.random.default_rng(trial_seed(model.seed, trial))
    maps, dists = [], []
    lo_acc, hi_acc = model.accept
    for i in F.components:
        f = F.map_at(i)
        eps = nb.radius(i) * model.inflate
        target = rng.uniform(*model.fraction) * eps
        terms = _random_terms(rng, F.dim, model)
        if target == 0.0:
            maps.append(f)
            dists.append(0.0)
            continue

        def dist(s):
            return c1_distance(f, f.with_terms(_scaled(terms, s)), F.metric,
                               model.c1_grid, index=i)

        unit = dist(1e-6) / 1e-6
        if not unit > 0.0:
            raise GenerationError(f"bump at index {i} has zero C1 size")
        s = target / unit
        d_s = dist(s)
        if not lo_acc * eps <= d_s <= hi_acc * eps:
            a, b = 0.0, 2.0 * s
            while dist(b) < target:
                b *= 2.0
            for _ in range(model.bisection_steps):
                s = 0.5 * (a + b)
                d_s = dist(s)
                if d_s < target:
                    a = s
                else:
                    b = s
                if abs(d_s - target) <= 0.05 * eps:
                    break
        if not lo_acc * eps <= d_s <= hi_acc * eps:
            raise GenerationError(
                f"could not fit bump inside radius at index {i}: {d_s!r} vs {eps!r}")
        maps.append(f.with_terms(_scaled(terms, s)))
        dists.append(d_s)
    G = F.replace_maps(maps, name=f"{F.name or 'family'}+trial{trial}")
    return G, np.asarray(dists)


# --- certificates ----------------------------------------------------------------

@dataclass
class Certificate:
    verdict: str
    stage: str = ""
    reason: str = ""
    family: dict = field(default_factory=dict)
    base: dict = field(default_factory=dict)
    resolutions: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)
    margins: dict = field(default_factory=dict)
    converted: dict = field(default_factory=dict)
    splitting: dict = field(default_factory=dict)
    fit: dict = field(default_factory=dict)
    angles: dict = field(default_factory=dict)
    worst_point: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    @property
    def certified(self):
        return self.verdict == CERTIFIED

    @property
    def min_margin(self):
        vals = [v for k, v in self.margins.items() if k.startswith("margin") or k == "nested"]
        return min(vals) if vals else float("nan")

    def to_dict(self):
        out = dict(self.__dict__)
        out["schema_version"] = SCHEMA_VERSION
        out["notes"] = list(NOTES)
        return out

    def to_json(self):
        return dumps(self.to_dict())


def _family_block(G):
    return {"name": G.name, "digest": G.digest(), "window": G.window,
            "extension": G.extension, "dim": G.dim}


def _nested_margin(B, E, alpha, flavor, k):
    """``alpha - |C_sub C_dom^{-1}|`` for the subspace ``E`` in frame coordinates."""
    C = np.linalg.solve(B, E)
    if flavor == "u":
        dom, sub = C[:, k:, :], C[:, :k, :]
    else:
        dom, sub = C[:, :k, :], C[:, k:, :]
    ok = np.abs(np.linalg.det(dom)) > 0.0
    out = np.full(len(C), -np.inf)
    if np.any(ok):
        out[ok] = alpha - K.op_norm(np.matmul(sub[ok], np.linalg.inv(dom[ok])))
    return out


def _restricted_rates(T, Ws, Wu):
    """Largest one-step ratio on ``Ws`` and smallest on ``Wu`` (working norms)."""
    Qs, _ = np.linalg.qr(Ws)
    Qu, _ = np.linalg.qr(Wu)
    s = np.linalg.svd(np.matmul(T, Qs), compute_uv=False)[:, 0]
    u = np.linalg.svd(np.matmul(T, Qu), compute_uv=False)[:, -1]
    return s, u


def certify_perturbed(G, F, bundle, res=None, enforce_neighborhood=True):
    """Certify ``G`` using the cones, frames and constants of the base ``bundle``."""
    res = Resolutions() if res is None else res
    split_f = bundle.split
    X = split_f.points
    k = split_f.k
    frames = bundle.frames
    cert = Certificate(
        verdict=CERTIFIED, family=_family_block(G), base=_family_block(F),
        resolutions=res.to_dict(), constants=bundle.to_dict(),
        converted={"eta": bundle.eta, "c_prime": bundle.c_prime})

    def fail(stage, reason, verdict=FAILED, worst=None, **details):
        cert.verdict, cert.stage, cert.reason = verdict, stage, reason
        if worst is not None:
            cert.worst_point = worst
        cert.details.update(details)
        return cert

    inside, slack = in_neighborhood(F, G, bundle.neighborhood(), res.c1_grid)
    cert.margins["neighborhood_slack"] = min(slack.values())
    cert.details["in_neighborhood"] = inside
    if not inside and enforce_neighborhood:
        j = min(slack, key=slack.get)
        return fail("neighborhood", "perturbation outside the certified radii",
                    worst={"component": j})

    T_all = family_frame_derivatives(G, X, frames)
    cones = perturbed_cone_check(G, frames, bundle, X, res.boundary_samples, T=T_all)
    cert.margins.update(margin_unstable=cones.margin_unstable,
                        margin_stable=cones.margin_stable,
                        expansion_unstable=cones.expansion_unstable,
                        expansion_stable=cones.expansion_stable,
                        required_expansion=cones.required_expansion)
    worst = {"component": cones.worst_component, "point": list(cones.worst_point)}
    if not cones.passed:
        return fail("cones", "cone invariance or expansion violated", worst=worst)

    split_g = estimate_splitting(G, res.grid, split_f.dims, res.n_max, res.tol)
    cert.splitting = split_g.diagnostics()
    if not split_g.converged:
        return fail("splitting", "perturbed splitting did not converge", INCONCLUSIVE)

    nested = np.inf
    sep = np.inf
    rate_s, rate_u = 0.0, np.inf
    mu_w = np.inf
    for c, i in enumerate(split_g.components):
        B = frames.frames(i, X)
        Es, Eu = split_g.stable[c], split_g.unstable[c]
        nested = min(nested, float(_nested_margin(B, Eu, bundle.alpha, "u", k).min()),
                     float(_nested_margin(B, Es, bundle.alpha, "s", k).min()))
        Ws, Wu = np.linalg.solve(B, Es), np.linalg.solve(B, Eu)
        cos_w = K.op_norm(np.matmul(np.swapaxes(np.linalg.qr(Ws)[0], 1, 2),
                                    np.linalg.qr(Wu)[0]))
        mu_w = min(mu_w, float(1.0 - cos_w.max()))
        cos_g = K.op_norm(np.matmul(np.swapaxes(np.linalg.qr(Es)[0], 1, 2),
                                    np.linalg.qr(Eu)[0]))
        sep = min(sep, float(np.arccos(np.clip(cos_g.max(), -1.0, 1.0))))
        T = T_all[i]
        s, u = _restricted_rates(T, Ws, Wu)
        rate_s, rate_u = max(rate_s, float(s.max())), min(rate_u, float(u.min()))
    cert.margins["nested"] = nested
    cert.angles = {"min_separation_rad": sep, "mu_working": mu_w,
                   "mu_floor": _angle_floor(bundle.alpha)}
    if not nested >= 0.0:
        return fail("nested_cones", "perturbed bundles leave the base cones")
    if not sep > COMPLEMENT_TOL:
        return fail("complementarity", "perturbed bundles are not complementary")
    inv = dg_invariance_check(G, split_g)
    cert.margins["invariance_defect"] = inv.max_defect
    if not inv.max_defect <= INVARIANCE_TOL:
        return fail("invariance", "perturbed splitting is not invariant",
                    worst={"component": inv.worst_component, "point": list(inv.worst_point)})

    lam_w = max(rate_s, 1.0 / rate_u)
    fit_g = fit_constants(G, split_g, res.fit_horizon)
    angles_g = angle_property(G, split_g)
    cert.angles["mu_hat"] = angles_g.mu_hat
    cert.angles["spa_at_resolution"] = angles_g.spa
    cert.fit = dict(fit_g.to_dict(), lambda_working=lam_w)
    if not lam_w <= bundle.eta:
        return fail("rate", "one-step rate exceeds eta")
    powers = bundle.eta ** np.arange(len(fit_g.profile))
    spot = float(np.max(fit_g.profile / powers))
    cert.converted["c_prime_observed"] = spot
    if not spot <= bundle.c_prime * (1.0 + 1e-9):
        return fail("conversion", "original-metric estimate exceeds c' eta^n")
    if not mu_w >= _angle_floor(bundle.alpha) - 1e-12:
        return fail("angles", "working-metric angle below the cone floor")
    if not (bundle.eta < 1.0 and bundle.lambda_prime < 1.0):
        return fail("constants", "rate constants not below 1")
    return cert


def certify_family(F, alpha=None, res=None, **kw):
    """Build the bundle for ``F`` and certify ``F`` against it."""
    res = Resolutions() if res is None else res
    try:
        bundle = build_bundle(F, alpha, res, **kw)
    except PipelineFailure as e:
        return Certificate(verdict=e.verdict, stage=e.stage, reason=e.reason,
                           family=_family_block(F), base=_family_block(F),
                           resolutions=res.to_dict(), details=e.details), None
    except AnosovError as e:
        return Certificate(verdict=FAILED, stage="constants", reason=str(e),
                           family=_family_block(F), base=_family_block(F),
                           resolutions=res.to_dict()), None
    return certify_perturbed(F, F, bundle, res), bundle


# --- experiments ------------------------------------------------------------------

EXPERIMENT_HEADER = ("trial", "seed", "verdict", "min_margin", "lambda_hat", "eta", "c_prime")


@dataclass
class ExperimentSummary:
    trials: int
    certified: int
    rows: list = field(default_factory=list, repr=False)
    regime: str = "within_theorem"
    min_margin: float = float("nan")
    eta: float = float("nan")
    c_prime: float = float("nan")
    lambda_range: tuple = (float("nan"), float("nan"))
    radii_min: float = float("nan")
    errors: list = field(default_factory=list)
    base_verdict: str = CERTIFIED

    @property
    def fraction(self):
        return self.certified / self.trials if self.trials else 1.0

    @property
    def all_certified(self):
        return self.base_verdict == CERTIFIED and self.certified == self.trials

    def csv(self):
        return csv_text(EXPERIMENT_HEADER, self.rows)

    def to_dict(self):
        return {
            "trials": self.trials, "certified": self.certified,
            "certified_fraction": self.fraction, "regime": self.regime,
            "min_margin": self.min_margin, "eta": self.eta, "c_prime": self.c_prime,
            "lambda_hat_range": list(self.lambda_range), "min_radius": self.radii_min,
            "errors": self.errors, "base_verdict": self.base_verdict,
        }


_SHARED = {}


def _trial(F, bundle, res, model, inflate, t):
    ts = trial_seed(model.seed, t)
    try:
        G, _ = generate_perturbation(F, bundle.neighborhood(), model, trial=t)
        cert = certify_perturbed(G, F, bundle, res, enforce_neighborhood=inflate == 1.0)
    except AnosovError as e:
        row = (t, ts, "ERROR", None, None, bundle.eta, bundle.c_prime)
        return row, None, {"trial": t, "error": f"{type(e).__name__}: {e}"}
    lam = cert.fit.get("lambda_hat", float("nan"))
    return (t, ts, cert.verdict, cert.min_margin, lam, bundle.eta, bundle.c_prime), cert, None


def _pool_trial(t):
    return _trial(*_SHARED["args"], t)


def openness_experiment(F, trials, seed=0, bundle=None, res=None, model=None, alpha=None,
                        inflate=1.0, certificates=None, workers=1, uniform=False):
    """Certify ``trials`` seeded perturbations of ``F``; per-trial failures are recorded.

    ``inflate > 1`` draws perturbations beyond the certified radii with the
    neighbourhood precondition disabled, a diagnostic outside the theorem.
    ``workers > 1`` runs trials in forked processes; rows are reduced in trial
    order so the summary does not depend on the worker count. ``uniform``
    replaces every radius by the smallest one.
    """
    res = Resolutions() if res is None else res
    summary = ExperimentSummary(trials=int(trials), certified=0)
    if inflate != 1.0:
        summary.regime = "out_of_theorem"
    if bundle is None:
        try:
            bundle = build_bundle(F, alpha, res)
        except (PipelineFailure, AnosovError) as e:
            summary.base_verdict = getattr(e, "verdict", FAILED)
            summary.errors.append({"trial": None, "error": str(e)})
            return summary, None
    summary.eta, summary.c_prime = bundle.eta, bundle.c_prime
    summary.radii_min = float(np.min(bundle.radii))
    if uniform:
        bundle = replace(bundle, radii=np.full_like(bundle.radii, summary.radii_min))
        summary.regime += "+uniform_radii"
    base = model or PerturbationModel()
    model = PerturbationModel(**dict(base.__dict__, seed=int(seed), inflate=float(inflate)))
    margins, lams = [], []
    args = (F, bundle, res, model, inflate)
    n = int(trials)
    if workers > 1 and n > 1 and "fork" in mp.get_all_start_methods():
        _SHARED["args"] = args
        try:
            with mp.get_context("fork").Pool(min(workers, n)) as pool:
                results = pool.map(_pool_trial, range(n))
        finally:
            _SHARED.clear()
    else:
        results = [_trial(*args, t) for t in range(n)]
    for t, (row, cert, err) in enumerate(results):
        summary.rows.append(row)
        if err is not None:
            summary.errors.append(err)
            continue
        if certificates is not None:
            certificates.append(cert)
        if cert.certified:
            summary.certified += 1
        mm, lam = row[3], row[4]
        if math.isfinite(mm):
            margins.append(mm)
        if math.isfinite(lam):
            lams.append(lam)
    if margins:
        summary.min_margin = float(min(margins))
    if lams:
        summary.lambda_range = (float(min(lams)), float(max(lams)))
    return summary, bundle
