"""Data generation under the joint model and the three benchmark scenarios.

Event times are drawn by inverting the subject's cumulative hazard: the
hazard is integrated with adaptive Simpson on every smooth panel (between
spline knots and baseline-hazard breakpoints) and the crossing of
``-log U`` is located by bisection.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.interpolate import PPoly

from .data import SubjectRecord, beta0_names, infer_spec, reported
from .em import fit
from .errors import LatentJMError
from .spline import BasisSpec, OrthoBasis, build_basis, panel_rule

log = logging.getLogger(__name__)

SIMPSON_TOL = 1e-8
BISECTION_TOL = 1e-8


class NoEventsWarning(UserWarning):
    pass


@dataclass
class Scenario:
    """Complete description of a simulation design.

    ``random_effects`` is ``{"law": "gaussian", "variances": [...]}`` or
    ``{"law": "gamma", "shape": [...], "scale": [...]}`` (gamma draws are
    centered at their mean).  ``covariates`` maps a name to
    ``{"dist": "normal", "mean", "sd"}`` or ``{"dist": "bernoulli", "p"}``;
    ``x_columns[j]`` and ``z_columns`` pick the names entering each
    biomarker and the hazard.  ``baseline_hazard`` is
    ``{"breaks": [...], "rates": [...]}``: rate ``rates[m]`` on
    ``[breaks[m], breaks[m + 1])`` with ``breaks[0] = 0``.
    """

    name: str
    n: int
    basis: BasisSpec
    beta0: list
    beta1: list
    sigma2: list
    theta: list
    Theta: list
    eta: list
    gamma: float
    random_effects: dict
    baseline_hazard: dict
    covariates: dict = field(default_factory=dict)
    x_columns: list = field(default_factory=list)
    z_columns: list = field(default_factory=list)
    visit_spacing: float = 0.5
    t_max: float = 9.0
    notes: str = ""

    def __post_init__(self):
        if float(self.beta1[0]) != 1.0:
            raise ValueError("beta1[0] must be 1")
        if np.any(np.asarray(self.sigma2, dtype=float) <= 0):
            raise ValueError("residual variances must be positive")
        if self.visit_spacing <= 0:
            raise ValueError("visit spacing must be positive")
        if len(self.x_columns) != len(self.beta1):
            raise ValueError("x_columns needs one entry per biomarker")
        re = self.random_effects
        if re["law"] == "gaussian":
            if np.any(np.asarray(re["variances"], dtype=float) <= 0):
                raise ValueError("random-effect variances must be positive")
        elif re["law"] == "gamma":
            if np.any(np.asarray(re["shape"]) <= 0) or np.any(np.asarray(re["scale"]) <= 0):
                raise ValueError("gamma shape and scale must be positive")
        else:
            raise ValueError(f"unknown random-effect law {re['law']!r}")

    @property
    def J(self) -> int:
        return len(self.beta1)

    @property
    def k(self) -> int:
        return np.asarray(self.Theta, dtype=float).reshape(len(self.theta), -1).shape[1]

    @property
    def D(self) -> np.ndarray:
        """Random-effect variances (for gamma effects, shape * scale^2)."""
        re = self.random_effects
        if re["law"] == "gaussian":
            return np.asarray(re["variances"], dtype=float)
        return np.asarray(re["shape"], dtype=float) * np.asarray(re["scale"], dtype=float) ** 2

    def truth(self) -> dict:
        """True values in the bias-table layout."""
        out = {}
        b0 = [np.atleast_1d(np.asarray(b, dtype=float)) for b in self.beta0]
        out.update(zip(beta0_names([b.size for b in b0]), np.concatenate(b0).tolist()))
        for j in range(1, self.J):
            out[f"beta1_{j + 1}"] = float(self.beta1[j])
        for j in range(self.J):
            out[f"sigma2_{j + 1}"] = float(self.sigma2[j])
        for w, v in enumerate(self.D):
            out[f"D_{w + 1}"] = float(v)
        for m, v in enumerate(self.eta):
            out[f"eta_{m + 1}"] = float(v)
        out["gamma"] = float(self.gamma)
        return out

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["basis"] = self.basis.to_dict()
        d["beta0"] = [np.atleast_1d(b).tolist() for b in self.beta0]
        d["Theta"] = np.asarray(self.Theta, dtype=float).tolist()
        d["theta"] = np.asarray(self.theta, dtype=float).tolist()
        d["t_max"] = None if math.isinf(self.t_max) else self.t_max
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        d["basis"] = BasisSpec.from_dict(d["basis"])
        if d.get("t_max") is None:
            d["t_max"] = math.inf
        return cls(**d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "Scenario":
        return cls.from_dict(json.loads(Path(path).read_text()))


# --- numerical hazard inversion ----------------------------------------------

def adaptive_simpson(f, a: float, b: float, tol: float = SIMPSON_TOL, max_depth: int = 50):
    """Adaptive Simpson quadrature of a scalar function on ``[a, b]``."""
    if b <= a:
        return 0.0
    fa, fb = f(a), f(b)
    m = 0.5 * (a + b)
    fm = f(m)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    # explicit stack: (a, b, fa, fm, fb, whole, tol, depth)
    total = 0.0
    stack = [(a, b, fa, fm, fb, whole, tol, 0)]
    while stack:
        a, b, fa, fm, fb, whole, tol, depth = stack.pop()
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
        right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
        err = left + right - whole
        if depth >= max_depth or abs(err) <= 15.0 * tol:
            total += left + right + err / 15.0
        else:
            stack.append((a, m, fa, flm, fm, left, 0.5 * tol, depth + 1))
            stack.append((m, b, fm, frm, fb, right, 0.5 * tol, depth + 1))
    return total


class SubjectHazard:
    """Hazard ``lambda0(t) exp(lin + gamma mu(t))`` with ``mu`` a spline.

    Panels are the intervals between knots and baseline breakpoints, where
    the integrand is smooth; on each panel ``mu`` is a polynomial evaluated
    by Horner's rule.
    """

    def __init__(self, breaks, rates, lin: float, gamma: float, mu_spline=None,
                 basis: OrthoBasis | None = None, t_max: float = math.inf):
        self.lin = float(lin)
        self.gamma = float(gamma)
        self.t_max = t_max
        self.hb = np.asarray(breaks, dtype=float)
        self.hr = np.asarray(rates, dtype=float)
        edges = set(self.hb.tolist())
        self.pp = None
        if gamma != 0.0:
            if mu_spline is None or basis is None:
                raise ValueError("a latent-process spline is needed when gamma != 0")
            if basis.spec.time_transform != "identity":
                raise ValueError("simulation supports the identity time transform only")
            self.pp = PPoly.from_spline(mu_spline)
            lo, hi = basis.domain
            if t_max > hi + 1e-12:
                raise ValueError("t_max beyond the basis domain with gamma != 0")
            edges |= set(np.unique(basis.knot_vector).tolist())
        if math.isfinite(t_max):
            edges.add(float(t_max))
        self.edges = np.array(sorted(e for e in edges if 0.0 <= e <= t_max), dtype=float)

    def rate(self, t: float) -> float:
        m = int(np.searchsorted(self.hb, t, side="right")) - 1
        base = self.hr[max(m, 0)]
        if self.pp is None:
            return base * math.exp(self.lin)
        return base * math.exp(self.lin + self.gamma * self._mu(t))

    def _mu(self, t: float) -> float:
        x = self.pp.x
        m = min(max(int(np.searchsorted(x, t, side="right")) - 1, 0), x.size - 2)
        while m > 0 and x[m] == x[m + 1]:
            m -= 1
        c = self.pp.c[:, m]
        dt = t - x[m]
        v = 0.0
        for coef in c:
            v = v * dt + coef
        return v

    def _panel_fn(self, a, b):
        lo = 0.5 * (a + b)
        m = int(np.searchsorted(self.hb, lo, side="right")) - 1
        base = self.hr[max(m, 0)] * math.exp(self.lin)
        if self.pp is None:
            return lambda t: base
        x = self.pp.x
        idx = min(max(int(np.searchsorted(x, lo, side="right")) - 1, 0), x.size - 2)
        c = self.pp.c[:, idx].tolist()
        x0 = x[idx]
        g = self.gamma

        def f(t):
            dt = t - x0
            v = 0.0
            for coef in c:
                v = v * dt + coef
            return base * math.exp(g * v)
        return f

    def cumulative(self, t: float) -> float:
        total = 0.0
        prev = 0.0
        for e in self.edges[1:]:
            if e >= t:
                break
            total += adaptive_simpson(self._panel_fn(prev, e), prev, e)
            prev = e
        total += adaptive_simpson(self._panel_fn(prev, t), prev, t) if t > prev else 0.0
        return total

    def invert(self, target: float) -> float:
        """Smallest ``t`` with cumulative hazard ``target``; ``inf`` past ``t_max``."""
        total = 0.0
        prev = 0.0
        edges = list(self.edges[1:]) if self.edges.size and self.edges[0] == 0.0 else list(self.edges)
        while True:
            if edges:
                e = edges.pop(0)
            elif math.isinf(self.t_max):
                # constant tail beyond the last breakpoint; keep doubling the bracket
                e = max(2.0 * prev, prev + 1.0)
            else:
                return math.inf
            f = self._panel_fn(prev, e)
            piece = adaptive_simpson(f, prev, e)
            if total + piece >= target:
                lo, hi = prev, e
                need = target - total
                while hi - lo > BISECTION_TOL:
                    mid = 0.5 * (lo + hi)
                    if adaptive_simpson(f, prev, mid) < need:
                        lo = mid
                    else:
                        hi = mid
                return 0.5 * (lo + hi)
            total += piece
            prev = e


# --- scenario simulation -----------------------------------------------------

def _draw_covariates(scenario: Scenario, rng) -> dict:
    out = {}
    for name, law in scenario.covariates.items():
        if law["dist"] == "normal":
            out[name] = rng.normal(law.get("mean", 0.0), law["sd"])
        elif law["dist"] == "bernoulli":
            out[name] = float(rng.random() < law["p"])
        else:
            raise ValueError(f"unknown covariate law {law['dist']!r}")
    return out


def _draw_alpha(scenario: Scenario, rng) -> np.ndarray:
    re = scenario.random_effects
    if re["law"] == "gaussian":
        return rng.normal(0.0, np.sqrt(np.asarray(re["variances"], dtype=float)))
    shape = np.asarray(re["shape"], dtype=float)
    scale = np.asarray(re["scale"], dtype=float)
    return rng.gamma(shape, scale) - shape * scale


def simulate(scenario: Scenario, seed, basis: OrthoBasis | None = None) -> list:
    """Draw one dataset (a list of :class:`SubjectRecord`)."""
    rng = np.random.default_rng(seed)
    basis = basis or build_basis(scenario.basis)
    theta = np.asarray(scenario.theta, dtype=float)
    Theta = np.asarray(scenario.Theta, dtype=float).reshape(theta.size, -1)
    beta0 = [np.atleast_1d(np.asarray(b, dtype=float)) for b in scenario.beta0]
    beta1 = np.asarray(scenario.beta1, dtype=float)
    sd = np.sqrt(np.asarray(scenario.sigma2, dtype=float))
    eta = np.asarray(scenario.eta, dtype=float)
    hb = scenario.baseline_hazard["breaks"]
    hr = scenario.baseline_hazard["rates"]
    t_max = float(scenario.t_max)
    lo, hi = basis.domain
    subjects = []
    for i in range(scenario.n):
        cov = _draw_covariates(scenario, rng)
        alpha = _draw_alpha(scenario, rng)
        z = np.array([cov[c] for c in scenario.z_columns], dtype=float)
        lin = float(z @ eta) if z.size else 0.0
        coef = theta + Theta @ alpha
        spline = basis.spline(coef) if scenario.gamma != 0.0 else None
        hz = SubjectHazard(hb, hr, lin, scenario.gamma, spline, basis, t_max)
        T = hz.invert(-math.log(rng.random()))
        if T <= t_max:
            t_obs, delta = T, 1
        else:
            t_obs, delta = t_max, 0
        # visits censored by the event; the grid is exact multiples of the spacing
        n_vis = int(math.floor(min(t_obs, hi) / scenario.visit_spacing + 1e-9)) + 1
        times = scenario.visit_spacing * np.arange(n_vis)
        times = times[times <= t_obs]
        b = basis(times)
        mu = b @ coef
        y = np.empty((times.size, scenario.J))
        xs = []
        for j in range(scenario.J):
            xrow = np.array([cov[c] for c in scenario.x_columns[j]], dtype=float)
            X = np.tile(xrow, (times.size, 1))
            xs.append(X)
            y[:, j] = X @ beta0[j] + beta1[j] * mu + rng.normal(0.0, sd[j], times.size)
        subjects.append(SubjectRecord.fixed(f"s{i + 1}", times, y, xs, z, t_obs, delta))
    if not any(s.event_indicator for s in subjects):
        warnings.warn("no events simulated; every subject is censored", NoEventsWarning)
    return subjects


def event_rate(subjects) -> float:
    return float(np.mean([s.event_indicator for s in subjects]))


def median_visits(subjects) -> float:
    return float(np.median([s.n_visits for s in subjects]))


# --- benchmark scenarios -----------------------------------------------------

SCENARIOS = ("model1", "model1_n500", "model2", "model3")

# mean latent curve a + c * log(1 + t), projected on the basis
MEAN_CURVE = {"model1": (3.8, -1.8), "model2": (3.0, -1.0), "model3": (3.0, -1.0)}


def project_curve(basis: OrthoBasis, fn, n_points: int = 16) -> np.ndarray:
    """L2 projection of ``fn`` onto the orthonormal basis."""
    u, w = panel_rule(basis, n_points)
    t = u if basis.spec.time_transform == "identity" else np.expm1(u)
    return (basis(t) * (w * fn(t))[:, None]).sum(axis=0)


def paper_scenario(which: str) -> Scenario:
    """The benchmark designs: model1, model1_n500, model2, model3."""
    if which not in SCENARIOS:
        raise ValueError(f"unknown scenario {which!r}; choose from {SCENARIOS}")
    spec = BasisSpec.evenly_spaced(8, (0.0, 9.0), degree=3)
    basis = build_basis(spec)
    key = "model1" if which.startswith("model1") else which
    a, c = MEAN_CURVE[key]
    theta = project_curve(basis, lambda t: a + c * np.log1p(t))
    Theta = np.eye(basis.q)[:, :2]
    common = dict(basis=spec, theta=theta.tolist(), Theta=Theta.tolist(),
                  baseline_hazard={"breaks": [0.0], "rates": [0.08]},
                  visit_spacing=0.5, t_max=9.0)
    if key == "model1":
        return Scenario(
            name=which, n=500 if which == "model1_n500" else 215,
            beta0=[[-0.4], [-0.3]], beta1=[1.0, 0.8], sigma2=[1.0, 1.0], eta=[], gamma=0.5,
            random_effects={"law": "gaussian", "variances": [2.0, 1.0]},
            covariates={"x": {"dist": "normal", "mean": 0.0, "sd": math.sqrt(2.0)}},
            x_columns=[["x"], ["x"]], z_columns=[],
            notes=f"mean curve {a} + {c} log(1 + t); Theta = first two coordinate directions",
            **common)
    shared = dict(
        n=215, beta0=[[-0.02], [-0.01]], beta1=[1.0, 0.8], sigma2=[4.5, 3.0],
        eta=[0.003, 0.09, 0.23, -0.41], gamma=0.3,
        covariates={"age": {"dist": "normal", "mean": 55.0, "sd": 10.0},
                    "male": {"dist": "bernoulli", "p": 0.5},
                    "single": {"dist": "bernoulli", "p": 0.5},
                    "ipf": {"dist": "bernoulli", "p": 0.5}},
        x_columns=[["age"], ["age"]], z_columns=["age", "male", "single", "ipf"],
        notes=f"mean curve {a} + {c} log(1 + t); eta fixed at moderate effect sizes")
    if key == "model2":
        return Scenario(name=which, random_effects={"law": "gaussian", "variances": [28.0, 15.0]},
                        **shared, **common)
    return Scenario(name=which,
                    random_effects={"law": "gamma", "shape": [3.0, 2.0], "scale": [2.0, 2.0]},
                    **shared, **common)


def replicate_seeds(master_seed: int, n_reps: int) -> list:
    """Independent per-replicate integer seeds derived from one master seed."""
    children = np.random.SeedSequence(master_seed).spawn(n_reps)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def with_overrides(scenario: Scenario, **changes) -> Scenario:
    return replace(scenario, **changes)


# --- replication studies -----------------------------------------------------

TABLE_COLUMNS = ("beta0_1", "beta0_2", "beta1_2", "sigma2_1", "sigma2_2", "D_1", "D_2", "gamma")


@dataclass
class ReplicationTable:
    """Per-parameter mean bias and empirical SD over successful replicates."""

    scenario: str
    truth: dict
    estimates: list          # one dict per successful replicate (None for failures)
    seeds: list
    n_failed: int
    failures: list
    fits: list = field(default_factory=list, repr=False)

    @property
    def columns(self) -> list:
        extra = [c for c in self.truth if c not in TABLE_COLUMNS]
        return [c for c in TABLE_COLUMNS if c in self.truth] + extra

    def _matrix(self):
        ok = [e for e in self.estimates if e is not None]
        return np.array([[e[c] for c in self.columns] for e in ok], dtype=float)

    @property
    def bias(self) -> dict:
        M = self._matrix()
        return {c: float(M[:, m].mean() - self.truth[c]) for m, c in enumerate(self.columns)}

    @property
    def sd(self) -> dict:
        M = self._matrix()
        ddof = 1 if M.shape[0] > 1 else 0
        return {c: float(M[:, m].std(ddof=ddof)) for m, c in enumerate(self.columns)}

    def to_rows(self) -> list:
        b, s = self.bias, self.sd
        return [{"parameter": c, "truth": self.truth[c], "bias": b[c], "sd": s[c]}
                for c in self.columns]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["parameter", "truth", "bias", "sd"])
            w.writeheader()
            w.writerows(self.to_rows())

    def format(self) -> str:
        lines = [f"{self.scenario}: {len(self.estimates) - self.n_failed} fits, "
                 f"{self.n_failed} failed"]
        lines.append(f"{'parameter':>10} {'truth':>9} {'bias':>9} {'sd':>9}")
        for r in self.to_rows():
            lines.append(f"{r['parameter']:>10} {r['truth']:9.4g} {r['bias']:9.4f} {r['sd']:9.4f}")
        return "\n".join(lines)


def replicate_study(scenario: Scenario, n_reps: int, seed: int, fit_config=None,
                    k: int | None = None, basis_spec: BasisSpec | None = None,
                    keep_fits: bool = False, progress=None) -> ReplicationTable:
    """Simulate and refit ``n_reps`` datasets; failures are recorded and excluded."""
    if n_reps < 2:
        raise ValueError("a replication study needs at least two replicates")
    basis = build_basis(scenario.basis)
    spec_basis = basis_spec or scenario.basis
    seeds = replicate_seeds(seed, n_reps)
    estimates, failures, fits = [], [], []
    for rep, s in enumerate(seeds):
        data = simulate(scenario, s, basis)
        try:
            res = fit(data, infer_spec(data, k or scenario.k, spec_basis), fit_config)
        except (LatentJMError, FloatingPointError, np.linalg.LinAlgError) as exc:
            log.warning("replicate %d failed: %s", rep, exc)
            estimates.append(None)
            failures.append((rep, str(exc)))
            fits.append(None)
            continue
        estimates.append(reported(res.params))
        fits.append(res if keep_fits else None)
        if progress:
            progress(rep, res)
    return ReplicationTable(scenario=scenario.name, truth=scenario.truth(), estimates=estimates,
                            seeds=seeds, n_failed=len(failures), failures=failures,
                            fits=fits if keep_fits else [])
