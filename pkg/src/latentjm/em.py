"""EM estimation of the joint model.

Each iteration runs the quadrature E-step, then the M-step in the order
sigma^2, D, beta1 (closed forms), the Breslow hazard, and one Newton-Raphson
step each for beta0, eta, gamma, theta and the columns of Theta.  All
expectations in one M-step use the posterior frozen at the current
parameters.  The whole move is relaxed by step halving until the observed
log-likelihood does not decrease, which makes the trace monotone.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import ModelSpec, ParameterSet, StepHazard, SubjectRecord
from .errors import (
    DegenerateLatentProcess,
    DegenerateLikelihood,
    FitError,
    InvalidVariance,
    LatentJMError,
    NoData,
    RankDeficient,
    SingularInformation,
    UnderdeterminedInit,
    ZeroLikelihood,
)
from .quadrature import (
    CompiledData,
    GaussHermiteRule,
    PosteriorBatch,
    compile_data,
    gauss_hermite,
    posterior,
)
from .spline import OrthoBasis, build_basis

log = logging.getLogger(__name__)

MIN_VARIANCE = 1e-10


@dataclass(frozen=True)
class FitConfig:
    """Convergence and numerical settings.

    A fit stops when the relative log-likelihood gain falls below
    ``loglik_rel_tol`` and the largest parameter move below
    ``param_abs_tol``, when the relaxed step can no longer increase the
    likelihood, or after ``max_iters`` iterations.
    """

    max_iters: int = 500
    loglik_rel_tol: float = 1e-6
    param_abs_tol: float = 1e-4
    quad_nodes: int = 20
    newton_damping: float = 1.0
    orthonormalize_every: bool = False
    min_step: float = 2.0 ** -12
    min_variance: float = MIN_VARIANCE

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not (self.loglik_rel_tol > 0 and self.param_abs_tol > 0):
            raise ValueError("tolerances must be positive")
        if not 0 < self.newton_damping <= 1:
            raise ValueError("newton_damping must lie in (0, 1]")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        names = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True, eq=False)
class FitResult:
    params: ParameterSet
    spec: ModelSpec
    loglik: float
    loglik_trace: tuple
    converged: bool
    reason: str
    n_iters: int
    aic: float
    n_params: int
    pc_variance_proportions: np.ndarray
    diagnostics: tuple = ()
    elapsed: float = 0.0
    config: FitConfig = field(default_factory=FitConfig)
    loglik_canonical: float = math.nan

    @property
    def monotone(self) -> bool:
        tr = np.asarray(self.loglik_trace)
        if tr.size < 2:
            return True
        return bool(np.all(np.diff(tr) >= -1e-8 * np.abs(tr[:-1])))

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "spec": self.spec.to_dict(),
            "config": self.config.to_dict(),
            "loglik": self.loglik,
            "loglik_canonical": self.loglik_canonical,
            "loglik_trace": list(self.loglik_trace),
            "converged": self.converged,
            "reason": self.reason,
            "n_iters": self.n_iters,
            "aic": self.aic,
            "n_params": self.n_params,
            "pc_variance_proportions": self.pc_variance_proportions.tolist(),
            "diagnostics": list(self.diagnostics),
            "elapsed_seconds": self.elapsed,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "FitResult":
        d = json.loads(Path(path).read_text())
        return cls(params=ParameterSet.from_dict(d["params"]), spec=ModelSpec.from_dict(d["spec"]),
                   loglik=d["loglik"], loglik_trace=tuple(d["loglik_trace"]),
                   converged=d["converged"], reason=d["reason"], n_iters=d["n_iters"],
                   aic=d["aic"], n_params=d["n_params"],
                   pc_variance_proportions=np.asarray(d["pc_variance_proportions"]),
                   diagnostics=tuple(d.get("diagnostics", ())),
                   elapsed=d.get("elapsed_seconds", 0.0),
                   config=FitConfig.from_dict(d.get("config", {})),
                   loglik_canonical=d.get("loglik_canonical", math.nan))

    def write_hazard_csv(self, path):
        h = self.params.hazard
        cum = np.cumsum(h.increments)
        with Path(path).open("w") as fh:
            fh.write("time,cumulative_hazard\n")
            for t, c in zip(h.jump_times, cum):
                fh.write(f"{float(t)!r},{float(c)!r}\n")


def _compiled(data, basis, params=None) -> CompiledData:
    if isinstance(data, CompiledData):
        return data
    if basis is None:
        raise ValueError("a basis is needed to compile raw subjects")
    jt = params.hazard.jump_times if params is not None else None
    return compile_data(list(data), basis, jump_times=jt)


# --- likelihood --------------------------------------------------------------

def observed_loglik(data, params: ParameterSet, basis: OrthoBasis | None = None,
                    rule: GaussHermiteRule | None = None) -> float:
    """Observed-data log-likelihood by quadrature."""
    data = _compiled(data, basis, params)
    if data.n == 0:
        return 0.0
    rule = rule or gauss_hermite(20)
    ev = data.delta == 1
    missing = ev & (data.event_jump < 0)
    if np.any(missing) or np.any(params.hazard.increments[data.event_jump[ev & ~missing]] <= 0):
        raise ZeroLikelihood("an observed event time carries no hazard mass")
    return posterior(data, params, rule).loglik


def e_step(data, params: ParameterSet, basis: OrthoBasis | None = None,
           rule: GaussHermiteRule | None = None) -> list:
    """Per-subject posterior summaries at the current parameters."""
    data = _compiled(data, basis, params)
    return posterior(data, params, rule or gauss_hermite(20)).summaries()


# --- closed-form updates -----------------------------------------------------

def _cell_moments(data: CompiledData, post: PosteriorBatch):
    m = post.e_alpha
    M2 = post.e_alpha_outer
    a = post.integrand.a
    mc = m[data.cell_subject]
    am = np.einsum("ck,ck->c", a, mc)
    aM2a = np.einsum("ck,ckl,cl->c", a, M2[data.cell_subject], a)
    return m, M2, am, aM2a


def update_sigma2(data: CompiledData, post: PosteriorBatch, params: ParameterSet,
                  min_variance: float = MIN_VARIANCE) -> np.ndarray:
    """Average expected squared residual over each biomarker's observed cells."""
    _, _, am, aM2a = _cell_moments(data, post)
    r = post.integrand.resid
    bw = params.beta1[data.cell_marker]
    e = r * r - 2.0 * r * bw * am + bw * bw * aM2a
    out = np.empty(data.J)
    for j, idx in enumerate(data.marker_cells):
        if idx.size == 0:
            raise NoData(j)
        out[j] = e[idx].mean()
    return np.maximum(out, min_variance)


def update_D(post: PosteriorBatch, min_variance: float = MIN_VARIANCE) -> np.ndarray:
    """Mean posterior second moment of each random effect."""
    M2 = post.e_alpha_outer
    if M2.shape[0] == 0:
        raise NoData(0)
    return np.maximum(np.einsum("ikk->k", M2) / M2.shape[0], min_variance)


def update_beta1(data: CompiledData, post: PosteriorBatch, params: ParameterSet) -> np.ndarray:
    """Factor loadings of biomarkers 2..J; the first stays pinned at 1."""
    _, _, am, aM2a = _cell_moments(data, post)
    mu0 = data.cell_B @ params.theta
    bw = params.beta1[data.cell_marker]
    y0 = post.integrand.resid + bw * mu0
    out = params.beta1.copy()
    out[0] = 1.0
    for j in range(1, data.J):
        idx = data.marker_cells[j]
        den = np.sum(mu0[idx] ** 2 + 2.0 * mu0[idx] * am[idx] + aM2a[idx])
        if not den > 0:
            raise DegenerateLatentProcess(f"latent process has no signal for biomarker {j + 1}")
        out[j] = np.sum(y0[idx] * (mu0[idx] + am[idx])) / den
    return out


def update_hazard(data: CompiledData, post: PosteriorBatch, params: ParameterSet) -> StepHazard:
    """Breslow-type increments with posterior-averaged risk-set weights."""
    if data.U == 0:
        return StepHazard(np.zeros(0), np.zeros(0))
    eexp = post.exp_link()
    den = np.sum(data.at_risk * np.exp(post.integrand.lin0) * eexp, axis=0)
    inc = np.zeros(data.U)
    pos = data.d > 0
    inc[pos] = data.d[pos] / den[pos]
    return StepHazard(data.jump_times.copy(), inc)


# --- Newton-Raphson one-steps ------------------------------------------------

def _solve(info, score, what):
    info = np.atleast_2d(info)
    score = np.atleast_1d(score)
    if info.size == 0:
        return np.zeros(0)
    if not np.all(np.isfinite(info)) or not np.all(np.isfinite(score)):
        raise SingularInformation(f"non-finite score or information for {what}")
    try:
        c = np.linalg.cholesky(0.5 * (info + info.T))
    except np.linalg.LinAlgError:
        raise SingularInformation(f"information for {what} is not positive definite") from None
    return np.linalg.solve(c.T, np.linalg.solve(c, score))


def _risk_weights(data, post, hazard):
    """``R_iu lambda_u exp(Z eta + gamma b^T theta)`` per subject and jump."""
    return data.at_risk * hazard.increments[None, :] * np.exp(post.integrand.lin0)


def newton_step_beta0(data: CompiledData, post: PosteriorBatch, params: ParameterSet,
                      damping: float = 1.0) -> tuple:
    m, _, am, _ = _cell_moments(data, post)
    r = post.integrand.resid
    w = 1.0 / params.sigma2[data.cell_marker]
    bw = params.beta1[data.cell_marker]
    resid_full = r - bw * am
    out = []
    for j, idx in enumerate(data.marker_cells):
        X = data.marker_X[j]
        if data.p[j] == 0:
            out.append(params.beta0[j].copy())
            continue
        S = X.T @ (w[idx] * resid_full[idx])
        Inf = (X * w[idx][:, None]).T @ X
        out.append(params.beta0[j] + damping * _solve(Inf, S, f"beta0_{j + 1}"))
    return tuple(out)


def newton_step_eta(data: CompiledData, post: PosteriorBatch, params: ParameterSet,
                    hazard: StepHazard | None = None, damping: float = 1.0) -> np.ndarray:
    if data.r == 0:
        return params.eta.copy()
    hazard = hazard or params.hazard
    if data.U == 0:
        return params.eta.copy()
    c = _risk_weights(data, post, hazard) * post.exp_link()
    S = data.Z_event[data.delta == 1].sum(axis=0) - np.einsum("iu,iur->r", c, data.Z_jump)
    Inf = np.einsum("iu,iur,ius->rs", c, data.Z_jump, data.Z_jump)
    if not np.any(S) and not np.any(Inf):
        return params.eta.copy()
    return params.eta + damping * _solve(Inf, S, "eta")


def newton_step_gamma(data: CompiledData, post: PosteriorBatch, params: ParameterSet,
                      hazard: StepHazard | None = None, damping: float = 1.0) -> float:
    hazard = hazard or params.hazard
    if data.U == 0:
        return params.gamma
    m = post.e_alpha
    ev = data.delta == 1
    mu_ev = data.B_event[ev] @ params.theta + np.einsum(
        "ik,ik->i", data.B_event[ev] @ params.Theta, m[ev])
    c = _risk_weights(data, post, hazard)
    mu0 = data.B_jump @ params.theta
    e0 = post.exp_link()
    e1 = post.exp_link("link")
    e2 = post.exp_link("link2")
    S = mu_ev.sum() - np.sum(c * (mu0[None, :] * e0 + e1))
    Inf = np.sum(c * (mu0[None, :] ** 2 * e0 + 2.0 * mu0[None, :] * e1 + e2))
    if S == 0 and Inf == 0:
        return params.gamma
    if not Inf > 0:
        raise SingularInformation("information for gamma is not positive")
    return float(params.gamma + damping * S / Inf)


def newton_step_theta(data: CompiledData, post: PosteriorBatch, params: ParameterSet,
                      hazard: StepHazard | None = None, damping: float = 1.0) -> np.ndarray:
    hazard = hazard or params.hazard
    _, _, am, _ = _cell_moments(data, post)
    r = post.integrand.resid
    w = 1.0 / params.sigma2[data.cell_marker]
    bw = params.beta1[data.cell_marker]
    B = data.cell_B
    S = B.T @ (w * bw * (r - bw * am))
    Inf = (B * (w * bw * bw)[:, None]).T @ B
    g = params.gamma
    if data.U and g != 0.0:
        cu = np.sum(_risk_weights(data, post, hazard) * post.exp_link(), axis=0)
        S = S + g * data.B_event[data.delta == 1].sum(axis=0) - g * (data.B_jump.T @ cu)
        Inf = Inf + g * g * (data.B_jump * cu[:, None]).T @ data.B_jump
    return params.theta + damping * _solve(Inf, S, "theta")


def newton_step_Theta(data: CompiledData, post: PosteriorBatch, params: ParameterSet,
                      hazard: StepHazard | None = None, damping: float = 1.0) -> np.ndarray:
    """Column-wise Newton steps for the principal-component coefficients."""
    hazard = hazard or params.hazard
    m = post.e_alpha
    M2 = post.e_alpha_outer
    r = post.integrand.resid
    a = post.integrand.a
    w = 1.0 / params.sigma2[data.cell_marker]
    bw = params.beta1[data.cell_marker]
    B = data.cell_B
    subj = data.cell_subject
    g = params.gamma
    ev = data.delta == 1
    survival = data.U > 0 and g != 0.0
    if survival:
        c = _risk_weights(data, post, hazard)
    Theta = params.Theta.copy()
    for wcol in range(params.k):
        # E[(r - beta1 a.alpha) alpha_w] per cell
        e_res = r * m[subj, wcol] - bw * np.einsum("ck,ck->c", a, M2[subj, :, wcol])
        S = B.T @ (w * bw * e_res)
        Inf = (B * (w * bw * bw * M2[subj, wcol, wcol])[:, None]).T @ B
        if survival:
            c1 = np.sum(c * post.exp_link(wcol), axis=0)
            c2 = np.sum(c * post.exp_link((wcol, 2)), axis=0)
            S = S + g * (data.B_event[ev] * m[ev, wcol][:, None]).sum(axis=0) \
                - g * (data.B_jump.T @ c1)
            Inf = Inf + g * g * (data.B_jump * c2[:, None]).T @ data.B_jump
        Theta[:, wcol] = params.Theta[:, wcol] + damping * _solve(Inf, S, f"Theta_{wcol + 1}")
    return Theta


def m_step(data: CompiledData, post: PosteriorBatch, params: ParameterSet,
           min_variance: float = MIN_VARIANCE) -> ParameterSet:
    """Full (undamped) M-step from the frozen posterior ``post``."""
    sigma2 = update_sigma2(data, post, params, min_variance)
    D = update_D(post, min_variance)
    beta1 = update_beta1(data, post, params)
    hazard = update_hazard(data, post, params)
    beta0 = newton_step_beta0(data, post, params)
    eta = newton_step_eta(data, post, params, hazard)
    gamma = newton_step_gamma(data, post, params, hazard)
    theta = newton_step_theta(data, post, params, hazard)
    Theta = newton_step_Theta(data, post, params, hazard)
    return ParameterSet(beta0=beta0, beta1=beta1, sigma2=sigma2, theta=theta, Theta=Theta, D=D,
                        eta=eta, gamma=gamma, hazard=hazard)


def _relax(old: ParameterSet, new: ParameterSet, s: float) -> ParameterSet:
    if s == 1.0:
        return new
    phi = old.phi_vector() + s * (new.phi_vector() - old.phi_vector())
    inc = old.hazard.increments + s * (new.hazard.increments - old.hazard.increments)
    out = old.with_phi(phi)
    return out.replace(hazard=StepHazard(old.hazard.jump_times, inc))


# --- canonical form ----------------------------------------------------------

def _sign_fix(Theta):
    Theta = Theta.copy()
    for w in range(Theta.shape[1]):
        col = Theta[:, w]
        tol = 1e-12 * max(np.max(np.abs(col)), 1e-300)
        nz = np.nonzero(np.abs(col) > tol)[0]
        if nz.size and col[nz[0]] < 0:
            Theta[:, w] = -col
    return Theta


def orthonormalize(params: ParameterSet) -> ParameterSet:
    """Equivalent parameters with orthonormal Theta and nonincreasing diagonal D.

    The latent covariance kernel ``Theta D Theta^T`` is preserved; signs are
    fixed so that the first nonzero entry of every column is positive.
    """
    Theta, D = params.Theta, params.D
    sv = np.linalg.svd(Theta, compute_uv=False)
    if sv.size == 0 or sv[-1] <= 1e-10 * max(sv[0], 1e-300):
        raise RankDeficient("Theta is rank deficient")
    # eigenpairs of Theta D Theta^T via the small k x k problem
    Q, R = np.linalg.qr(Theta)
    M = (R * D[None, :]) @ R.T
    evals, evecs = np.linalg.eigh(0.5 * (M + M.T))
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    newTheta = _sign_fix(Q @ evecs[:, order])
    return params.replace(Theta=newTheta, D=np.maximum(evals, MIN_VARIANCE))


# --- initialization ----------------------------------------------------------

def _cox_eta(data: CompiledData, max_iter: int = 50) -> np.ndarray:
    """Partial-likelihood Cox fit of the survival covariates alone (Breslow ties)."""
    eta = np.zeros(data.r)
    if data.r == 0 or data.U == 0:
        return eta
    R, Z, d = data.at_risk, data.Z_jump, data.d
    zev = data.Z_event[data.delta == 1].sum(axis=0)

    def pll(e):
        lin = Z @ e
        mx = np.max(np.where(R > 0, lin, -np.inf), axis=0)
        s0 = np.sum(R * np.exp(lin - mx[None, :]), axis=0)
        return zev @ e - np.sum(d * (mx + np.log(s0)))

    cur = pll(eta)
    for _ in range(max_iter):
        e = R * np.exp(Z @ eta)
        s0 = e.sum(axis=0)
        s1 = np.einsum("iu,iur->ur", e, Z)
        s2 = np.einsum("iu,iur,ius->urs", e, Z, Z)
        ok = d > 0
        zbar = s1[ok] / s0[ok, None]
        score = zev - np.sum(d[ok, None] * zbar, axis=0)
        info = np.sum(d[ok, None, None] * (s2[ok] / s0[ok, None, None]
                                           - zbar[:, :, None] * zbar[:, None, :]), axis=0)
        try:
            step = np.linalg.solve(info + 1e-10 * np.eye(data.r), score)
        except np.linalg.LinAlgError:
            break
        s = 1.0
        while s > 1e-6:
            cand = eta + s * step
            val = pll(cand)
            if val >= cur:
                break
            s *= 0.5
        else:
            break
        moved = np.max(np.abs(cand - eta))
        eta, cur = cand, val
        if moved < 1e-10:
            break
    return eta


def breslow(data: CompiledData, lin: np.ndarray) -> StepHazard:
    """Breslow increments ``d_u / sum_{R(t_u)} exp(lin_iu)`` for a linear predictor."""
    den = np.sum(data.at_risk * np.exp(lin), axis=0)
    inc = np.zeros(data.U)
    pos = data.d > 0
    inc[pos] = data.d[pos] / den[pos]
    return StepHazard(data.jump_times.copy(), inc)


def initialize(data, spec: ModelSpec, basis: OrthoBasis | None = None) -> ParameterSet:
    """Deterministic starting values.

    beta0 and the mean curve come from per-biomarker least squares on the
    covariates and the basis; sigma^2 is the residual variance; Theta starts
    at the first k coordinate directions with D splitting biomarker 1's
    residual variance equally; eta is the covariate-only Cox fit and gamma 0.
    """
    data = _compiled(data, basis if basis is not None else build_basis(spec.basis))
    if data.n == 0:
        raise UnderdeterminedInit("no subjects")
    q, k = data.q, spec.k
    beta0, curves, resid_var, resid = [], [], [], []
    for j, idx in enumerate(data.marker_cells):
        if idx.size < data.p[j] + 1:
            raise UnderdeterminedInit(f"biomarker {j + 1} has {idx.size} observed cells, "
                                      f"needs at least {data.p[j] + 1}")
        design = np.hstack([data.marker_X[j], data.cell_B[idx]])
        coef, *_ = np.linalg.lstsq(design, data.cell_y[idx], rcond=None)
        beta0.append(coef[:data.p[j]])
        curves.append(coef[data.p[j]:])
        res = data.cell_y[idx] - design @ coef
        resid_var.append(max(float(np.mean(res ** 2)), 1e-6))
        resid.append(data.cell_y[idx] - data.marker_X[j] @ coef[:data.p[j]])
    theta = curves[0]
    beta1 = np.ones(data.J)
    sd1 = np.std(resid[0])
    for j in range(1, data.J):
        sign = 1.0 if curves[j] @ curves[0] >= 0 else -1.0
        beta1[j] = sign * np.std(resid[j]) / sd1 if sd1 > 0 else 1.0
    eta = _cox_eta(data)
    lin = data.Z_jump @ eta if data.r else np.zeros((data.n, data.U))
    hazard = breslow(data, lin) if data.U else StepHazard(np.zeros(0), np.zeros(0))
    return ParameterSet(beta0=tuple(beta0), beta1=beta1, sigma2=np.asarray(resid_var),
                        theta=theta, Theta=np.eye(q)[:, :k], D=np.full(k, resid_var[0] / k),
                        eta=eta, gamma=0.0, hazard=hazard)


# --- driver ------------------------------------------------------------------

def n_free_params(params: ParameterSet) -> int:
    """Dimension of the finite-dimensional parameter (hazard jumps excluded)."""
    return params.n_params


def _canonical_phi(params: ParameterSet) -> np.ndarray:
    try:
        return orthonormalize(params).phi_vector()
    except RankDeficient:
        return params.phi_vector()


def _line_search(data, rule, params, target, ll, config):
    """Halve the relaxation step until the log-likelihood does not decrease."""
    s = config.newton_damping
    while s >= config.min_step:
        cand = _relax(params, target, s)
        if config.orthonormalize_every:
            cand = orthonormalize(cand)
        try:
            cpost = posterior(data, cand, rule)
            cll = cpost.loglik
        except (DegenerateLikelihood, InvalidVariance, FloatingPointError):
            cll = -math.inf
        if np.isfinite(cll) and cll >= ll - 1e-12 * abs(ll):
            return (cand, cpost, cll), s
        s *= 0.5
    return None, s


def _profile_hazard(data, rule, params, post, ll, max_passes: int = 10, tol: float = 1e-12):
    """Repeat the Breslow step at fixed phi so the reported hazard is self-consistent."""
    for _ in range(max_passes):
        try:
            hz = update_hazard(data, post, params)
            cand = params.replace(hazard=hz)
            cpost = posterior(data, cand, rule)
        except (LatentJMError, FloatingPointError):
            break
        if not cpost.loglik >= ll - 1e-12 * abs(ll):
            break
        change = float(np.max(np.abs(hz.increments - params.hazard.increments), initial=0.0))
        params, post, ll = cand, cpost, cpost.loglik
        if change < tol:
            break
    return params, ll


def fit(subjects: Sequence[SubjectRecord], spec: ModelSpec, config: FitConfig | None = None,
        init: ParameterSet | None = None) -> FitResult:
    """Fit the joint model by EM."""
    config = config or FitConfig()
    t0 = time.perf_counter()
    basis = build_basis(spec.basis)
    data = compile_data(list(subjects), basis)
    rule = gauss_hermite(config.quad_nodes)
    params = init if init is not None else initialize(data, spec)
    diagnostics = []
    try:
        post = posterior(data, params, rule)
    except LatentJMError as exc:
        raise FitError(f"initial E-step failed: {exc}", 0, exc) from exc
    ll = post.loglik
    trace = [ll]
    converged, reason = False, "max_iters reached"
    it = 0
    # The closed-form D update maximizes the expected complete-data
    # likelihood, but the nodes alpha = sqrt(2D) x move with D, so near the
    # optimum it can point downhill for the quadrature likelihood.  Once that
    # happens D is held fixed: the column scales of Theta carry the same
    # freedom exactly, so nothing is lost.
    hold_D = False
    for it in range(1, config.max_iters + 1):
        try:
            target = m_step(data, post, params, config.min_variance)
        except LatentJMError as exc:
            raise FitError(f"M-step failed: {exc}", it, exc) from exc
        if hold_D:
            target = target.replace(D=params.D)
        accepted, s = _line_search(data, rule, params, target, ll, config)
        if accepted is None and not hold_D:
            hold_D = True
            diagnostics.append(f"iteration {it}: D held fixed, its update no longer "
                               "increased the quadrature likelihood")
            target = target.replace(D=params.D)
            accepted, s = _line_search(data, rule, params, target, ll, config)
        if accepted is None:
            converged, reason = True, "no ascent at minimum step"
            diagnostics.append(f"iteration {it}: line search exhausted at step {config.min_step}")
            break
        cand, cpost, cll = accepted
        gain = (cll - ll) / max(abs(ll), 1e-300)
        # measured in canonical form: Theta column scale against D is an
        # exactly flat direction the raw iterates may drift along
        move = float(np.max(np.abs(_canonical_phi(cand) - _canonical_phi(params))))
        params, post, ll = cand, cpost, cll
        trace.append(ll)
        log.debug("iter %d loglik %.8f step %.4g move %.3g", it, ll, s, move)
        if gain < config.loglik_rel_tol and move < config.param_abs_tol:
            if hold_D:
                converged, reason = True, "tolerance"
                break
            # the free-D fixed point need not be stationary for the quadrature
            # likelihood; finish with D held so that it is
            hold_D = True
            diagnostics.append(f"iteration {it}: converged with D free, refining with D held")
    params, ll = _profile_hazard(data, rule, params, post, ll)
    final = orthonormalize(params)
    for name, arr in (("sigma2", final.sigma2), ("D", final.D)):
        if np.any(arr <= config.min_variance * (1 + 1e-9)):
            diagnostics.append(f"{name} at its variance floor")
    # the rotation to canonical form is exact for the model but not for the
    # product Gauss-Hermite grid, so the maximized value is the one reported
    canonical_ll = observed_loglik(data, final, rule=rule)
    if abs(canonical_ll - ll) > 1e-8 * abs(ll):
        diagnostics.append(f"quadrature log-likelihood at the canonical rotation is "
                           f"{canonical_ll:.6f} (maximized {ll:.6f})")
    final_ll = ll
    npar = n_free_params(final)
    D = final.D
    return FitResult(params=final, spec=spec, loglik=final_ll, loglik_trace=tuple(trace),
                     converged=converged, reason=reason, n_iters=it,
                     aic=-2.0 * final_ll + 2.0 * npar, n_params=npar,
                     pc_variance_proportions=D / D.sum(), diagnostics=tuple(diagnostics),
                     elapsed=time.perf_counter() - t0, config=config,
                     loglik_canonical=canonical_ll)
