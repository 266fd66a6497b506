"""Gauss-Hermite rules and posterior expectations over the random effects.

All subjects are evaluated together: the data are compiled once into flat
cell arrays (:class:`CompiledData`) and the log complete-data density is
formed as an ``n_subjects x n_nodes`` matrix.  Random effects enter through
the substitution ``alpha = sqrt(2 D) x`` so the N(0, D) prior becomes the
Hermite weight; normalization is done with a per-subject max shift.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .data import ParameterSet, SubjectRecord
from .errors import DegenerateLikelihood, InvalidOrder, InvalidVariance, OutOfDomain
from .spline import OrthoBasis

_LOG_PI = np.log(np.pi)


@dataclass(frozen=True, eq=False)
class GaussHermiteRule:
    """Nodes and weights for the weight function ``exp(-x^2)``."""

    n_nodes: int
    nodes: np.ndarray
    weights: np.ndarray

    def grid(self, k: int):
        """Tensor-product nodes ``(n^k, k)`` and log weights normalized to sum to one."""
        nodes = np.array(list(itertools.product(self.nodes, repeat=k)), dtype=float).reshape(-1, k)
        logw = np.log(self.weights)
        lw = np.array([sum(c) for c in itertools.product(logw, repeat=k)], dtype=float)
        return nodes, lw - 0.5 * k * _LOG_PI


def gauss_hermite(n: int) -> GaussHermiteRule:
    """``n``-point Gauss-Hermite rule, exact for polynomials of degree ``2n - 1``."""
    if int(n) != n or n < 1:
        raise InvalidOrder(f"quadrature order must be a positive integer, got {n!r}")
    x, w = np.polynomial.hermite.hermgauss(int(n))
    # exact symmetry about zero
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    x.setflags(write=False)
    w.setflags(write=False)
    return GaussHermiteRule(int(n), x, w)


@dataclass(eq=False)
class CompiledData:
    """Flat, basis-evaluated view of a list of subjects.

    Cells are the observed (subject, visit, biomarker) triples.  Hazard sums
    run over ``jump_times``; ``at_risk[i, u]`` flags ``jump_times[u] <= T_i``.
    """

    subjects: list
    basis: OrthoBasis
    n: int
    J: int
    p: tuple
    r: int
    cell_subject: np.ndarray
    cell_visit: np.ndarray
    cell_marker: np.ndarray
    cell_y: np.ndarray
    cell_B: np.ndarray
    marker_cells: list
    marker_X: list
    n_obs: np.ndarray
    event_time: np.ndarray
    delta: np.ndarray
    B_event: np.ndarray
    Z_event: np.ndarray
    jump_times: np.ndarray
    B_jump: np.ndarray
    at_risk: np.ndarray
    Z_jump: np.ndarray
    event_jump: np.ndarray
    d: np.ndarray
    visit_counts: np.ndarray = field(repr=False, default=None)

    @property
    def q(self) -> int:
        return self.basis.q

    @property
    def U(self) -> int:
        return self.jump_times.size

    @property
    def n_cells(self) -> int:
        return self.cell_y.size


def distinct_event_times(subjects: Sequence[SubjectRecord]) -> np.ndarray:
    return np.unique(np.array([s.event_time for s in subjects if s.event_indicator == 1],
                              dtype=float))


def compile_data(subjects: Sequence[SubjectRecord], basis: OrthoBasis,
                 jump_times=None) -> CompiledData:
    """Evaluate the basis at every cell, event time and hazard jump time.

    ``jump_times`` defaults to the distinct observed event times.
    """
    subjects = list(subjects)
    n = len(subjects)
    if n:
        J = subjects[0].J
        p = tuple(xj.shape[1] for xj in subjects[0].x)
        r = subjects[0].r
    else:
        J, p, r = 1, (0,), 0
    if jump_times is None:
        jump_times = distinct_event_times(subjects)
    jump_times = np.asarray(jump_times, dtype=float).reshape(-1)

    subj, visit, marker, yv = [], [], [], []
    xs = [[] for _ in range(J)]
    times = []
    for i, s in enumerate(subjects):
        if s.J != J or tuple(xj.shape[1] for xj in s.x) != p or s.r != r:
            raise ValueError(f"subject {s.id} has inconsistent dimensions")
        obs = s.observed
        for u, j in zip(*np.nonzero(obs)):
            subj.append(i)
            visit.append(u)
            marker.append(j)
            yv.append(s.y[u, j])
            times.append(s.visit_times[u])
            xs[j].append(s.x[j][u])
    cell_subject = np.asarray(subj, dtype=int)
    cell_marker = np.asarray(marker, dtype=int)
    cell_y = np.asarray(yv, dtype=float)
    cell_B = basis(np.asarray(times, dtype=float)) if times else np.zeros((0, basis.q))
    marker_cells = [np.nonzero(cell_marker == j)[0] for j in range(J)]
    marker_X = []
    for j in range(J):
        Xj = np.asarray(xs[j], dtype=float).reshape(len(xs[j]), p[j])
        if not np.all(np.isfinite(Xj)):
            raise ValueError(f"non-finite covariate in an observed cell of biomarker {j + 1}")
        marker_X.append(Xj)
    n_obs = np.array([mc.size for mc in marker_cells], dtype=int)

    event_time = np.array([s.event_time for s in subjects], dtype=float)
    delta = np.array([s.event_indicator for s in subjects], dtype=int)
    B_event = np.zeros((n, basis.q))
    ev = np.nonzero(delta == 1)[0]
    if ev.size:
        B_event[ev] = basis(event_time[ev])
    Z_event = np.array([s.z_at(s.event_time) for s in subjects], dtype=float).reshape(n, r)

    U = jump_times.size
    B_jump = basis(jump_times) if U else np.zeros((0, basis.q))
    at_risk = (jump_times[None, :] <= event_time[:, None]).astype(float)
    Z_jump = np.zeros((n, U, r))
    for i, s in enumerate(subjects):
        Z_jump[i] = s.z_at(jump_times)

    event_jump = np.full(n, -1, dtype=int)
    if U:
        pos = np.searchsorted(jump_times, event_time)
        pos_c = np.minimum(pos, U - 1)
        hit = (pos < U) & np.isclose(jump_times[pos_c], event_time, rtol=1e-12, atol=0.0)
        event_jump = np.where((delta == 1) & hit, pos_c, -1)
    d = np.bincount(event_jump[event_jump >= 0], minlength=U).astype(float)

    return CompiledData(
        subjects=subjects, basis=basis, n=n, J=J, p=p, r=r,
        cell_subject=cell_subject, cell_visit=np.asarray(visit, dtype=int),
        cell_marker=cell_marker, cell_y=cell_y, cell_B=cell_B,
        marker_cells=marker_cells, marker_X=marker_X, n_obs=n_obs,
        event_time=event_time, delta=delta, B_event=B_event, Z_event=Z_event,
        jump_times=jump_times, B_jump=B_jump, at_risk=at_risk, Z_jump=Z_jump,
        event_jump=event_jump, d=d,
        visit_counts=np.array([s.n_visits for s in subjects], dtype=int),
    )


def _bincount_rows(idx, values, n):
    """Row-wise ``np.add.at`` for a 2-D ``values`` array."""
    if values.ndim == 1:
        return np.bincount(idx, weights=values, minlength=n)
    out = np.empty((n, values.shape[1]))
    for c in range(values.shape[1]):
        out[:, c] = np.bincount(idx, weights=values[:, c], minlength=n)
    return out


def cell_residuals(data: CompiledData, params: ParameterSet) -> np.ndarray:
    """``Y - X beta0_j - b(t)^T theta beta1_j`` for every observed cell."""
    r = data.cell_y - (data.cell_B @ params.theta) * params.beta1[data.cell_marker]
    for j, idx in enumerate(data.marker_cells):
        if data.p[j]:
            r[idx] -= data.marker_X[j] @ params.beta0[j]
    return r


@dataclass(eq=False)
class Integrand:
    """Pieces of the log complete-data density that the M-step reuses."""

    log_f: np.ndarray        # (n, G) log f(Y, T, Delta | alpha_g)
    resid: np.ndarray        # (N,) residual at alpha = 0
    a: np.ndarray            # (N, k) Theta^T b(t) per cell
    F: np.ndarray            # (U, k) Theta^T b(t_u)
    lin0: np.ndarray         # (n, U) Z eta + gamma b^T theta at the jump times
    link: np.ndarray         # (U, G) gamma * Theta^T b(t_u) . alpha_g


def _check_params(params: ParameterSet, data: CompiledData):
    if params.J != data.J:
        raise ValueError("parameter/data biomarker count mismatch")
    if params.eta.size != data.r:
        raise ValueError("parameter/data survival covariate mismatch")
    if np.any(~(params.D > 0)):
        raise InvalidVariance(f"random-effect variances must be positive, got {params.D}")
    if np.any(~(params.sigma2 > 0)):
        raise InvalidVariance(f"residual variances must be positive, got {params.sigma2}")
    if params.hazard.size != data.U or not np.array_equal(params.hazard.jump_times,
                                                          data.jump_times):
        raise ValueError("hazard jump times differ from the compiled jump times")


def log_integrand(data: CompiledData, params: ParameterSet, alpha: np.ndarray,
                  survival: str = "event") -> Integrand:
    """Log density of the observed data given each random-effect node.

    ``survival='event'`` uses the hazard density ``lambda^Delta S(T)``;
    ``'survivor'`` keeps only ``S(T)`` (the subject is known alive at T);
    ``'none'`` drops the survival factor.
    """
    _check_params(params, data)
    n = data.n
    G = alpha.shape[0]
    inv_s2 = 1.0 / params.sigma2
    b1 = params.beta1

    resid = cell_residuals(data, params)
    a = data.cell_B @ params.Theta
    w = inv_s2[data.cell_marker]
    bw = b1[data.cell_marker]
    log_f = np.zeros((n, G))
    if data.n_cells:
        s0 = np.bincount(data.cell_subject, weights=resid * resid * w, minlength=n)
        const = np.bincount(data.cell_subject,
                            weights=-0.5 * np.log(2.0 * np.pi * params.sigma2[data.cell_marker]),
                            minlength=n)
        s1 = _bincount_rows(data.cell_subject, a * (resid * bw * w)[:, None], n)
        k = alpha.shape[1]
        aa = (a[:, :, None] * a[:, None, :]).reshape(-1, k * k)
        S2 = _bincount_rows(data.cell_subject, aa * (bw * bw * w)[:, None], n)
        AA = (alpha[:, :, None] * alpha[:, None, :]).reshape(G, k * k)
        log_f += (const - 0.5 * s0)[:, None] + s1 @ alpha.T - 0.5 * (S2 @ AA.T)

    F = data.B_jump @ params.Theta
    link = params.gamma * (F @ alpha.T)
    lin0 = np.zeros((n, data.U))
    if data.U:
        lin0 = params.gamma * (data.B_jump @ params.theta)[None, :]
        if data.r:
            lin0 = lin0 + data.Z_jump @ params.eta
    if survival != "none":
        if data.U:
            with np.errstate(over="ignore"):
                W = data.at_risk * params.hazard.increments[None, :] * np.exp(lin0)
                H = W @ np.exp(link)
            if not np.all(np.isfinite(H)):
                H = _log_space_cumhaz(data, params.hazard.increments, lin0, link)
            log_f -= H
        if survival == "event":
            ev = np.nonzero(data.delta == 1)[0]
            if ev.size:
                lam = np.zeros(ev.size)
                ok = data.event_jump[ev] >= 0
                lam[ok] = params.hazard.increments[data.event_jump[ev][ok]]
                with np.errstate(divide="ignore"):
                    loglam = np.log(lam)
                eta_part = data.Z_event[ev] @ params.eta if data.r else 0.0
                fixed = loglam + eta_part + params.gamma * (data.B_event[ev] @ params.theta)
                rnd = params.gamma * ((data.B_event[ev] @ params.Theta) @ alpha.T)
                log_f[ev] += fixed[:, None] + rnd
    return Integrand(log_f=log_f, resid=resid, a=a, F=F, lin0=lin0, link=link)


def _log_space_cumhaz(data, increments, lin0, link):
    """Overflow-safe ``sum_u R lambda exp(lin0 + link)`` per (subject, node)."""
    with np.errstate(divide="ignore"):
        logW = np.log(data.at_risk) + np.log(increments)[None, :] + lin0
    out = np.empty((data.n, link.shape[1]))
    for i in range(data.n):
        out[i] = np.exp(logsumexp(logW[i][:, None] + link, axis=0))
    return out


@dataclass(eq=False)
class PosteriorBatch:
    """Discrete posterior of every subject's random effects on the quadrature nodes.

    ``weights[i, g]`` is the normalized posterior mass of node ``alpha[g]``.
    """

    data: CompiledData
    params: ParameterSet
    alpha: np.ndarray
    weights: np.ndarray
    loglik_i: np.ndarray
    integrand: Integrand

    def __post_init__(self):
        self._cache = {}

    @property
    def loglik(self) -> float:
        return float(np.sum(self.loglik_i))

    @property
    def e_alpha(self) -> np.ndarray:
        if "m" not in self._cache:
            self._cache["m"] = self.weights @ self.alpha
        return self._cache["m"]

    @property
    def e_alpha_outer(self) -> np.ndarray:
        if "M2" not in self._cache:
            G, k = self.alpha.shape
            AA = (self.alpha[:, :, None] * self.alpha[:, None, :]).reshape(G, k * k)
            self._cache["M2"] = (self.weights @ AA).reshape(-1, k, k)
        return self._cache["M2"]

    def expect(self, h: Callable) -> np.ndarray:
        """``E[h(alpha)]`` per subject; ``h`` maps a ``(G, k)`` node array to ``(G, ...)``."""
        vals = np.asarray(h(self.alpha), dtype=float)
        return np.tensordot(self.weights, vals, axes=(1, 0))

    def exp_link(self, power=None) -> np.ndarray:
        """``E[exp(gamma b(t_u)^T Theta alpha) g(alpha)]`` per subject and jump time.

        ``power`` selects ``g``: None gives 1, an int ``w`` gives ``alpha_w``,
        ``(w, 2)`` gives ``alpha_w^2``, ``'link'`` gives the random part of
        the latent process ``F_u . alpha`` and ``'link2'`` its square.
        """
        key = ("exp_link", power)
        if key in self._cache:
            return self._cache[key]
        if "expL" not in self._cache:
            self._cache["expL"] = np.exp(self.integrand.link)
        E = self._cache["expL"]
        if power in ("link", "link2"):
            L = self.integrand.F @ self.alpha.T
            out = self.weights @ (E * (L if power == "link" else L * L)).T
        else:
            if power is None:
                W = self.weights
            elif isinstance(power, tuple):
                W = self.weights * self.alpha[None, :, power[0]] ** power[1]
            else:
                W = self.weights * self.alpha[None, :, int(power)]
            out = W @ E.T
        self._cache[key] = out
        return out

    def summary(self, i: int) -> "PosteriorSummary":
        return _subject_summary(self, i)

    def summaries(self) -> list:
        return [_subject_summary(self, i) for i in range(self.data.n)]


def posterior(data: CompiledData, params: ParameterSet, rule: GaussHermiteRule,
              survival: str = "event") -> PosteriorBatch:
    """Quadrature posterior for every subject in ``data``."""
    _check_params(params, data)
    k = params.k
    x, logw = rule.grid(k)
    alpha = x * np.sqrt(2.0 * params.D)[None, :]
    integ = log_integrand(data, params, alpha, survival=survival)
    lw = integ.log_f + logw[None, :]
    lw = np.where(np.isnan(lw), -np.inf, lw)
    mx = np.max(lw, axis=1, keepdims=True) if data.n else np.zeros((0, 1))
    bad = ~np.isfinite(mx[:, 0])
    if np.any(bad):
        ids = [data.subjects[i].id for i in np.nonzero(bad)[0][:3]]
        raise DegenerateLikelihood(f"non-finite density at every node for subjects {ids}")
    p = np.exp(lw - mx)
    tot = p.sum(axis=1, keepdims=True)
    weights = p / tot
    loglik_i = mx[:, 0] + np.log(tot[:, 0])
    return PosteriorBatch(data=data, params=params, alpha=alpha, weights=weights,
                          loglik_i=loglik_i, integrand=integ)


@dataclass(eq=False)
class PosteriorSummary:
    """One subject's posterior expectations.

    ``e_exp_link[u]`` is ``E[exp(gamma b(t_u)^T Theta alpha)]`` at
    ``needed_times[u]``; ``e_resid_sq`` is ``n_i x J`` with NaN for unobserved
    cells.
    """

    id: str
    e_alpha: np.ndarray
    e_alpha_outer: np.ndarray
    needed_times: np.ndarray
    e_exp_link: np.ndarray
    e_resid_sq: np.ndarray
    nodes: np.ndarray = field(repr=False)
    node_weights: np.ndarray = field(repr=False)
    params: ParameterSet = field(repr=False)
    basis: OrthoBasis = field(repr=False)

    @property
    def covariance(self) -> np.ndarray:
        return self.e_alpha_outer - np.outer(self.e_alpha, self.e_alpha)

    def expect(self, h: Callable):
        vals = np.asarray(h(self.nodes), dtype=float)
        return np.tensordot(self.node_weights, vals, axes=(0, 0))

    def exp_link(self, t) -> np.ndarray:
        """``E[exp(gamma b(t)^T Theta alpha)]`` at arbitrary times in the basis domain."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        L = self.params.gamma * (self.basis(t) @ self.params.Theta) @ self.nodes.T
        return np.exp(L) @ self.node_weights


def _subject_summary(batch: PosteriorBatch, i: int) -> PosteriorSummary:
    data, params = batch.data, batch.params
    w = batch.weights[i]
    m = w @ batch.alpha
    M2 = (batch.alpha * w[:, None]).T @ batch.alpha
    keep = data.at_risk[i] > 0
    eexp = (np.exp(batch.integrand.link[keep]) @ w) if data.U else np.zeros(0)
    s = data.subjects[i]
    er = np.full((s.n_visits, data.J), np.nan)
    cells = np.nonzero(data.cell_subject == i)[0]
    if cells.size:
        r = batch.integrand.resid[cells]
        bw = params.beta1[data.cell_marker[cells]]
        a = batch.integrand.a[cells]
        val = r * r - 2.0 * r * bw * (a @ m) + bw * bw * np.einsum("ck,kl,cl->c", a, M2, a)
        er[data.cell_visit[cells], data.cell_marker[cells]] = val
    return PosteriorSummary(id=s.id, e_alpha=m, e_alpha_outer=M2,
                            needed_times=data.jump_times[keep], e_exp_link=eexp,
                            e_resid_sq=er, nodes=batch.alpha, node_weights=w.copy(),
                            params=params, basis=data.basis)


def _single(subject, params, basis):
    return compile_data([subject], basis, jump_times=params.hazard.jump_times)


def posterior_expectation(subject: SubjectRecord, params: ParameterSet, basis: OrthoBasis,
                          rule: GaussHermiteRule, h: Callable):
    """``E[h(alpha) | Y, T, Delta]`` for one subject."""
    batch = posterior(_single(subject, params, basis), params, rule)
    return batch.expect(h)[0]


def compute_posterior_summary(subject: SubjectRecord, params: ParameterSet, basis: OrthoBasis,
                              rule: GaussHermiteRule, needed_times=None) -> PosteriorSummary:
    """All posterior moments the M-step consumes for one subject.

    ``needed_times`` must be hazard jump times; by default every jump time at
    or before the subject's follow-up time is used.
    """
    batch = posterior(_single(subject, params, basis), params, rule)
    summ = batch.summary(0)
    if needed_times is not None:
        needed = np.asarray(needed_times, dtype=float)
        if not np.all(np.isin(needed, params.hazard.jump_times)):
            raise OutOfDomain("needed_times must be hazard jump times")
        summ.e_exp_link = summ.exp_link(needed) if needed.size else np.zeros(0)
        summ.needed_times = needed
    return summ
