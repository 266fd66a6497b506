"""Dynamic prediction of event probabilities from a biomarker history."""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import ParameterSet, SubjectRecord
from .errors import EmptyRiskSet
from .quadrature import GaussHermiteRule, compile_data, gauss_hermite, posterior
from .spline import OrthoBasis


class ExtrapolationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PredictionQuery:
    """Predict ``P(T <= s + t | T > s, history up to s)``.

    ``subject_history`` must hold only visits at or before ``s``; use
    :meth:`from_subject` to truncate a full record.
    """

    subject_history: SubjectRecord
    s: float
    t: float

    def __post_init__(self):
        if not (self.s >= 0 and self.t >= 0):
            raise ValueError("landmark s and horizon t must be non-negative")
        h = self.subject_history
        if h.n_visits and h.visit_times[-1] > self.s:
            raise ValueError("history has visits after the landmark time")

    @classmethod
    def from_subject(cls, subject: SubjectRecord, s: float, t: float) -> "PredictionQuery":
        return cls(subject.truncated(s), float(s), float(t))


def conditional_survival(history: SubjectRecord, params: ParameterSet, basis: OrthoBasis,
                         rule: GaussHermiteRule, s: float, horizons) -> np.ndarray:
    """``S(s + h | T > s, Y^(s))`` for every horizon ``h`` in ``horizons``.

    The random-effect posterior weighs each node by ``S(s | alpha)`` times
    the biomarker likelihood of the history.
    """
    horizons = np.atleast_1d(np.asarray(horizons, dtype=float))
    jt = params.hazard.jump_times
    if jt.size and s > jt[-1]:
        warnings.warn(f"landmark {s} lies beyond the last hazard jump {jt[-1]}; "
                      "survival is flat there", ExtrapolationWarning, stacklevel=2)
    hist = history.truncated(s)
    data = compile_data([hist], basis, jump_times=jt)
    post = posterior(data, params, rule, survival="survivor")
    w = post.weights[0]

    future = np.nonzero(jt > s)[0]
    if future.size == 0:
        return np.ones(horizons.size)
    tu = jt[future]
    lin = params.gamma * (data.B_jump[future] @ params.theta)
    if data.r:
        lin = lin + hist.z_at(tu) @ params.eta
    link = params.gamma * (data.B_jump[future] @ params.Theta) @ post.alpha.T
    with np.errstate(over="ignore"):
        inc = (params.hazard.increments[future] * np.exp(lin))[:, None] * np.exp(link)
    cum = np.cumsum(inc, axis=0)  # U_future x G
    pos = np.searchsorted(tu, s + horizons, side="right")
    out = np.empty(horizons.size)
    for m, p_ in enumerate(pos):
        if p_ == 0:
            out[m] = 1.0
            continue
        dH = cum[p_ - 1]
        out[m] = 1.0 - float(w @ -np.expm1(-dH))
    return np.clip(out, 0.0, 1.0)


def conditional_event_probability(query: PredictionQuery, params: ParameterSet,
                                  basis: OrthoBasis, rule: GaussHermiteRule | None = None) -> float:
    """Probability of an event in ``(s, s + t]`` given survival to ``s`` and the history."""
    rule = rule or gauss_hermite(20)
    if query.t == 0:
        return 0.0
    S = conditional_survival(query.subject_history, params, basis, rule, query.s, [query.t])
    return float(np.clip(1.0 - S[0], 0.0, 1.0))


def error_contribution(event_time: float, event_indicator: int, s: float, t: float,
                       S_horizon: float, S_at_event: float | None = None) -> float:
    """One subject's term of the censoring-weighted prediction error.

    ``S_horizon`` is the predicted ``S(s + t | ...)`` and ``S_at_event`` the
    predicted ``S(T | ...)`` at the subject's own follow-up time (needed only
    when the subject is censored inside the window).
    """
    if event_time > s + t:
        return abs(1.0 - S_horizon)
    if event_indicator == 1:
        return abs(0.0 - S_horizon)
    if S_at_event is None:
        raise ValueError("censored-in-window subject needs S at its follow-up time")
    ratio = S_horizon / S_at_event if S_at_event > 0 else 1.0
    return abs(1.0 - S_horizon) * ratio + abs(0.0 - S_horizon) * (1.0 - ratio)


def _subject_error(subject, params, basis, rule, s, t):
    hist = subject.truncated(s)
    censored_inside = subject.event_indicator == 0 and subject.event_time <= s + t
    horizons = [t, subject.event_time - s] if censored_inside else [t]
    S = conditional_survival(hist, params, basis, rule, s, horizons)
    return error_contribution(subject.event_time, subject.event_indicator, s, t, S[0],
                              S[1] if censored_inside else None)


def prediction_error(dataset: Sequence[SubjectRecord], params: ParameterSet, basis: OrthoBasis,
                     rule: GaussHermiteRule | None, s: float, t: float,
                     n_threads: int = 1) -> tuple:
    """Average prediction error over the risk set at ``s``.

    Returns ``(err, n_risk)``.
    """
    rule = rule or gauss_hermite(20)
    risk = [subj for subj in dataset if subj.event_time > s]
    if not risk:
        raise EmptyRiskSet(f"no subject at risk at s = {s}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExtrapolationWarning)
        if n_threads > 1:
            with ThreadPoolExecutor(n_threads) as pool:
                terms = list(pool.map(lambda x: _subject_error(x, params, basis, rule, s, t), risk))
        else:
            terms = [_subject_error(x, params, basis, rule, s, t) for x in risk]
    return float(np.mean(terms)), len(risk)
