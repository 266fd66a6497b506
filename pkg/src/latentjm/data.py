"""Subjects, model specification and parameters; CSV/JSON input and output."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DuplicateCell,
    FollowupAfterEvent,
    OrphanLongitudinal,
    ParseError,
)
from .spline import BasisSpec, OrthoBasis


@dataclass(frozen=True)
class ModelSpec:
    """Dimensions of the joint model.

    ``p`` holds the longitudinal covariate dimension of every biomarker and
    ``r`` the survival covariate dimension.
    """

    J: int
    k: int
    basis: BasisSpec
    p: tuple = ()
    r: int = 0

    def __post_init__(self):
        p = tuple(int(v) for v in self.p) if len(self.p) else (0,) * self.J
        object.__setattr__(self, "p", p)
        if self.J < 1:
            raise ValueError("J must be at least 1")
        if len(p) != self.J:
            raise ValueError("p must have one entry per biomarker")
        if any(v < 0 for v in p) or self.r < 0:
            raise ValueError("covariate dimensions must be non-negative")
        if not 1 <= self.k <= self.basis.q:
            raise ValueError(f"rank k={self.k} must lie in [1, q={self.basis.q}]")

    @property
    def q(self) -> int:
        return self.basis.q

    def to_dict(self) -> dict:
        return {"J": self.J, "k": self.k, "p": list(self.p), "r": self.r,
                "basis": self.basis.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(J=int(d["J"]), k=int(d["k"]), basis=BasisSpec.from_dict(d["basis"]),
                   p=tuple(d.get("p", ())), r=int(d.get("r", 0)))


def _rows(a, n):
    a = np.asarray(a, dtype=float)
    if a.ndim == 2 and a.shape[0] == n:
        return a
    return a.reshape(n, -1) if n else a.reshape(0, 0)


@dataclass(frozen=True, eq=False)
class SubjectRecord:
    """One subject's longitudinal and survival data.

    ``y`` is ``n_i x J`` with NaN marking unobserved cells; ``x[j]`` is the
    ``n_i x p_j`` covariate matrix of biomarker ``j``.  The survival covariate
    is a right-continuous step function: value ``z_values[m]`` holds on
    ``[z_times[m], z_times[m + 1])`` and ``z_times[0]`` is 0.
    """

    id: str
    visit_times: np.ndarray
    y: np.ndarray
    x: tuple
    z_times: np.ndarray
    z_values: np.ndarray
    event_time: float
    event_indicator: int

    def __post_init__(self):
        t = np.asarray(self.visit_times, dtype=float).reshape(-1)
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 1:
            y = y.reshape(t.size, -1) if t.size else y.reshape(0, max(len(self.x), 1))
        x = tuple(_rows(xj, t.size) for xj in self.x)
        zt = np.atleast_1d(np.asarray(self.z_times, dtype=float))
        zv = np.asarray(self.z_values, dtype=float).reshape(zt.size, -1)
        object.__setattr__(self, "visit_times", t)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z_times", zt)
        object.__setattr__(self, "z_values", zv)
        object.__setattr__(self, "event_time", float(self.event_time))
        object.__setattr__(self, "event_indicator", int(self.event_indicator))
        if self.event_indicator not in (0, 1):
            raise ValueError("event indicator must be 0 or 1")
        if not self.event_time > 0:
            raise ValueError("event time must be positive")
        if y.shape[0] != t.size or len(x) != y.shape[1]:
            raise ValueError("inconsistent longitudinal shapes")
        if np.any(np.diff(t) < 0):
            raise ValueError("visit times must be nondecreasing")
        if t.size and t[-1] > self.event_time:
            raise FollowupAfterEvent(f"subject {self.id}: visit after event time")
        if zt[0] != 0.0 or np.any(np.diff(zt) <= 0):
            raise ValueError("z_times must start at 0 and increase")

    @classmethod
    def fixed(cls, id, visit_times, y, x, z, event_time, event_indicator) -> "SubjectRecord":
        """Subject with a time-fixed survival covariate vector ``z``."""
        z = np.atleast_1d(np.asarray(z, dtype=float))
        return cls(id=str(id), visit_times=visit_times, y=y, x=tuple(x), z_times=np.zeros(1),
                   z_values=z.reshape(1, -1), event_time=event_time,
                   event_indicator=event_indicator)

    @property
    def observed(self) -> np.ndarray:
        return np.isfinite(self.y)

    @property
    def n_visits(self) -> int:
        return self.visit_times.size

    @property
    def J(self) -> int:
        return self.y.shape[1]

    @property
    def r(self) -> int:
        return self.z_values.shape[1]

    def z_at(self, t) -> np.ndarray:
        """Covariate value at time(s) ``t``; shape ``t.shape + (r,)``."""
        idx = np.searchsorted(self.z_times, np.asarray(t, dtype=float), side="right") - 1
        return self.z_values[np.maximum(idx, 0)]

    def truncated(self, s: float) -> "SubjectRecord":
        """History up to landmark ``s``: visits with ``t <= s``, known alive at ``s``."""
        keep = self.visit_times <= s
        return SubjectRecord(id=self.id, visit_times=self.visit_times[keep], y=self.y[keep],
                             x=tuple(xj[keep] for xj in self.x), z_times=self.z_times,
                             z_values=self.z_values,
                             event_time=max(float(s), np.finfo(float).tiny), event_indicator=0)

    def relabeled(self, new_id) -> "SubjectRecord":
        return replace(self, id=str(new_id))


@dataclass(frozen=True, eq=False)
class StepHazard:
    """Baseline cumulative hazard with point masses at ``jump_times``."""

    jump_times: np.ndarray
    increments: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.jump_times, dtype=float).reshape(-1)
        inc = np.asarray(self.increments, dtype=float).reshape(-1)
        if t.size != inc.size:
            raise ValueError("jump_times and increments differ in length")
        if np.any(np.diff(t) <= 0):
            raise ValueError("jump times must be strictly increasing")
        if np.any(inc < 0):
            raise ValueError("hazard increments must be non-negative")
        object.__setattr__(self, "jump_times", t)
        object.__setattr__(self, "increments", inc)

    def cumulative(self, t) -> np.ndarray:
        """``Lambda(t) = sum of increments at jump times <= t``."""
        cum = np.concatenate([[0.0], np.cumsum(self.increments)])
        return cum[np.searchsorted(self.jump_times, np.asarray(t, dtype=float), side="right")]

    @property
    def size(self) -> int:
        return self.jump_times.size


def _vec(a):
    return np.atleast_1d(np.asarray(a, dtype=float)).copy()


@dataclass(frozen=True, eq=False)
class ParameterSet:
    """All model parameters: finite-dimensional part plus the step hazard."""

    beta0: tuple
    beta1: np.ndarray
    sigma2: np.ndarray
    theta: np.ndarray
    Theta: np.ndarray
    D: np.ndarray
    eta: np.ndarray
    gamma: float
    hazard: StepHazard

    def __post_init__(self):
        object.__setattr__(self, "beta0", tuple(np.asarray(b, dtype=float).reshape(-1).copy()
                                                for b in self.beta0))
        for name in ("beta1", "sigma2", "theta", "D", "eta"):
            object.__setattr__(self, name, _vec(getattr(self, name)))
        Theta = np.asarray(self.Theta, dtype=float)
        if Theta.ndim == 1:
            Theta = Theta.reshape(-1, 1)
        object.__setattr__(self, "Theta", Theta.copy())
        object.__setattr__(self, "gamma", float(self.gamma))
        if self.beta1.size == 0 or self.beta1[0] != 1.0:
            raise ValueError("the first factor loading is fixed at 1")

    @property
    def J(self) -> int:
        return self.beta1.size

    @property
    def k(self) -> int:
        return self.Theta.shape[1]

    @property
    def q(self) -> int:
        return self.Theta.shape[0]

    def replace(self, **changes) -> "ParameterSet":
        return replace(self, **changes)

    # flat view of the finite-dimensional parameters; used for numerical
    # gradients, bootstrap aggregation and parameter counting
    def phi_names(self) -> list:
        names = []
        for j, b in enumerate(self.beta0):
            names += [f"beta0_{j + 1}_{m + 1}" for m in range(b.size)]
        names += [f"beta1_{j + 1}" for j in range(1, self.J)]
        names += [f"sigma2_{j + 1}" for j in range(self.J)]
        names += [f"theta_{m + 1}" for m in range(self.q)]
        names += [f"Theta_{m + 1}_{w + 1}" for m in range(self.q) for w in range(self.k)]
        names += [f"D_{w + 1}" for w in range(self.k)]
        names += [f"eta_{m + 1}" for m in range(self.eta.size)]
        names.append("gamma")
        return names

    def phi_vector(self) -> np.ndarray:
        parts = list(self.beta0) + [self.beta1[1:], self.sigma2, self.theta,
                                    self.Theta.ravel(), self.D, self.eta, [self.gamma]]
        return np.concatenate([np.asarray(p, dtype=float).ravel() for p in parts])

    def with_phi(self, vec) -> "ParameterSet":
        vec = np.asarray(vec, dtype=float)
        pos = 0

        def take(n):
            nonlocal pos
            out = vec[pos:pos + n]
            pos += n
            return out.copy()

        beta0 = tuple(take(b.size) for b in self.beta0)
        beta1 = np.concatenate([[1.0], take(self.J - 1)])
        sigma2 = take(self.J)
        theta = take(self.q)
        Theta = take(self.q * self.k).reshape(self.q, self.k)
        D = take(self.k)
        eta = take(self.eta.size)
        gamma = float(take(1)[0])
        return replace(self, beta0=beta0, beta1=beta1, sigma2=sigma2, theta=theta, Theta=Theta,
                       D=D, eta=eta, gamma=gamma)

    @property
    def n_params(self) -> int:
        return self.phi_vector().size

    def to_dict(self) -> dict:
        return {
            "beta0": [b.tolist() for b in self.beta0],
            "beta1": self.beta1.tolist(),
            "sigma2": self.sigma2.tolist(),
            "theta": self.theta.tolist(),
            "Theta": self.Theta.tolist(),
            "D": self.D.tolist(),
            "eta": self.eta.tolist(),
            "gamma": self.gamma,
            "hazard": {"jump_times": self.hazard.jump_times.tolist(),
                       "increments": self.hazard.increments.tolist()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParameterSet":
        Theta = np.asarray(d["Theta"], dtype=float)
        return cls(beta0=tuple(np.asarray(b, dtype=float) for b in d["beta0"]),
                   beta1=d["beta1"], sigma2=d["sigma2"], theta=d["theta"],
                   Theta=Theta.reshape(len(d["theta"]), -1), D=d["D"],
                   eta=np.asarray(d.get("eta", []), dtype=float), gamma=d["gamma"],
                   hazard=StepHazard(d["hazard"]["jump_times"], d["hazard"]["increments"]))


def beta0_names(sizes) -> list:
    """Labels of the regression coefficients: ``beta0_j`` or ``beta0_j_m``."""
    out = []
    for j, size in enumerate(sizes):
        out += [f"beta0_{j + 1}"] if size == 1 else [f"beta0_{j + 1}_{m + 1}" for m in range(size)]
    return out


def reported(params: ParameterSet) -> dict:
    """The interpretable parameters (everything except the spline coefficients)."""
    out = dict(zip(beta0_names([b.size for b in params.beta0]),
                   np.concatenate(params.beta0).tolist()))
    out.update({f"beta1_{j + 1}": float(params.beta1[j]) for j in range(1, params.J)})
    out.update({f"sigma2_{j + 1}": float(v) for j, v in enumerate(params.sigma2)})
    out.update({f"D_{w + 1}": float(v) for w, v in enumerate(params.D)})
    out.update({f"eta_{m + 1}": float(v) for m, v in enumerate(params.eta)})
    out["gamma"] = params.gamma
    return out


def save_params(params: ParameterSet, path, extra: dict | None = None):
    payload = {"params": params.to_dict()}
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2))


def load_params(path) -> ParameterSet:
    d = json.loads(Path(path).read_text())
    return ParameterSet.from_dict(d["params"] if "params" in d else d)


def latent_trajectory(params: ParameterSet, basis: OrthoBasis, alpha, t):
    """Subject latent process ``b(t)^T theta + b(t)^T Theta alpha``."""
    b = basis(t)
    return b @ params.theta + b @ (params.Theta @ np.asarray(alpha, dtype=float))


# --- CSV ingestion -------------------------------------------------------------

def _num(value, path, row, name):
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise ParseError(f"non-numeric {name} {value!r}", path, row) from None
    if math.isnan(out):
        raise ParseError(f"missing {name}", path, row)
    return out


def _read_rows(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        fields = [f.strip() for f in (reader.fieldnames or [])]
        rows = [{(k or "").strip(): (v.strip() if isinstance(v, str) else v)
                 for k, v in r.items()} for r in reader]
    return fields, rows


def load_dataset(longitudinal_file, survival_file, spec: ModelSpec) -> list:
    """Read the long-format longitudinal CSV and the survival CSV.

    Row numbers in errors count the header as row 1.
    """
    _, srows = _read_rows(survival_file)
    lfields, lrows = _read_rows(longitudinal_file)

    surv = {}
    order = []
    for n, row in enumerate(srows, start=2):
        sid = row.get("id")
        if sid is None or sid == "":
            raise ParseError("missing id", survival_file, n)
        if sid in surv:
            raise DuplicateCell(f"duplicate survival id {sid!r}", survival_file, n)
        t = _num(row.get("event_time"), survival_file, n, "event_time")
        dv = _num(row.get("event_indicator"), survival_file, n, "event_indicator")
        if dv not in (0.0, 1.0):
            raise ParseError(f"event_indicator must be 0 or 1, got {dv}", survival_file, n)
        if not t > 0:
            raise ParseError("event_time must be positive", survival_file, n)
        z = [_num(row.get(f"z_{m + 1}"), survival_file, n, f"z_{m + 1}") for m in range(spec.r)]
        surv[sid] = (t, int(dv), np.asarray(z, dtype=float))
        order.append(sid)

    cells = {}
    for n, row in enumerate(lrows, start=2):
        sid = row.get("id")
        if sid not in surv:
            raise OrphanLongitudinal(f"id {sid!r} absent from survival file",
                                     longitudinal_file, n)
        t = _num(row.get("time"), longitudinal_file, n, "time")
        jraw = _num(row.get("biomarker_index"), longitudinal_file, n, "biomarker_index")
        if jraw != int(jraw) or not 1 <= jraw <= spec.J:
            raise ParseError(f"biomarker_index {jraw} outside 1..{spec.J}", longitudinal_file, n)
        j = int(jraw) - 1
        value = _num(row.get("value"), longitudinal_file, n, "value")
        xs = [_num(row.get(f"x_{m + 1}"), longitudinal_file, n, f"x_{m + 1}")
              for m in range(spec.p[j])]
        if t > surv[sid][0]:
            raise FollowupAfterEvent(f"visit at {t} after event time {surv[sid][0]} for {sid!r}",
                                     longitudinal_file, n)
        if t < 0:
            raise ParseError("negative visit time", longitudinal_file, n)
        key = (t, j)
        per = cells.setdefault(sid, {})
        if key in per:
            raise DuplicateCell(f"duplicate cell (id={sid!r}, time={t}, biomarker={j + 1})",
                                longitudinal_file, n)
        per[key] = (value, np.asarray(xs, dtype=float))

    subjects = []
    for sid in order:
        t_event, delta, z = surv[sid]
        per = cells.get(sid, {})
        times = np.array(sorted({key[0] for key in per}), dtype=float)
        y = np.full((times.size, spec.J), np.nan)
        x = [np.full((times.size, spec.p[j]), np.nan) for j in range(spec.J)]
        pos = {t: u for u, t in enumerate(times)}
        for (t, j), (value, xs) in per.items():
            y[pos[t], j] = value
            x[j][pos[t]] = xs
        subjects.append(SubjectRecord.fixed(sid, times, y, x, z, t_event, delta))
    return subjects


def _fmt(v):
    return repr(float(v))


def write_dataset(subjects: Sequence[SubjectRecord], longitudinal_file, survival_file):
    """Write subjects in the CSV layout read by :func:`load_dataset`.

    Time-dependent survival covariates are written at their baseline value.
    """
    subjects = list(subjects)
    J = subjects[0].J if subjects else 1
    pmax = max((xj.shape[1] for s in subjects for xj in s.x), default=0)
    r = subjects[0].r if subjects else 0
    with Path(longitudinal_file).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "time", "biomarker_index", "value"] + [f"x_{m + 1}" for m in range(pmax)])
        for s in subjects:
            for u, t in enumerate(s.visit_times):
                for j in range(J):
                    if not np.isfinite(s.y[u, j]):
                        continue
                    xs = [_fmt(v) for v in s.x[j][u]]
                    xs += [""] * (pmax - len(xs))
                    w.writerow([s.id, _fmt(t), j + 1, _fmt(s.y[u, j])] + xs)
    with Path(survival_file).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "event_time", "event_indicator"] + [f"z_{m + 1}" for m in range(r)])
        for s in subjects:
            w.writerow([s.id, _fmt(s.event_time), s.event_indicator]
                       + [_fmt(v) for v in s.z_values[0]])


def infer_spec(subjects: Sequence[SubjectRecord], k: int, basis_spec: BasisSpec) -> ModelSpec:
    """Model dimensions read off a list of subjects."""
    s0 = subjects[0]
    return ModelSpec(J=s0.J, k=k, basis=basis_spec, p=tuple(xj.shape[1] for xj in s0.x), r=s0.r)
