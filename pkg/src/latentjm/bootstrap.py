"""Nonparametric bootstrap over subjects."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import norm

from .data import ModelSpec, SubjectRecord, reported
from .em import FitConfig, FitResult, fit
from .errors import InsufficientReplicates, LatentJMError

log = logging.getLogger(__name__)

Z975 = 1.959963984540054
FAILURE_LIMIT = 0.2


class UnstableBootstrap(UserWarning):
    pass


def is_variance(name: str) -> bool:
    return name.startswith(("sigma2_", "D_"))


def resample(subjects: Sequence[SubjectRecord], rng) -> list:
    """Draw ``n`` subjects with replacement, giving every copy a fresh id."""
    idx = rng.integers(0, len(subjects), size=len(subjects))
    return [subjects[i].relabeled(f"b{m + 1}:{subjects[i].id}") for m, i in enumerate(idx)]


@dataclass
class BootstrapResult:
    names: list
    estimate: dict
    replicates: np.ndarray          # successful replicates x parameters
    se: dict
    ci: dict
    p_value: dict
    n_requested: int
    n_failed: int
    failures: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)

    @property
    def unstable(self) -> bool:
        return self.n_failed > FAILURE_LIMIT * self.n_requested

    def rows(self) -> list:
        out = []
        for c in self.names:
            lo, hi = self.ci[c]
            out.append({"parameter": c, "estimate": self.estimate[c], "se": self.se[c],
                        "ci_lower": lo, "ci_upper": hi, "p_value": self.p_value[c]})
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["parameter", "estimate", "se", "ci_lower",
                                               "ci_upper", "p_value"])
            w.writeheader()
            for r in self.rows():
                w.writerow({k: ("" if isinstance(v, float) and math.isnan(v) else v)
                            for k, v in r.items()})


def bootstrap_variance(replicates) -> np.ndarray:
    """``1/(B-1) sum (phi_b - mean)^2`` column-wise."""
    R = np.atleast_2d(np.asarray(replicates, dtype=float))
    if R.shape[0] < 2:
        raise InsufficientReplicates("at least two successful replicates are needed")
    return np.sum((R - R.mean(axis=0)) ** 2, axis=0) / (R.shape[0] - 1)


def wald_p(estimate: float, se: float) -> float:
    if se == 0.0:
        return 0.0 if estimate != 0.0 else 1.0
    return float(2.0 * norm.sf(abs(estimate / se)))


def summarize(names: Sequence[str], estimate: dict, replicates) -> tuple:
    """Standard errors, 95% intervals and Wald p-values from replicate estimates.

    Variance components get intervals on the log scale; their p-values are NaN.
    """
    R = np.atleast_2d(np.asarray(replicates, dtype=float))
    se_raw = np.sqrt(bootstrap_variance(R))
    se, ci, pv = {}, {}, {}
    for m, c in enumerate(names):
        est = float(estimate[c])
        se[c] = float(se_raw[m])
        if is_variance(c):
            if est <= 0 or np.any(R[:, m] <= 0):
                raise ValueError(f"non-positive variance estimate for {c}")
            s_log = math.sqrt(float(bootstrap_variance(np.log(R[:, m:m + 1]))[0]))
            ci[c] = (est * math.exp(-Z975 * s_log), est * math.exp(Z975 * s_log))
            pv[c] = math.nan
        else:
            ci[c] = (est - Z975 * se[c], est + Z975 * se[c])
            pv[c] = wald_p(est, se[c])
    return se, ci, pv


def bootstrap_inference(subjects: Sequence[SubjectRecord], spec: ModelSpec,
                        fit_config: FitConfig | None, B: int, seed: int,
                        point: FitResult | None = None, progress=None) -> BootstrapResult:
    """Refit ``B`` subject-level resamples and summarize the spread of the estimates."""
    if B < 2:
        raise InsufficientReplicates(f"B must be at least 2, got {B}")
    subjects = list(subjects)
    point = point or fit(subjects, spec, fit_config)
    estimate = reported(point.params)
    names = list(estimate)
    rows, failures = [], []
    for b, child in enumerate(np.random.SeedSequence(seed).spawn(B)):
        rng = np.random.default_rng(child)
        sample = resample(subjects, rng)
        try:
            res = fit(sample, spec, fit_config)
        except (LatentJMError, FloatingPointError, np.linalg.LinAlgError) as exc:
            log.warning("bootstrap replicate %d failed: %s", b, exc)
            failures.append((b, str(exc)))
            continue
        rep = reported(res.params)
        rows.append([rep[c] for c in names])
        if progress:
            progress(b, res)
    diagnostics = []
    if len(failures) > FAILURE_LIMIT * B:
        msg = f"{len(failures)} of {B} bootstrap fits failed"
        diagnostics.append(msg)
        warnings.warn(msg, UnstableBootstrap, stacklevel=2)
    R = np.array(rows, dtype=float).reshape(len(rows), len(names))
    se, ci, pv = summarize(names, estimate, R)
    return BootstrapResult(names=names, estimate=estimate, replicates=R, se=se, ci=ci,
                           p_value=pv, n_requested=B, n_failed=len(failures),
                           failures=failures, diagnostics=diagnostics)
