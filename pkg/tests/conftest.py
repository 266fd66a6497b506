import sys

import numpy as np
import pytest
from hypothesis import settings

from latentjm.data import ParameterSet, StepHazard, SubjectRecord
from latentjm.quadrature import distinct_event_times
from latentjm.simulation import Scenario, project_curve, simulate
from latentjm.spline import BasisSpec, build_basis

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def small_scenario(n=60, J=2, k=1, gamma=0.3, n_knots=2, t_max=6.0, rate=0.1, r=0,
                   seed_curve=(1.0, -0.3)):
    spec = BasisSpec.evenly_spaced(n_knots, (0.0, t_max))
    basis = build_basis(spec)
    a, c = seed_curve
    theta = project_curve(basis, lambda t: a + c * np.log1p(t))
    Theta = np.eye(basis.q)[:, :k]
    cov = {"x": {"dist": "normal", "mean": 0.0, "sd": 1.0}}
    zcols = []
    for m in range(r):
        cov[f"z{m}"] = {"dist": "bernoulli", "p": 0.5}
        zcols.append(f"z{m}")
    return Scenario(
        name="toy", n=n, basis=spec, beta0=[[0.5]] + [[-0.3]] * (J - 1),
        beta1=[1.0] + [0.8] * (J - 1), sigma2=[0.5] * J, theta=theta.tolist(),
        Theta=Theta.tolist(), eta=[0.4] * r, gamma=gamma,
        random_effects={"law": "gaussian", "variances": [1.0 / (w + 1) for w in range(k)]},
        baseline_hazard={"breaks": [0.0], "rates": [rate]}, covariates=cov,
        x_columns=[["x"]] * J, z_columns=zcols, visit_spacing=0.5, t_max=t_max)


def params_for(scenario, subjects, increments=None):
    """Scenario truth as a ParameterSet with a flat hazard on the observed event times."""
    jt = distinct_event_times(subjects)
    inc = np.full(jt.size, 0.05) if increments is None else increments
    return ParameterSet(beta0=tuple(np.asarray(b, float) for b in scenario.beta0),
                        beta1=scenario.beta1, sigma2=scenario.sigma2, theta=scenario.theta,
                        Theta=np.asarray(scenario.Theta), D=scenario.D, eta=scenario.eta,
                        gamma=scenario.gamma, hazard=StepHazard(jt, inc))


@pytest.fixture(scope="session")
def toy_k1():
    sc = small_scenario(n=60, J=2, k=1)
    return sc, simulate(sc, 11)


@pytest.fixture(scope="session")
def toy_k2():
    sc = small_scenario(n=40, J=2, k=2, r=1)
    return sc, simulate(sc, 5)


def one_subject(times, y, x=None, z=(), event_time=5.0, delta=1, sid="a"):
    times = np.asarray(times, float)
    y = np.asarray(y, float)
    y = y.reshape(times.size, -1) if y.ndim == 1 else y
    J = y.shape[1]
    x = x if x is not None else [np.zeros((times.size, 0))] * J
    return SubjectRecord.fixed(sid, times, y, x, np.asarray(z, float), event_time, delta)


def pytest_terminal_summary(terminalreporter):
    acc = sys.modules.get("test_acceptance")
    if acc is not None and acc.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acc.RESULTS):
            terminalreporter.write_line(line)
