"""Simulate a small study, fit the joint model, and predict for one subject.

Runs in well under a minute:  python3 demos/quickstart.py
"""

import numpy as np

from latentjm import (
    FitConfig,
    PredictionQuery,
    conditional_event_probability,
    fit,
    gauss_hermite,
    infer_spec,
    paper_scenario,
    reported,
    simulate,
)
from latentjm.simulation import event_rate, median_visits, with_overrides
from latentjm.spline import build_basis

# Model 1 design at a smaller sample size
scenario = with_overrides(paper_scenario("model1"), n=120)
subjects = simulate(scenario, seed=7)
print(f"{len(subjects)} subjects, event rate {event_rate(subjects):.2f}, "
      f"median visits {median_visits(subjects):g}")

spec = infer_spec(subjects, k=2, basis_spec=scenario.basis)
res = fit(subjects, spec, FitConfig(max_iters=300))
print(f"converged={res.converged} ({res.reason}) after {res.n_iters} iterations")
print(f"loglik {res.loglik:.2f}, AIC {res.aic:.2f}, PC variance shares "
      f"{np.round(res.pc_variance_proportions, 3)}")

truth = scenario.truth()
for name, value in reported(res.params).items():
    print(f"  {name:>9}: {value:8.4f}   (truth {truth.get(name, float('nan')):.4f})")

# dynamic prediction: use visits up to s = 1.5, predict an event within t = 1, 2, 3
basis = build_basis(spec.basis)
rule = gauss_hermite(20)
someone = next(s for s in subjects if s.event_time > 1.5)
for t in (1.0, 2.0, 3.0):
    q = PredictionQuery.from_subject(someone, 1.5, t)
    p = conditional_event_probability(q, res.params, basis, rule)
    print(f"P(event in (1.5, {1.5 + t:.1f}] | history of {someone.id}) = {p:.3f}")
