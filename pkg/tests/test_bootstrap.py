import math

import numpy as np
import pytest

from latentjm.bootstrap import (
    BootstrapResult,
    UnstableBootstrap,
    bootstrap_inference,
    bootstrap_variance,
    resample,
    summarize,
    wald_p,
)
from latentjm.data import infer_spec
from latentjm.em import FitConfig
from latentjm.errors import InsufficientReplicates
from latentjm.simulation import NoEventsWarning, paper_scenario, simulate

from conftest import small_scenario


def test_variance_formula():
    v = bootstrap_variance([[1.0], [3.0]])
    assert v[0] == 2.0
    se, ci, p = summarize(["beta0_1"], {"beta0_1": 2.0}, [[1.0], [3.0]])
    assert se["beta0_1"] == math.sqrt(2.0)
    lo, hi = ci["beta0_1"]
    assert lo == pytest.approx(2.0 - 1.959964 * math.sqrt(2), abs=1e-6)
    assert hi == pytest.approx(2.0 + 1.959964 * math.sqrt(2), abs=1e-6)


def test_identical_replicates_have_zero_se():
    R = np.tile([0.5, 1.2], (5, 1))
    se, ci, p = summarize(["gamma", "D_1"], {"gamma": 0.5, "D_1": 1.2}, R)
    assert se == {"gamma": 0.0, "D_1": 0.0}
    assert ci["D_1"] == (1.2, 1.2)
    assert p["gamma"] == 0.0


def test_log_scale_intervals_are_positive():
    rng = np.random.default_rng(0)
    R = np.exp(rng.normal(np.log(0.05), 1.5, size=(30, 1)))
    se, ci, p = summarize(["sigma2_1"], {"sigma2_1": 0.05}, R)
    lo, hi = ci["sigma2_1"]
    assert 0 < lo < 0.05 < hi
    assert math.isnan(p["sigma2_1"])
    # the symmetric interval would have gone negative here
    assert 0.05 - 1.96 * se["sigma2_1"] < 0


def test_wald():
    assert wald_p(1.96, 1.0) == pytest.approx(0.05, abs=1e-4)
    assert wald_p(0.0, 0.0) == 1.0


def test_too_few_replicates():
    with pytest.raises(InsufficientReplicates):
        bootstrap_variance([[1.0]])
    with pytest.raises(InsufficientReplicates):
        bootstrap_inference([], None, None, 1, 0)


def test_resample_preserves_n_and_relabels():
    sc = small_scenario(n=15)
    subs = simulate(sc, 0)
    out = resample(subs, np.random.default_rng(1))
    assert len(out) == len(subs)
    assert len({s.id for s in out}) == len(out)
    assert len({s.id.split(":", 1)[1] for s in out}) < len(out)  # duplicates drawn


@pytest.fixture(scope="module")
def small_boot():
    sc = small_scenario(n=40, J=2, k=1)
    subs = simulate(sc, 21)
    spec = infer_spec(subs, 1, sc.basis)
    cfg = FitConfig(max_iters=200)
    return subs, spec, cfg, bootstrap_inference(subs, spec, cfg, B=4, seed=9)


def test_bootstrap_runs_and_is_deterministic(small_boot, tmp_path):
    subs, spec, cfg, res = small_boot
    assert isinstance(res, BootstrapResult)
    assert res.n_requested == 4 and res.replicates.shape == (4 - res.n_failed, len(res.names))
    again = bootstrap_inference(subs, spec, cfg, B=4, seed=9)
    np.testing.assert_array_equal(again.replicates, res.replicates)
    for c in res.names:
        lo, hi = res.ci[c]
        assert lo <= res.estimate[c] <= hi
    res.write_csv(tmp_path / "b.csv")
    header = (tmp_path / "b.csv").read_text().splitlines()[0]
    assert header == "parameter,estimate,se,ci_lower,ci_upper,p_value"


def test_cloned_subject_gives_zero_se():
    sc = small_scenario(n=1, J=1, k=1, n_knots=1, rate=1e-6)
    with pytest.warns(NoEventsWarning):
        (one,) = simulate(sc, 4)
    assert one.n_visits == 13  # followed over the whole domain
    clones = [one.relabeled(f"c{i}") for i in range(12)]
    spec = infer_spec(clones, 1, sc.basis)
    res = bootstrap_inference(clones, spec, FitConfig(max_iters=30), B=3, seed=0)
    # every resample is the same dataset up to subject labels
    assert res.n_failed == 0
    assert all(v == 0.0 for v in res.se.values())


def test_unstable_warning(monkeypatch, small_boot):
    subs, spec, cfg, _ = small_boot
    import latentjm.bootstrap as bt
    from latentjm.errors import FitError

    calls = {"n": 0}
    real_fit = bt.fit

    def flaky(data, spec_, config=None):
        calls["n"] += 1
        if calls["n"] > 1 and calls["n"] % 2 == 0:
            raise FitError("synthetic failure")
        return real_fit(data, spec_, config)

    monkeypatch.setattr(bt, "fit", flaky)
    with pytest.warns(UnstableBootstrap):
        res = bootstrap_inference(subs, spec, cfg, B=4, seed=1)
    assert res.unstable and res.n_failed == 2 and len(res.failures) == 2


@pytest.mark.slow
def test_gamma_se_matches_replication_spread():
    """Bootstrap SE of gamma on one Model 1 dataset is within a factor 2 of 0.08."""
    sc = paper_scenario("model1")
    subs = simulate(sc, 2024)
    spec = infer_spec(subs, 2, sc.basis)
    res = bootstrap_inference(subs, spec, FitConfig(), B=50, seed=3)
    assert res.n_failed <= 10
    assert 0.04 <= res.se["gamma"] <= 0.16
