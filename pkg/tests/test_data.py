import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from latentjm.data import (
    ModelSpec,
    ParameterSet,
    StepHazard,
    SubjectRecord,
    latent_trajectory,
    load_dataset,
    load_params,
    reported,
    save_params,
    write_dataset,
)
from latentjm.errors import DuplicateCell, FollowupAfterEvent, OrphanLongitudinal, ParseError
from latentjm.spline import BasisSpec, build_basis

from conftest import one_subject

SPEC1 = ModelSpec(J=1, k=1, basis=BasisSpec.evenly_spaced(2, (0, 3)))


def _write(tmp_path, long_rows, surv_rows, long_header="id,time,biomarker_index,value",
           surv_header="id,event_time,event_indicator"):
    lf, sf = tmp_path / "long.csv", tmp_path / "surv.csv"
    lf.write_text("\n".join([long_header] + long_rows) + "\n")
    sf.write_text("\n".join([surv_header] + surv_rows) + "\n")
    return lf, sf


def test_empty_longitudinal_gives_subject_without_visits(tmp_path):
    lf, sf = _write(tmp_path, [], ["A,2.0,1"])
    (s,) = load_dataset(lf, sf, SPEC1)
    assert s.n_visits == 0 and s.event_time == 2.0 and s.event_indicator == 1


def test_rows_grouped_and_sorted(tmp_path):
    lf, sf = _write(tmp_path, ["A,1.5,1,3", "A,0.5,1,1", "B,0.0,1,9", "A,1.0,1,2"],
                    ["A,2.0,1", "B,1.0,0"])
    a, b = load_dataset(lf, sf, SPEC1)
    assert a.id == "A" and b.id == "B"
    np.testing.assert_array_equal(a.visit_times, [0.5, 1.0, 1.5])
    np.testing.assert_array_equal(a.y[:, 0], [1, 2, 3])


def test_missing_cells_are_masked(tmp_path):
    spec = ModelSpec(J=2, k=1, basis=SPEC1.basis)
    lf, sf = _write(tmp_path, ["A,0.0,1,1", "A,0.0,2,5", "A,1.0,2,6"], ["A,2.0,0"])
    (a,) = load_dataset(lf, sf, spec)
    np.testing.assert_array_equal(a.observed, [[True, True], [False, True]])


def test_duplicate_cell(tmp_path):
    lf, sf = _write(tmp_path, ["A,0.5,1,1", "A,0.5,1,2"], ["A,2.0,1"])
    with pytest.raises(DuplicateCell) as err:
        load_dataset(lf, sf, SPEC1)
    assert err.value.row == 3


def test_orphan(tmp_path):
    lf, sf = _write(tmp_path, ["Z,0.5,1,1"], ["A,2.0,1"])
    with pytest.raises(OrphanLongitudinal):
        load_dataset(lf, sf, SPEC1)


def test_followup_after_event(tmp_path):
    lf, sf = _write(tmp_path, ["A,0.5,1,1", "A,2.5,1,1"], ["A,2.0,1"])
    with pytest.raises(FollowupAfterEvent) as err:
        load_dataset(lf, sf, SPEC1)
    assert err.value.row == 3


def test_visit_tied_with_event_is_kept(tmp_path):
    lf, sf = _write(tmp_path, ["A,2.0,1,1"], ["A,2.0,1"])
    (a,) = load_dataset(lf, sf, SPEC1)
    assert a.n_visits == 1


@pytest.mark.parametrize("rows,surv,row", [
    (["A,abc,1,1"], ["A,2.0,1"], 2),
    (["A,0.5,1,1", "A,1.0,1,"], ["A,2.0,1"], 3),
    ([], ["A,2.0,2"], 2),
    ([], ["A,x,1"], 2),
    (["A,0.5,3,1"], ["A,2.0,1"], 2),
])
def test_parse_errors_carry_row(tmp_path, rows, surv, row):
    lf, sf = _write(tmp_path, rows, surv)
    with pytest.raises(ParseError) as err:
        load_dataset(lf, sf, SPEC1)
    assert err.value.row == row


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope.csv", tmp_path / "nope2.csv", SPEC1)


def test_roundtrip_with_covariates(tmp_path, toy_k2):
    sc, subjects = toy_k2
    lf, sf = tmp_path / "l.csv", tmp_path / "s.csv"
    write_dataset(subjects, lf, sf)
    spec = ModelSpec(J=2, k=2, basis=sc.basis, p=(1, 1), r=1)
    back = load_dataset(lf, sf, spec)
    assert [s.id for s in back] == [s.id for s in subjects]
    for a, b in zip(subjects, back):
        np.testing.assert_array_equal(a.visit_times, b.visit_times)
        np.testing.assert_array_equal(a.y, b.y)
        for xa, xb in zip(a.x, b.x):
            np.testing.assert_array_equal(xa, xb)
        np.testing.assert_array_equal(a.z_values, b.z_values)
        assert (a.event_time, a.event_indicator) == (b.event_time, b.event_indicator)
    # writing again reproduces the files byte for byte
    lf2, sf2 = tmp_path / "l2.csv", tmp_path / "s2.csv"
    write_dataset(back, lf2, sf2)
    assert lf.read_text() == lf2.read_text() and sf.read_text() == sf2.read_text()


def test_truncation():
    s = one_subject([0.0, 1.0, 2.0, 3.0], [1, 2, 3, 4], event_time=3.5, delta=1)
    h = s.truncated(2.0)
    np.testing.assert_array_equal(h.visit_times, [0.0, 1.0, 2.0])
    assert h.event_time == 2.0 and h.event_indicator == 0
    assert s.truncated(0.0).event_time > 0


def test_subject_validation():
    with pytest.raises(FollowupAfterEvent):
        one_subject([0.0, 3.0], [1, 2], event_time=2.0)
    with pytest.raises(ValueError):
        one_subject([1.0, 0.5], [1, 2])
    with pytest.raises(ValueError):
        one_subject([0.0], [1], delta=2)
    with pytest.raises(ValueError):
        one_subject([0.0], [1], event_time=0.0)


def test_step_covariate_is_right_continuous():
    s = SubjectRecord(id="a", visit_times=[0.0], y=[[1.0]], x=(np.zeros((1, 0)),),
                      z_times=[0.0, 2.0], z_values=[[1.0], [5.0]], event_time=4.0,
                      event_indicator=0)
    np.testing.assert_array_equal(s.z_at([0.0, 1.99, 2.0, 3.0])[:, 0], [1, 1, 5, 5])


def test_step_hazard():
    h = StepHazard([1.0, 2.0, 4.0], [0.1, 0.2, 0.3])
    np.testing.assert_allclose(h.cumulative([0.0, 0.99, 1.0, 3.0, 4.0, 10.0]),
                               [0, 0, 0.1, 0.3, 0.6, 0.6])
    with pytest.raises(ValueError):
        StepHazard([1.0, 1.0], [0.1, 0.1])
    with pytest.raises(ValueError):
        StepHazard([1.0], [-0.1])


@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=20),
       st.lists(st.floats(0, 10, allow_nan=False), min_size=2, max_size=10))
def test_cumulative_hazard_monotone(incs, ts):
    h = StepHazard(np.arange(1, len(incs) + 1, dtype=float), incs)
    c = h.cumulative(np.sort(ts))
    assert np.all(np.diff(c) >= 0) and h.cumulative(0.0) == 0.0


def _params(q=6, k=2):
    rng = np.random.default_rng(0)
    return ParameterSet(beta0=(np.array([0.5]), np.array([-0.3, 0.2])), beta1=[1.0, 0.7],
                        sigma2=[0.5, 0.4], theta=rng.normal(size=q),
                        Theta=np.linalg.qr(rng.normal(size=(q, k)))[0], D=[2.0, 1.0],
                        eta=[0.1], gamma=0.3, hazard=StepHazard([1.0, 2.5], [0.1, 0.2]))


def test_beta1_pin():
    p = _params()
    with pytest.raises(ValueError):
        p.replace(beta1=np.array([0.9, 0.7]))


def test_phi_roundtrip():
    p = _params()
    v = p.phi_vector()
    assert len(p.phi_names()) == v.size == p.n_params
    np.testing.assert_array_equal(p.with_phi(v).phi_vector(), v)
    # 3 beta0 + 1 beta1 + 2 sigma2 + 6 theta + 12 Theta + 2 D + 1 eta + gamma
    assert p.n_params == 28


def test_params_json_roundtrip(tmp_path):
    p = _params()
    save_params(p, tmp_path / "p.json", extra={"note": 1})
    back = load_params(tmp_path / "p.json")
    np.testing.assert_array_equal(back.phi_vector(), p.phi_vector())
    np.testing.assert_array_equal(back.hazard.increments, p.hazard.increments)
    assert json.loads((tmp_path / "p.json").read_text())["note"] == 1


def test_reported_names():
    r = reported(_params())
    assert list(r) == ["beta0_1", "beta0_2_1", "beta0_2_2", "beta1_2", "sigma2_1", "sigma2_2",
                       "D_1", "D_2", "eta_1", "gamma"]


def test_latent_trajectory():
    basis = build_basis(BasisSpec.evenly_spaced(3, (0, 4)))
    q = basis.q
    t = np.linspace(0, 4, 9)
    theta = np.linspace(1, -1, q)
    p = ParameterSet(beta0=(np.zeros(0),), beta1=[1.0], sigma2=[1.0], theta=theta,
                     Theta=np.eye(q)[:, :2], D=[1.0, 1.0], eta=[], gamma=0.0,
                     hazard=StepHazard([], []))
    mean = latent_trajectory(p, basis, [0.0, 0.0], t)
    np.testing.assert_allclose(mean, basis(t) @ theta)
    dev1 = latent_trajectory(p, basis, [0.3, -0.2], t) - mean
    dev2 = latent_trajectory(p, basis, [0.6, -0.4], t) - mean
    np.testing.assert_allclose(dev2, 2 * dev1, atol=1e-14)
    p0 = p.replace(theta=np.zeros(q))
    np.testing.assert_allclose(latent_trajectory(p0, basis, [1.0, 0.0], t), basis(t)[:, 0])


def test_model_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec(J=1, k=0, basis=SPEC1.basis)
    with pytest.raises(ValueError):
        ModelSpec(J=1, k=SPEC1.q + 1, basis=SPEC1.basis)
    with pytest.raises(ValueError):
        ModelSpec(J=2, k=1, basis=SPEC1.basis, p=(1,))
    s = ModelSpec(J=2, k=1, basis=SPEC1.basis, p=(1, 0), r=2)
    assert ModelSpec.from_dict(s.to_dict()) == s
