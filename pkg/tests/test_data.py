import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icegcomp.data import (ParseError, TreatmentPlan, ValidationError, canonical_columns,
                           followers_mask, load_csv, to_csv, validate)
from icegcomp.simulation import generate

from conftest import make_dataset, two_period

nan = np.nan


def small():
    return make_dataset(A=[[1, 1], [0, nan], [1, 0]], C=[[0, 0], [1, 1], [0, 1]],
                        Y=[[0, 1], [nan, nan], [1, nan]],
                        L={"x": [[0, 1], [1, nan], [0, 0]]}, ids=["a", "b", "c"])


def test_valid_dataset_passes():
    validate(small())


def test_non_monotone_censoring_names_unit():
    d = make_dataset(A=[[1, 1], [0, 0]], C=[[0, 0], [1, 0]], Y=[[0, 1], [nan, 0]],
                     L={"x": [[0, 1], [1, 1]]}, ids=[10, 20])
    with pytest.raises(ValidationError) as info:
        validate(d)
    assert info.value.unit == 20
    assert "monotone" in str(info.value)


def test_outcome_present_after_censoring():
    d = make_dataset(A=[[1, 1]], C=[[0, 1]], Y=[[0, 1]], L={"x": [[0, 1]]})
    with pytest.raises(ValidationError, match="Y2 is present after censoring"):
        validate(d)


def test_covariate_missing_while_uncensored():
    d = make_dataset(A=[[1, 1]], C=[[0, 0]], Y=[[0, 1]], L={"x": [[0, nan]]})
    with pytest.raises(ValidationError, match="L1_x is missing"):
        validate(d)


def test_treatment_must_be_binary():
    d = make_dataset(A=[[2, 1]], C=[[0, 0]], Y=[[0, 1]], L={"x": [[0, 1]]})
    with pytest.raises(ValidationError, match="binary"):
        validate(d)


def test_outcome_range():
    d = make_dataset(A=[[1, 1]], C=[[0, 0]], Y=[[0, 1.5]], L={"x": [[0, 1]]})
    with pytest.raises(ValidationError, match=r"\[0, 1\]"):
        validate(d)


def test_dataset_is_immutable():
    d = small()
    with pytest.raises(ValueError):
        d.A[0, 0] = 0
    L = {"x": np.zeros((2, 1))}
    d2 = make_dataset(A=[[1], [0]], C=[[0], [0]], Y=[[0], [1]], L=L)
    assert d2.L is not L


def test_natural_course_assignments_are_observed():
    d = two_period(50, 1)
    out = TreatmentPlan.natural_course().assignments(d)
    assert out is d.A or np.array_equal(out, d.A, equal_nan=True)
    assert np.all(followers_mask(d, TreatmentPlan.natural_course(), 1))


def test_followers_shrink_over_time():
    d = two_period(400, 2)
    for plan in (TreatmentPlan.always(), TreatmentPlan.never(), TreatmentPlan.custom([1, 0])):
        f0, f1 = followers_mask(d, plan, 0), followers_mask(d, plan, 1)
        assert np.all(f1 <= f0)


def test_plan_parsing():
    assert TreatmentPlan.parse("never") == TreatmentPlan.never()
    assert TreatmentPlan.parse([1, 0, 1]).label() == "custom(1,0,1)"
    with pytest.raises(ValueError):
        TreatmentPlan.parse("custom")
    with pytest.raises(ValueError):
        TreatmentPlan.custom([2])
    with pytest.raises(ValueError):
        TreatmentPlan.custom([1, 0]).assignments(generate(5, 0))


def test_csv_round_trip(tmp_path):
    d = two_period(120, 3)
    path = tmp_path / "d.csv"
    to_csv(d, path)
    back = load_csv(path)
    assert back.equals(d)
    header = path.read_text().splitlines()[0].split(",")
    assert header == ["id"] + canonical_columns(2, ["x"])


def test_csv_renamed_columns(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("pid,base,trt,cens,out\n1,0,1,0,1\n2,1,0,1,\n")
    d = load_csv(path, {"tau": 1, "id": "pid",
                        "columns": {"L0_x": "base", "A0": "trt", "C1": "cens", "Y1": "out"}})
    assert d.n == 2
    assert list(d.ids) == ["1", "2"] or list(d.ids) == [1, 2]
    assert np.isnan(d.y(1)[1])


def test_csv_non_binary_treatment_is_parse_error(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("L0_x,A0,C1,Y1\n0,2,0,1\n")
    with pytest.raises(ParseError) as info:
        load_csv(path)
    assert info.value.column == "A0"


def test_csv_unknown_column(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("L0_x,A0,C1,Y1,zzz\n0,1,0,1,3\n")
    with pytest.raises(ParseError, match="zzz"):
        load_csv(path)


def test_csv_validation_error_names_unit(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("id,L0_x,A0,C1,Y1,L1_x,A1,C2,Y2\nu1,0,1,0,1,0,1,0,1\nu2,0,1,1,,,,0,1\n")
    with pytest.raises(ValidationError) as info:
        load_csv(path)
    assert info.value.unit == "u2"


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 200))
def test_generated_data_always_valid(seed, n):
    validate(generate(n, seed))
    validate(two_period(n, seed))
