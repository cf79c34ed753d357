import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dualsmooth.dual import DualOutcome
from dualsmooth.report import (
    ReportRow,
    certified_accuracy,
    ecdf,
    radius_grid,
    read_report_csv,
    row_from_outcome,
    write_report_csv,
)


def test_grid():
    g = radius_grid(1.0, 0.25)
    assert g.tolist() == [0.0, 0.25, 0.5, 0.75, 1.0]
    with pytest.raises(ValueError):
        radius_grid(1.0, 0.0)


def test_zero_radii_give_clean_accuracy_then_nothing():
    acc = certified_accuracy([1, 1, 0, 1], [0.0] * 4, [0.0, 0.1, 0.5])
    assert acc.tolist() == [0.75, 0.0, 0.0]


def test_known_radii():
    acc = certified_accuracy([1, 1, 1], [0.2, 0.4, 0.6], [0.0, 0.3, 0.5, 0.7])
    assert acc[1] == pytest.approx(2 / 3)
    assert acc.tolist() == pytest.approx([1.0, 2 / 3, 1 / 3, 0.0])


def test_empty():
    assert certified_accuracy([], [], [0.0, 1.0]).tolist() == [0.0, 0.0]


@given(hnp.arrays(bool, 20), hnp.arrays(float, 20, elements=st.floats(0, 3)))
def test_curve_nonincreasing_and_anchored(correct, radii):
    acc = certified_accuracy(correct, radii, radius_grid())
    assert np.all(np.diff(acc) <= 0)
    assert acc[0] == pytest.approx(np.mean(correct))


def test_ecdf_drops_nan():
    xs, ps = ecdf([0.3, float("nan"), 0.1])
    assert xs.tolist() == [0.1, 0.3]
    assert ps.tolist() == [0.5, 1.0]


def _outcome(**kw):
    base = dict(sigma_index=1, sigma_hat=0.5, R_sigma=0.9, y_hat=2, R_c=0.4, R_final=0.4,
                abstained=False, alpha_sigma=5e-4, alpha_cls=5e-4, alpha_total=1e-3)
    base.update(kw)
    return DualOutcome(**{k: v for k, v in base.items() if k in DualOutcome.__dataclass_fields__})


class TestRows:
    def test_gaps(self):
        row = row_from_outcome(3, 2, _outcome(), star=[0.1, 0.4, 0.7])
        assert row.correct == 1
        assert row.delta_R_c == pytest.approx(0.3)
        assert row.delta_R_sigma == pytest.approx(0.5)

    def test_wrong_prediction_credits_nothing(self):
        row = row_from_outcome(0, 1, _outcome(), star=[0.0, 0.2, 0.0])
        assert row.correct == 0
        assert row.delta_R_c == pytest.approx(0.2)

    @given(st.floats(0, 3), st.lists(st.floats(0, 3), min_size=1, max_size=4), st.booleans())
    def test_gap_nonnegative(self, rc, star, right):
        row = row_from_outcome(0, 2 if right else 0, _outcome(R_c=rc, R_final=rc), star=star)
        assert row.delta_R_c >= 0

    def test_without_star(self):
        row = row_from_outcome(0, 2, _outcome())
        assert math.isnan(row.delta_R_c) and math.isnan(row.R_c_star)

    def test_csv_round_trip(self, tmp_path):
        rows = [row_from_outcome(i, 2, _outcome(R_c=0.1 * i + 1 / 3), star=[0.7]) for i in range(4)]
        rows.append(row_from_outcome(9, 0, _outcome(sigma_index=-1, sigma_hat=None, abstained=True,
                                                    y_hat=-1, R_c=0.0, R_final=0.0)))
        path = tmp_path / "r.csv"
        write_report_csv(rows, path)
        back = read_report_csv(path)
        assert len(back) == len(rows)
        for a, b in zip(rows, back):
            for name in ReportRow.__dataclass_fields__:
                va, vb = getattr(a, name), getattr(b, name)
                assert (math.isnan(va) and math.isnan(vb)) if isinstance(va, float) and math.isnan(va) else va == vb
