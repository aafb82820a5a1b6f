import math
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from irrcurr.analysis import (
    FlopCostModel,
    RunSummary,
    compare_runs,
    flop_overhead,
    forward_flops,
    quartile_bounds,
    quartile_report,
)
from irrcurr.errors import ContractViolation
from irrcurr.learnability import LearnabilityTable, ScoreRow
from irrcurr.sharpness import SharpnessRecord
from irrcurr.trainer import AVERAGE_LABEL, TrainLog


def table(rows):
    return LearnabilityTable([ScoreRow(f"{d}/{i:03d}", d, 0.0, 0.0, s) for i, (d, s) in enumerate(rows)])


def test_quartile_bounds():
    assert quartile_bounds(8) == [0, 2, 4, 6, 8]
    assert quartile_bounds(10) == [0, 3, 5, 8, 10]


def test_quartile_report_example():
    t = table([("a", 9), ("a", 8), ("b", 7), ("a", 6), ("b", 5), ("b", 4), ("c", 3), ("b", 2)])
    rep = quartile_report(t)
    assert rep.domains == ["a", "b", "c"]
    assert rep.counts[0] == {"a": 2, "b": 0, "c": 0}
    assert rep.composition[1] == {"a": Fraction(1, 2), "b": Fraction(1, 2), "c": 0}
    assert rep.top_domain(0) == "a" and rep.top_domain(2) == "b"
    assert rep.top_domain(3) == "b"  # tie with c
    assert rep.mean_score[3]["c"] == 3.0 and math.isnan(rep.mean_score[0]["b"])
    lines = rep.to_csv().splitlines()
    assert lines[0] == "quarter,domain,count,fraction,mean_learnability"
    assert lines[1] == "0-25%,a,2,1.000000,8.500000"
    assert lines[2] == "0-25%,b,0,0.000000,nan"


@given(st.lists(st.tuples(st.sampled_from("abc"), st.floats(-5, 5)), min_size=4, max_size=60))
def test_quartile_counts_partition_the_table(rows):
    rep = quartile_report(table(rows))
    total = sum(sum(c.values()) for c in rep.counts)
    assert total == len(rows)
    for comp in rep.composition:
        assert sum(comp.values()) == 1


def test_quartile_report_needs_four_rows():
    with pytest.raises(ContractViolation):
        quartile_report(table([("a", 1), ("a", 2), ("b", float("nan")), ("b", 3)]))


def test_flop_overhead_hand_example():
    out = flop_overhead(FlopCostModel(C1=1, C2=2, T=10, B=5, b=1, D=100))
    assert out.rho_loss_extra == 10 * 1 * 6 + 10 * 2 * 5 == 160
    assert out.curriculum_extra == 200
    assert out.ratio == Fraction(5, 4)
    assert out.to_csv() == "quantity,value\nrho_loss_extra,160\ncurriculum_extra,200\nratio,1.250000\n"


def test_flop_overhead_float_inputs_and_contract():
    out = flop_overhead(FlopCostModel(C1=1.5, C2=3, T=2, B=4, b=2, D=10))
    assert out.ratio == pytest.approx(30 / (2 * 1.5 * 6 + 2 * 3 * 4))
    with pytest.raises(ContractViolation):
        FlopCostModel(C1=1, C2=1, T=1, B=1, b=2, D=1)
    with pytest.raises(ContractViolation):
        FlopCostModel(C1=0, C2=1, T=1, B=1, b=1, D=1)
    assert forward_flops(1000, 128) == 256000


def _log(avg, **per):
    return TrainLog([(1, 3.0)], [(0, "a", 9.0), *((5, d, v) for d, v in per.items()), (5, AVERAGE_LABEL, avg)])


def test_compare_runs_flags_column_minima():
    runs = [
        RunSummary("curriculum", _log(2.0, a=1.5, b=2.5), "m", [SharpnessRecord(0, 4.0, 8, 5, True)]),
        RunSummary("uniform", _log(2.2, a=1.4, b=3.0), "m", [SharpnessRecord(0, 3.0, 8, 5, True),
                                                             SharpnessRecord(5, float("nan"), 8, 0, False)]),
    ]
    t = compare_runs(runs)
    assert t.columns() == ["avg", "a", "b", "mean_sharpness"]
    assert t.row("curriculum").best == {"avg", "b"}
    assert t.row("uniform").best == {"a", "mean_sharpness"}
    assert t.row("uniform").mean_sharpness == 3.0
    csv_lines = t.to_csv().splitlines()
    assert csv_lines[0] == "label,avg,a,b,mean_sharpness,best"
    assert csv_lines[1] == "curriculum,2.000000,1.500000,2.500000,4.000000,avg;b"
    text = t.to_text()
    assert "2.000000*" in text and text.endswith("column\n")


def test_single_run_is_its_own_best():
    t = compare_runs([RunSummary("only", _log(2.0, a=2.0))])
    assert t.row("only").best == {"avg", "a"}
    assert math.isnan(t.row("only").mean_sharpness)


def test_compare_runs_contract():
    with pytest.raises(ContractViolation):
        compare_runs([])
    with pytest.raises(ContractViolation, match="different validation"):
        compare_runs([RunSummary("x", _log(1.0, a=1.0), "m1"), RunSummary("y", _log(1.0, a=1.0), "m2")])
    with pytest.raises(ContractViolation):
        compare_runs([RunSummary("x", TrainLog())])
