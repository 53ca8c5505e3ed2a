from __future__ import annotations

import numpy as np
import pytest

from multilid.errors import BadInputError
from multilid.evaluation import PopulationStats
from multilid.incremental import (
    LatencyPolicy,
    SweepItem,
    eval_times,
    run_incremental,
    sweep_policy,
    write_sweep_csv,
)


def trace_decider(confidences, decision="aa-AA"):
    """decide() driven by a {seconds: confidence} table."""

    def decide(seconds):
        return decision, confidences[round(seconds, 6)]

    return decide


def test_policy_validation():
    with pytest.raises(BadInputError):
        LatencyPolicy(t_min=0.0, t_interval=0.2, t_max=2.0, c=0.5)
    with pytest.raises(BadInputError):
        LatencyPolicy(t_min=2.0, t_interval=0.2, t_max=1.0, c=0.5)
    with pytest.raises(BadInputError):
        LatencyPolicy(t_min=1.0, t_interval=0.0, t_max=2.0, c=0.5)
    LatencyPolicy(t_min=1.0, t_interval=0.2, t_max=2.0, c=0.0)  # always exit
    LatencyPolicy(t_min=1.0, t_interval=0.2, t_max=2.0, c=1.5)  # never exit


def test_eval_times_grid():
    policy = LatencyPolicy(1.0, 0.2, 2.0, 0.9)
    times, truncated = eval_times(policy)
    assert not truncated
    assert times == pytest.approx([1.0, 1.2, 1.4, 1.6, 1.8, 2.0])


def test_eval_times_non_divisible_interval_ends_at_t_max():
    times, _ = eval_times(LatencyPolicy(1.0, 0.3, 2.0, 0.9))
    assert times == pytest.approx([1.0, 1.3, 1.6, 1.9, 2.0])


def test_eval_times_fixed_window():
    times, _ = eval_times(LatencyPolicy(2.0, 0.2, 2.0, 0.9))
    assert times == [2.0]


def test_eval_times_clamped_by_available_speech():
    times, truncated = eval_times(LatencyPolicy(1.0, 0.2, 2.0, 0.9), available=1.5)
    assert not truncated
    assert times == pytest.approx([1.0, 1.2, 1.4, 1.5])


def test_immediate_exit():
    policy = LatencyPolicy(1.0, 0.2, 2.0, 0.9)
    result = run_incremental(trace_decider({1.0: 0.95}), policy)
    assert result.early_exit
    assert result.latency == 1.0
    assert result.evals == 1


def test_never_confident_runs_full_grid():
    policy = LatencyPolicy(1.0, 0.2, 2.0, 0.9)
    confidences = {t: 0.5 for t in (1.0, 1.2, 1.4, 1.6, 1.8, 2.0)}
    result = run_incremental(trace_decider(confidences), policy)
    assert not result.early_exit
    assert result.latency == 2.0
    # arithmetic oracle: 1 + ceil((2.0 - 1.0) / 0.2) = 6 evaluations
    assert result.evals == 6


def test_zero_threshold_exits_at_t_min():
    policy = LatencyPolicy(1.0, 0.2, 2.0, 0.0)
    result = run_incremental(trace_decider({1.0: 0.01}), policy)
    assert result.early_exit
    assert result.latency == 1.0


def test_short_utterance_single_eval_flagged():
    policy = LatencyPolicy(1.0, 0.2, 2.0, 0.9)
    result = run_incremental(trace_decider({0.7: 0.4}), policy, speech_dur=0.7)
    assert result.truncated
    assert result.evals == 1
    assert result.latency == pytest.approx(0.7)
    assert not result.early_exit


def test_latency_always_on_policy_grid():
    rng = np.random.default_rng(0)
    for _ in range(200):
        t_min = float(rng.uniform(0.3, 1.5))
        t_interval = float(rng.uniform(0.1, 0.7))
        t_max = t_min + float(rng.uniform(0.0, 2.0))
        c = float(rng.uniform(0.0, 1.2))
        policy = LatencyPolicy(t_min, t_interval, t_max, c)
        times, _ = eval_times(policy)
        confidences = {round(t, 6): float(rng.uniform()) for t in times}
        result = run_incremental(
            lambda s: ("aa-AA", confidences[round(s, 6)]), policy
        )
        grid = {round(t_min + k * t_interval, 6) for k in range(100)} | {
            round(t_max, 6)
        }
        assert round(result.latency, 6) in grid
        if not result.early_exit:
            assert result.latency == pytest.approx(t_max)


def test_lowering_threshold_never_increases_latency():
    rng = np.random.default_rng(1)
    for _ in range(100):
        policy_hi = LatencyPolicy(0.5, 0.25, 2.0, float(rng.uniform(0.5, 1.0)))
        policy_lo = LatencyPolicy(0.5, 0.25, 2.0, policy_hi.c * float(rng.uniform()))
        times, _ = eval_times(policy_hi)
        confidences = {round(t, 6): float(rng.uniform()) for t in times}
        decide = lambda s: ("x", confidences[round(s, 6)])
        hi = run_incremental(decide, policy_hi)
        lo = run_incremental(decide, policy_lo)
        assert lo.latency <= hi.latency + 1e-12


def sweep_fixture():
    # two utterances per tuple; confidence grows with prefix length
    items = [
        SweepItem("u0", "aa-AA", ("aa-AA", "bb-BB"), 3.0),
        SweepItem("u1", "bb-BB", ("aa-AA", "bb-BB"), 3.0),
        SweepItem("u2", "cc-CC", ("cc-CC", "dd-DD"), 3.0),
        SweepItem("u3", "dd-DD", ("cc-CC", "dd-DD"), 3.0),
    ]
    stats = PopulationStats(
        ((("aa-AA", "bb-BB"), 5.0), (("cc-CC", "dd-DD"), 2.0))
    )

    def decide(item, seconds):
        confidence = min(1.0, 0.45 + 0.25 * seconds)
        return item.truth, confidence

    return items, stats, decide


def test_sweep_baseline_and_unreachable_rows():
    items, stats, decide = sweep_fixture()
    policies = [
        LatencyPolicy(2.0, 0.2, 2.0, 2.0),  # fixed-window baseline
        LatencyPolicy(1.0, 0.2, 2.0, 2.0),  # unreachable threshold
        LatencyPolicy(1.0, 0.2, 2.0, 0.5),  # exits at t_min
    ]
    rows = sweep_policy(items, decide, policies, stats)
    assert len(rows) == 3
    baseline, unreachable, eager = rows
    assert baseline.mean_latency == pytest.approx(2.0)
    assert unreachable.mean_latency == pytest.approx(2.0)
    assert unreachable.aua == pytest.approx(baseline.aua, abs=1e-12)
    assert eager.mean_latency == pytest.approx(1.0)
    assert eager.prefix_consistency == 1.0
    assert eager.mean_evals == pytest.approx(1.0)


def test_sweep_csv_shape(tmp_path):
    items, stats, decide = sweep_fixture()
    rows = sweep_policy(
        items, decide, [LatencyPolicy(1.0, 0.5, 2.0, 0.8)], stats
    )
    path = tmp_path / "sweep.csv"
    write_sweep_csv(rows, path, meta={"seed": 7})
    lines = path.read_text().splitlines()
    assert lines[0] == "# seed=7"
    assert lines[1].startswith("t_min,t_interval,t_max,c,mean_latency_s,aua,")
    assert len(lines) == 3


def test_sweep_rejects_empty_corpus():
    _, stats, decide = sweep_fixture()
    with pytest.raises(BadInputError):
        sweep_policy([], decide, [LatencyPolicy(1.0, 0.2, 2.0, 0.5)], stats)


def test_unreachable_threshold_matches_fixed_window_decisions():
    # the decision changes with prefix length; an unreachable threshold
    # must still reproduce the full-window decision for every utterance
    flip_at = 1.6

    def decide(seconds):
        return ("late" if seconds >= flip_at else "early", 0.6)

    policy = LatencyPolicy(1.0, 0.2, 2.0, c=1.5)
    result = run_incremental(decide, policy)
    fixed = run_incremental(decide, LatencyPolicy(2.0, 0.2, 2.0, c=1.5))
    assert not result.early_exit
    assert result.decision == fixed.decision == "late"
