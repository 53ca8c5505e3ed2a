"""Confidence-gated incremental inference.

Instead of always waiting for the full decision window, the system is
evaluated on growing audio prefixes - t_min, then t_min + t_interval,
and so on up to t_max - and returns as soon as the decision confidence
clears a threshold c.  Latency is counted in seconds of audio consumed
after speech onset, which is also what drives the downstream recognizer
cost: the sooner a locale is picked, the sooner the losing recognizers
stop.

sweep_policy evaluates a whole corpus under a grid of policies, caching
per-prefix decisions (a prefix decision does not depend on the policy)
so the grid costs little more than its distinct prefix lengths.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

from .errors import BadInputError
from .evaluation import PopulationStats, TrialResult, aua


@dataclass(frozen=True)
class LatencyPolicy:
    t_min: float
    t_interval: float
    t_max: float
    c: float

    def __post_init__(self):
        if not 0 < self.t_min <= self.t_max:
            raise BadInputError("need 0 < t_min <= t_max")
        if self.t_interval <= 0:
            raise BadInputError("t_interval must be positive")
        # c may sit outside (0, 1]: 0 always exits at t_min, > 1 never
        # exits early; both are useful sweep baselines.
        if self.c < 0:
            raise BadInputError("confidence threshold must be nonnegative")


@dataclass(frozen=True)
class IncrementalResult:
    decision: object
    latency: float
    evals: int
    early_exit: bool
    truncated: bool = False


def eval_times(policy: LatencyPolicy, available: float | None = None) -> tuple[list[float], bool]:
    """Prefix lengths the policy will evaluate, plus a truncation flag.

    The grid is t_min + k * t_interval while below t_max, then t_max
    itself.  Utterances with less than t_min of speech collapse to a
    single evaluation on everything available.
    """
    t_max = policy.t_max
    if available is not None:
        if available < policy.t_min:
            if available <= 0:
                raise BadInputError("no speech available")
            return [available], True
        t_max = min(t_max, available)
    times: list[float] = []
    k = 0
    while True:
        t = policy.t_min + k * policy.t_interval
        if t >= t_max - 1e-9:
            break
        times.append(t)
        k += 1
    times.append(t_max)
    return times, False


def run_incremental(
    decide: Callable[[float], tuple[object, float]],
    policy: LatencyPolicy,
    speech_dur: float | None = None,
) -> IncrementalResult:
    """Evaluate prefixes until the confidence threshold is met.

    ``decide(seconds)`` returns (decision, confidence); confidence is
    compared against policy.c.  Exits early at the first prefix at or
    above the threshold, otherwise returns the final-prefix decision.
    """
    times, truncated = eval_times(policy, speech_dur)
    decision, confidence = None, 0.0
    evals = 0
    for t in times:
        decision, confidence = decide(t)
        evals += 1
        if confidence >= policy.c:
            return IncrementalResult(decision, t, evals, True, truncated)
    return IncrementalResult(decision, times[-1], evals, False, truncated)


@dataclass(frozen=True)
class SweepItem:
    """One utterance as the sweep sees it."""

    utterance_id: str
    truth: str
    installed: tuple[str, ...]
    speech_dur: float


@dataclass(frozen=True)
class SweepRow:
    policy: LatencyPolicy
    mean_latency: float
    aua: float
    mean_evals: float
    prefix_consistency: float
    n_trials: int


def sweep_policy(
    items: Sequence[SweepItem],
    decide: Callable[[SweepItem, float], tuple[str, float]],
    policies: Sequence[LatencyPolicy],
    stats: PopulationStats,
    top_n: int = 100,
) -> list[SweepRow]:
    """Full-system evaluation of every policy over the corpus.

    ``decide(item, seconds)`` returns (predicted locale tag, confidence)
    and must be pure: results are cached per (utterance, prefix length)
    and shared across policies.  Prefix consistency is the fraction of
    early-exited utterances whose decision matches the same policy's
    final-window decision.
    """
    if not items:
        raise BadInputError("sweep over an empty corpus")
    cache: dict[tuple[str, float], tuple[str, float]] = {}

    def cached(item: SweepItem, seconds: float) -> tuple[str, float]:
        key = (item.utterance_id, round(seconds, 6))
        hit = cache.get(key)
        if hit is None:
            hit = decide(item, seconds)
            cache[key] = hit
        return hit

    rows: list[SweepRow] = []
    for policy in policies:
        trials: list[TrialResult] = []
        total_latency = 0.0
        total_evals = 0
        early_total = 0
        early_consistent = 0
        for item in items:
            result = run_incremental(
                lambda t, it=item: cached(it, t), policy, item.speech_dur
            )
            predicted = result.decision
            trials.append(
                TrialResult(
                    utterance_id=item.utterance_id,
                    truth=item.truth,
                    predicted=predicted,
                    installed=item.installed,
                    latency=result.latency,
                    confidence=cache[(item.utterance_id, round(result.latency, 6))][1],
                )
            )
            total_latency += result.latency
            total_evals += result.evals
            if result.early_exit:
                final_t = min(policy.t_max, item.speech_dur)
                early_total += 1
                early_consistent += cached(item, final_t)[0] == predicted
        rows.append(
            SweepRow(
                policy=policy,
                mean_latency=total_latency / len(items),
                aua=aua(trials, stats, top_n=top_n),
                mean_evals=total_evals / len(items),
                prefix_consistency=(
                    1.0 if early_total == 0 else early_consistent / early_total
                ),
                n_trials=len(trials),
            )
        )
    return rows


def write_sweep_csv(rows: list[SweepRow], path, meta: dict | None = None) -> None:
    def fmt(x: float) -> str:
        return format(float(x), ".12g")

    lines = []
    if meta:
        lines.append("# " + ",".join(f"{k}={meta[k]}" for k in sorted(meta)))
    lines.append(
        "t_min,t_interval,t_max,c,mean_latency_s,aua,mean_evals,prefix_consistency,n_trials"
    )
    for row in rows:
        p = row.policy
        lines.append(
            ",".join(
                [
                    fmt(p.t_min),
                    fmt(p.t_interval),
                    fmt(p.t_max),
                    fmt(p.c),
                    fmt(row.mean_latency),
                    fmt(row.aua),
                    fmt(row.mean_evals),
                    fmt(row.prefix_consistency),
                    str(row.n_trials),
                ]
            )
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
