"""Population-weighted accuracy metrics and report generation.

Users install a *tuple* of locales; accuracy is therefore reported per
(tuple, ground-truth locale) cell, averaged without utterance-count
weighting into a per-tuple accuracy, and finally combined across the
top-N most common tuples into the Average User Accuracy (AUA), weighted
by each tuple's monthly users.  The minimum cell accuracy - the
worst-case - gets its own report entry because a biased pair can hide
behind a healthy average.

Reports serialize to CSV (plus a small SVG bar chart) with stable
ordering and formatting so identical runs produce identical bytes.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

from .errors import BadInputError

TupleKey = tuple[str, ...]


class EvalWarning(UserWarning):
    """Non-fatal evaluation issues (missing locales, mismatched tuples)."""


@dataclass(frozen=True)
class TrialResult:
    utterance_id: str
    truth: str
    predicted: str
    installed: TupleKey
    latency: float
    confidence: float

    def __post_init__(self):
        object.__setattr__(self, "installed", tuple(sorted(self.installed)))
        if self.truth not in self.installed:
            raise BadInputError(f"truth {self.truth!r} not in installed tuple")
        if self.predicted not in self.installed:
            raise BadInputError(f"prediction {self.predicted!r} not in installed tuple")


@dataclass(frozen=True)
class PopulationStats:
    """Locale tuples with their average monthly user counts."""

    entries: tuple[tuple[TupleKey, float], ...]

    def __post_init__(self):
        seen: set[TupleKey] = set()
        normalized = []
        for tuple_key, users in self.entries:
            key = tuple(sorted(tuple_key))
            if key in seen:
                raise BadInputError(f"duplicate tuple {key} in population stats")
            if users <= 0:
                raise BadInputError(f"tuple {key} has non-positive monthly users")
            seen.add(key)
            normalized.append((key, float(users)))
        object.__setattr__(self, "entries", tuple(normalized))

    def top(self, n: int) -> list[tuple[TupleKey, float]]:
        """Top-n tuples by monthly users; ties resolve by tag order."""
        ranked = sorted(self.entries, key=lambda e: (-e[1], e[0]))
        return ranked[:n]

    def weight(self, key: TupleKey) -> float | None:
        for tuple_key, users in self.entries:
            if tuple_key == key:
                return users
        return None


def load_stats(path) -> PopulationStats:
    """Read ``locale,locale[,locale]<TAB>monthly_users`` lines."""
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise BadInputError(f"{path}:{lineno}: expected 'locales<TAB>users'")
            key = tuple(sorted(tag.strip() for tag in parts[0].split(",")))
            entries.append((key, float(parts[1])))
    return PopulationStats(tuple(entries))


def save_stats(stats: PopulationStats, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# locale,locale[,locale]<TAB>monthly_users\n")
        for key, users in sorted(stats.entries):
            fh.write(f"{','.join(key)}\t{_fmt(users)}\n")


def tuple_accuracy(results: list[TrialResult]) -> tuple[dict[str, float], float]:
    """Per-ground-truth-locale accuracies and their unweighted mean.

    All results must belong to the same installed tuple.  Tuple locales
    with no utterances are excluded from the mean, with a warning, so an
    unrepresented locale cannot silently count as 0 or 1.
    """
    if not results:
        raise BadInputError("tuple_accuracy on empty result list")
    key = results[0].installed
    if any(r.installed != key for r in results):
        raise BadInputError("results span more than one locale tuple")
    counts: dict[str, list[int]] = {}
    for r in results:
        cell = counts.setdefault(r.truth, [0, 0])
        cell[0] += 1
        cell[1] += r.predicted == r.truth
    missing = [tag for tag in key if tag not in counts]
    if missing:
        warnings.warn(
            f"tuple {key}: no utterances for {missing}; excluded from the mean",
            EvalWarning,
            stacklevel=2,
        )
    per_locale = {tag: counts[tag][1] / counts[tag][0] for tag in sorted(counts)}
    mean = sum(per_locale.values()) / len(per_locale)
    return per_locale, mean


def group_by_tuple(
    results: list[TrialResult],
    eligible: list[TupleKey] | None = None,
    membership: str = "exact",
) -> dict[TupleKey, list[TrialResult]]:
    """Assign trials to tuples.

    "exact" membership (the default) puts a trial in the one tuple equal
    to its installed set.  "superset" counts a trial toward every
    eligible tuple contained in its installed set, provided the truth
    locale belongs to that tuple.
    """
    groups: dict[TupleKey, list[TrialResult]] = {}
    if membership == "exact":
        for r in results:
            groups.setdefault(r.installed, []).append(r)
        return groups
    if membership != "superset":
        raise BadInputError(f"unknown membership mode {membership!r}")
    if eligible is None:
        raise BadInputError("superset membership needs an explicit tuple list")
    for r in results:
        installed = set(r.installed)
        for key in eligible:
            if r.truth in key and set(key) <= installed:
                groups.setdefault(key, []).append(r)
    return groups


def aua(
    results: list[TrialResult],
    stats: PopulationStats,
    top_n: int = 100,
    include_singletons: bool = False,
    membership: str = "exact",
) -> float:
    """Average User Accuracy: user-weighted mean of tuple accuracies.

    Restricted to the top_n most frequent tuples in ``stats``; tuples
    without any results drop out of both numerator and denominator.
    Singleton tuples are excluded by default (one installed locale is
    not a language identification problem).
    """
    eligible = [
        (key, users)
        for key, users in stats.top(top_n)
        if include_singletons or len(key) > 1
    ]
    groups = group_by_tuple(results, [k for k, _ in eligible], membership)
    num = 0.0
    den = 0.0
    for key, users in eligible:
        trials = groups.get(key)
        if not trials:
            continue
        _, acc = tuple_accuracy(trials)
        num += users * acc
        den += users
    if den == 0.0:
        raise BadInputError("no overlap between population stats and results")
    return num / den


@dataclass(frozen=True)
class Cell:
    n: int
    correct: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.n


@dataclass(frozen=True)
class RecognizerCost:
    """Audio-seconds spent in downstream recognizers.

    An m-locale tuple runs m recognizers until the decision, after which
    only the winner keeps running to the end of the fixed window, so a
    trial costs m * latency + (t_max - latency) against a baseline of
    m * t_max.
    """

    baseline_s: float
    actual_s: float

    @property
    def saved_s(self) -> float:
        return self.baseline_s - self.actual_s

    @property
    def saved_frac(self) -> float:
        return 0.0 if self.baseline_s == 0 else self.saved_s / self.baseline_s


def recognizer_cost(results: list[TrialResult], fixed_window: float) -> RecognizerCost:
    baseline = 0.0
    actual = 0.0
    for r in results:
        m = len(r.installed)
        latency = min(r.latency, fixed_window)
        baseline += m * fixed_window
        actual += m * latency + (fixed_window - latency)
    return RecognizerCost(baseline, actual)


@dataclass(frozen=True)
class EvalReport:
    cells: dict[TupleKey, dict[str, Cell]]
    tuple_means: dict[TupleKey, float]
    tuple_weights: dict[TupleKey, float]
    aua: float
    worst_cell: tuple[float, TupleKey, str]
    worst_tuple: tuple[float, TupleKey]
    mean_latency: float
    recognizer: RecognizerCost
    n_trials: int
    meta: dict = field(default_factory=dict)


def worst_case(report: EvalReport) -> tuple[float, TupleKey, str]:
    """Lowest per-(tuple, locale) cell accuracy; ties pick the first cell
    in (tuple, locale) tag order."""
    return report.worst_cell


def build_report(
    results: list[TrialResult],
    stats: PopulationStats,
    top_n: int = 100,
    fixed_window: float = 2.0,
    include_singletons: bool = False,
    membership: str = "exact",
    meta: dict | None = None,
) -> EvalReport:
    """Aggregate trials into the full evaluation report."""
    if not results:
        raise BadInputError("no trial results to report")
    eligible = [
        (key, users)
        for key, users in stats.top(top_n)
        if include_singletons or len(key) > 1
    ]
    groups = group_by_tuple(results, [k for k, _ in eligible], membership)

    cells: dict[TupleKey, dict[str, Cell]] = {}
    tuple_means: dict[TupleKey, float] = {}
    tuple_weights: dict[TupleKey, float] = {}
    num = 0.0
    den = 0.0
    for key, users in eligible:
        trials = groups.get(key)
        if not trials:
            continue
        per_locale, mean = tuple_accuracy(trials)
        counts: dict[str, list[int]] = {}
        for r in trials:
            cell = counts.setdefault(r.truth, [0, 0])
            cell[0] += 1
            cell[1] += r.predicted == r.truth
        cells[key] = {
            tag: Cell(n=c[0], correct=c[1]) for tag, c in sorted(counts.items())
        }
        tuple_means[key] = mean
        tuple_weights[key] = users
        num += users * mean
        den += users
    if den == 0.0:
        raise BadInputError("no overlap between population stats and results")

    worst_cell = min(
        (
            (cell.accuracy, key, tag)
            for key, row in sorted(cells.items())
            for tag, cell in row.items()
        ),
        key=lambda item: (item[0], item[1], item[2]),
    )
    worst_tuple = min(
        ((acc, key) for key, acc in sorted(tuple_means.items())),
        key=lambda item: (item[0], item[1]),
    )
    return EvalReport(
        cells=cells,
        tuple_means=tuple_means,
        tuple_weights=tuple_weights,
        aua=num / den,
        worst_cell=worst_cell,
        worst_tuple=worst_tuple,
        mean_latency=sum(r.latency for r in results) / len(results),
        recognizer=recognizer_cost(results, fixed_window),
        n_trials=len(results),
        meta=dict(meta or {}),
    )


@dataclass(frozen=True)
class Comparison:
    names: tuple[str, ...]
    tuple_accuracies: dict[TupleKey, tuple[float, ...]]
    aua: tuple[float, ...]
    worst_cell: tuple[float, ...]
    aua_delta: float
    worst_cell_delta: float


def compare(reports: list[tuple[str, EvalReport]]) -> Comparison:
    """Side-by-side tuple accuracies and metric deltas (last minus first).

    Reports whose tuple sets differ are intersected, with a warning.
    """
    if len(reports) < 2:
        raise BadInputError("compare needs at least two reports")
    names = tuple(name for name, _ in reports)
    key_sets = [set(rep.tuple_means) for _, rep in reports]
    shared = set.intersection(*key_sets)
    if any(ks != shared for ks in key_sets):
        warnings.warn(
            "reports cover different tuple sets; comparing the intersection",
            EvalWarning,
            stacklevel=2,
        )
    if not shared:
        raise BadInputError("compared reports share no locale tuples")
    rows = {
        key: tuple(rep.tuple_means[key] for _, rep in reports)
        for key in sorted(shared)
    }
    auas = tuple(rep.aua for _, rep in reports)
    worsts = tuple(rep.worst_cell[0] for _, rep in reports)
    return Comparison(
        names=names,
        tuple_accuracies=rows,
        aua=auas,
        worst_cell=worsts,
        aua_delta=auas[-1] - auas[0],
        worst_cell_delta=worsts[-1] - worsts[0],
    )


def _fmt(x: float) -> str:
    return format(float(x), ".12g")


def write_report_csv(report: EvalReport, out_dir, prefix: str = "report") -> list[str]:
    """Emit cells, tuples and summary CSVs plus a bar-chart CSV and SVG.

    Returns the relative file names written.
    """
    written = []

    def emit(name: str, lines: list[str]) -> None:
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        written.append(name)

    meta_line = "# " + ",".join(
        f"{k}={report.meta[k]}" for k in sorted(report.meta)
    ) if report.meta else "#"

    lines = [meta_line, "tuple,truth_locale,n,correct,accuracy"]
    for key, row in sorted(report.cells.items()):
        for tag, cell in row.items():
            lines.append(
                f"{'|'.join(key)},{tag},{cell.n},{cell.correct},{_fmt(cell.accuracy)}"
            )
    emit(f"{prefix}_cells.csv", lines)

    lines = [meta_line, "tuple,monthly_users,mean_accuracy"]
    for key in sorted(report.tuple_means):
        lines.append(
            f"{'|'.join(key)},{_fmt(report.tuple_weights[key])},"
            f"{_fmt(report.tuple_means[key])}"
        )
    emit(f"{prefix}_tuples.csv", lines)

    worst_acc, worst_key, worst_tag = report.worst_cell
    lines = [
        meta_line,
        "metric,value",
        f"aua,{_fmt(report.aua)}",
        f"worst_cell_accuracy,{_fmt(worst_acc)}",
        f"worst_cell_tuple,{'|'.join(worst_key)}",
        f"worst_cell_locale,{worst_tag}",
        f"worst_tuple_accuracy,{_fmt(report.worst_tuple[0])}",
        f"worst_tuple,{'|'.join(report.worst_tuple[1])}",
        f"mean_latency_s,{_fmt(report.mean_latency)}",
        f"recognizer_baseline_s,{_fmt(report.recognizer.baseline_s)}",
        f"recognizer_actual_s,{_fmt(report.recognizer.actual_s)}",
        f"recognizer_saved_frac,{_fmt(report.recognizer.saved_frac)}",
        f"n_trials,{report.n_trials}",
    ]
    emit(f"{prefix}_summary.csv", lines)

    labels = ["|".join(key) for key in sorted(report.tuple_means)]
    values = [report.tuple_means[key] for key in sorted(report.tuple_means)]
    emit(
        f"{prefix}_plot.csv",
        [meta_line, "tuple,accuracy"]
        + [f"{l},{_fmt(v)}" for l, v in zip(labels, values)],
    )
    svg = bar_chart_svg(labels, {"accuracy": values})
    emit_path = os.path.join(out_dir, f"{prefix}_plot.svg")
    with open(emit_path, "w", encoding="utf-8") as fh:
        fh.write(svg)
    written.append(f"{prefix}_plot.svg")
    return written


def write_comparison_csv(comp: Comparison, out_dir, prefix: str = "compare") -> list[str]:
    written = []
    header = "tuple," + ",".join(comp.names) + ",delta"
    lines = [header]
    for key, accs in sorted(comp.tuple_accuracies.items()):
        delta = accs[-1] - accs[0]
        lines.append(
            f"{'|'.join(key)}," + ",".join(_fmt(a) for a in accs) + f",{_fmt(delta)}"
        )
    path = os.path.join(out_dir, f"{prefix}_tuples.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    written.append(f"{prefix}_tuples.csv")

    lines = ["metric," + ",".join(comp.names) + ",delta"]
    lines.append("aua," + ",".join(_fmt(a) for a in comp.aua) + f",{_fmt(comp.aua_delta)}")
    lines.append(
        "worst_cell,"
        + ",".join(_fmt(w) for w in comp.worst_cell)
        + f",{_fmt(comp.worst_cell_delta)}"
    )
    path = os.path.join(out_dir, f"{prefix}_summary.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    written.append(f"{prefix}_summary.csv")

    labels = ["|".join(key) for key in sorted(comp.tuple_accuracies)]
    series = {
        name: [comp.tuple_accuracies[key][i] for key in sorted(comp.tuple_accuracies)]
        for i, name in enumerate(comp.names)
    }
    path = os.path.join(out_dir, f"{prefix}_plot.svg")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(bar_chart_svg(labels, series))
    written.append(f"{prefix}_plot.svg")
    return written


def bar_chart_svg(labels: list[str], series: dict[str, list[float]]) -> str:
    """Minimal grouped bar chart, deterministic output, values in [0, 1]."""
    width, height, margin = 800, 300, 40
    plot_w, plot_h = width - 2 * margin, height - 2 * margin
    n_groups = max(1, len(labels))
    n_series = max(1, len(series))
    group_w = plot_w / n_groups
    bar_w = group_w * 0.8 / n_series
    palette = ["#4878a8", "#e49444", "#5ba053", "#b04f4f", "#85584d", "#8a6fae"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = margin + plot_h * (1 - frac)
        parts.append(
            f'<line x1="{margin}" y1="{_fmt(y)}" x2="{width - margin}" y2="{_fmt(y)}" '
            f'stroke="#dddddd"/>'
        )
        parts.append(
            f'<text x="{margin - 6}" y="{_fmt(y + 4)}" font-size="10" '
            f'text-anchor="end">{_fmt(frac)}</text>'
        )
    for g, label in enumerate(labels):
        for s, (name, values) in enumerate(sorted(series.items())):
            v = max(0.0, min(1.0, values[g]))
            x = margin + g * group_w + group_w * 0.1 + s * bar_w
            h = plot_h * v
            y = margin + plot_h - h
            parts.append(
                f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(bar_w)}" '
                f'height="{_fmt(h)}" fill="{palette[s % len(palette)]}"/>'
            )
        parts.append(
            f'<text x="{_fmt(margin + (g + 0.5) * group_w)}" y="{height - margin + 14}" '
            f'font-size="9" text-anchor="middle">{label}</text>'
        )
    for s, name in enumerate(sorted(series)):
        x = margin + s * 120
        parts.append(
            f'<rect x="{_fmt(x)}" y="8" width="10" height="10" '
            f'fill="{palette[s % len(palette)]}"/>'
        )
        parts.append(f'<text x="{_fmt(x + 14)}" y="17" font-size="10">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
