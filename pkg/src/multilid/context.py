"""Second decision stage: locale projection, installed-set masking, and
naive-Bayes fusion of interaction context signals.

The acoustic stage emits language posteriors.  This stage copies each
language's posterior onto all of that language's locales, zeroes out the
locales not installed on the device, rescales to a simplex, and then
multiplies in likelihoods for two context signals: which locale the user
currently has selected, and whether they toggled it right before the
request.  The likelihood tables are small Laplace-smoothed conditionals
fitted from usage records, kept deliberately tiny so they stay readable
in a text file.

Two binary event families parameterize the selected-locale signal:
whether the selection matches the ground truth exactly, and whether it
at least matches at the language level.  The toggle signal is a
Bernoulli conditioned on the exact match.  Ablation flags make any
signal contribute a factor of exactly 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BadInputError
from .registry import Level, PosteriorVector, Registry


@dataclass(frozen=True)
class AblationMask:
    """Signals to ignore during fusion (an ignored signal multiplies by 1)."""

    selected: bool = False
    toggled: bool = False

    @classmethod
    def all_on(cls) -> "AblationMask":
        return cls(selected=True, toggled=True)


@dataclass(frozen=True)
class ContextSignals:
    installed: frozenset[int]  # locale ids
    selected: int  # locale id, member of installed
    toggled: bool
    ablation: AblationMask = field(default_factory=AblationMask)

    def __post_init__(self):
        if not self.installed:
            raise BadInputError("installed locale set is empty")
        if self.selected not in self.installed:
            raise BadInputError("selected locale is not installed")


@dataclass(frozen=True)
class ContextCPT:
    """Conditional tables for the two context signals.

    ``p_selected_given_truth`` maps (selected == truth, same language) to
    the joint likelihood of those two binary events; because the family
    factorizes, the four entries sum to 1.  ``p_toggled_given_truth``
    maps (toggled, selected == truth) to P(toggled | match), so each
    match column sums to 1.  All entries are strictly positive once
    smoothing is applied.
    """

    p_selected_given_truth: dict[tuple[bool, bool], float]
    p_toggled_given_truth: dict[tuple[bool, bool], float]
    alpha: float = 1.0

    def __post_init__(self):
        for probs in (self.p_selected_given_truth, self.p_toggled_given_truth):
            for value in probs.values():
                if not (0.0 < value < 1.0 or value == 1.0):
                    raise BadInputError(f"CPT entry {value} outside (0, 1]")
        total = sum(self.p_selected_given_truth.values())
        if abs(total - 1.0) > 1e-9:
            raise BadInputError("selected-signal table does not sum to 1")
        for match in (True, False):
            col = (
                self.p_toggled_given_truth[(True, match)]
                + self.p_toggled_given_truth[(False, match)]
            )
            if abs(col - 1.0) > 1e-9:
                raise BadInputError("toggle table column does not sum to 1")

    @classmethod
    def uniform(cls) -> "ContextCPT":
        """Every event equally likely; fusion with this table is a no-op."""
        selected = {(a, b): 0.25 for a in (True, False) for b in (True, False)}
        toggled = {(a, b): 0.5 for a in (True, False) for b in (True, False)}
        return cls(selected, toggled, alpha=0.0)

    def selected_likelihood(self, exact_match: bool, same_language: bool) -> float:
        return self.p_selected_given_truth[(exact_match, same_language)]

    def toggled_likelihood(self, toggled: bool, exact_match: bool) -> float:
        return self.p_toggled_given_truth[(toggled, exact_match)]


@dataclass(frozen=True)
class Decision:
    """Final locale pick with its posterior and confidence."""

    locale: int
    posterior: PosteriorVector
    confidence: float


def project_to_locales(lang_post: PosteriorVector, registry: Registry) -> np.ndarray:
    """Copy each language's posterior onto all its locales.

    The result is intentionally unnormalized: locales of the same
    language share one value, so the vector sums to more than 1 whenever
    a language has several locales.
    """
    if lang_post.level is not Level.LANGUAGE:
        raise BadInputError(f"expected a language posterior, got {lang_post.level}")
    if len(lang_post.values) != registry.n_languages:
        raise BadInputError("language posterior does not match registry")
    return lang_post.values[registry.locale_language]


def mask_and_renormalize(
    scores: np.ndarray, installed: frozenset[int], n_locales: int
) -> PosteriorVector:
    """Zero out uninstalled locales and rescale the rest to sum to 1.

    If every installed locale has score 0 the result degenerates to
    uniform over the installed set.
    """
    if not installed:
        raise BadInputError("installed locale set is empty")
    scores = np.asarray(scores, dtype=np.float64)
    masked = np.zeros(n_locales)
    idx = np.fromiter(installed, dtype=np.int64)
    masked[idx] = scores[idx]
    total = masked.sum()
    if total <= 0.0:
        masked[idx] = 1.0 / len(idx)
    else:
        masked /= total
    return PosteriorVector(Level.LOCALE, masked)


def _decide(posterior: PosteriorVector) -> Decision:
    # argmax ties resolve to the lowest locale id
    locale = posterior.argmax()
    return Decision(locale, posterior, float(posterior.values[locale]))


def decide_acoustic(posterior: PosteriorVector) -> Decision:
    """Decision straight from a masked acoustic posterior (no context)."""
    return _decide(posterior)


def fuse(
    acoustic_post: PosteriorVector,
    ctx: ContextSignals,
    cpt: ContextCPT,
    registry: Registry,
) -> Decision:
    """Multiply signal likelihoods into the masked acoustic posterior.

    For each candidate truth locale the selected-locale signal
    contributes P(match events | truth) and the toggle signal
    P(toggled | match); ablated signals contribute exactly 1.  The
    products renormalize back to a simplex over the installed set.
    """
    if acoustic_post.level is not Level.LOCALE:
        raise BadInputError("fuse expects a locale posterior")
    scores = acoustic_post.values.copy()
    support = np.flatnonzero(scores)
    off_support = set(int(i) for i in support) - set(ctx.installed)
    if off_support:
        raise BadInputError("acoustic posterior has mass outside the installed set")

    selected_lang = registry.language_of(ctx.selected)
    for locale_id in ctx.installed:
        factor = 1.0
        if not ctx.ablation.selected:
            exact = locale_id == ctx.selected
            same_lang = registry.language_of(locale_id) == selected_lang
            factor *= cpt.selected_likelihood(exact, same_lang)
        if not ctx.ablation.toggled:
            factor *= cpt.toggled_likelihood(ctx.toggled, locale_id == ctx.selected)
        scores[locale_id] *= factor

    total = scores.sum()
    if total <= 0.0:
        idx = np.fromiter(ctx.installed, dtype=np.int64)
        scores[:] = 0.0
        scores[idx] = 1.0 / len(idx)
    else:
        scores /= total
    return _decide(PosteriorVector(Level.LOCALE, scores))


def fit_cpt(
    stats: list[tuple[int, ContextSignals]],
    registry: Registry,
    alpha: float = 1.0,
) -> ContextCPT:
    """Estimate the conditional tables from (truth locale, signals) records.

    Each binary family uses Laplace smoothing:
    (count + alpha) / (total + 2 * alpha).  With alpha -> 0 the entries
    approach the raw empirical frequencies; an empty bucket with
    alpha > 0 falls back to uniform.
    """
    if not stats:
        raise BadInputError("no context statistics to fit")
    if alpha < 0:
        raise BadInputError("alpha must be nonnegative")

    n = len(stats)
    exact_matches = 0
    lang_matches = 0
    toggled_by_match = {True: 0, False: 0}
    totals_by_match = {True: 0, False: 0}
    for truth, ctx in stats:
        exact = ctx.selected == truth
        same_lang = registry.language_of(ctx.selected) == registry.language_of(truth)
        exact_matches += exact
        lang_matches += same_lang
        totals_by_match[exact] += 1
        toggled_by_match[exact] += ctx.toggled

    def smoothed(count: int, total: int) -> float:
        if total + 2 * alpha == 0:
            return 0.5
        return (count + alpha) / (total + 2 * alpha)

    p_exact = smoothed(exact_matches, n)
    p_lang = smoothed(lang_matches, n)
    selected = {
        (True, True): p_exact * p_lang,
        (True, False): p_exact * (1.0 - p_lang),
        (False, True): (1.0 - p_exact) * p_lang,
        (False, False): (1.0 - p_exact) * (1.0 - p_lang),
    }
    toggled = {}
    for match in (True, False):
        p_t = smoothed(toggled_by_match[match], totals_by_match[match])
        toggled[(True, match)] = p_t
        toggled[(False, match)] = 1.0 - p_t
    return ContextCPT(selected, toggled, alpha=alpha)


_CPT_KEYS = {
    "p_selected_match_locale": None,
    "p_selected_match_language": None,
    "p_toggled_given_match": None,
    "p_toggled_given_mismatch": None,
}


def save_cpt(path, cpt: ContextCPT) -> None:
    """Write the tables as readable key = value text."""
    p_exact = cpt.p_selected_given_truth[(True, True)] + cpt.p_selected_given_truth[
        (True, False)
    ]
    p_lang = cpt.p_selected_given_truth[(True, True)] + cpt.p_selected_given_truth[
        (False, True)
    ]
    lines = [
        "# context signal likelihood tables",
        f"alpha = {cpt.alpha!r}",
        f"p_selected_match_locale = {p_exact!r}",
        f"p_selected_match_language = {p_lang!r}",
        f"p_toggled_given_match = {cpt.p_toggled_given_truth[(True, True)]!r}",
        f"p_toggled_given_mismatch = {cpt.p_toggled_given_truth[(True, False)]!r}",
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_cpt(path) -> ContextCPT:
    values: dict[str, float] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise BadInputError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip()
            if key != "alpha" and key not in _CPT_KEYS:
                raise BadInputError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = float(value.strip())
    missing = set(_CPT_KEYS) - set(values)
    if missing:
        raise BadInputError(f"{path}: missing keys {sorted(missing)}")
    p_exact = values["p_selected_match_locale"]
    p_lang = values["p_selected_match_language"]
    selected = {
        (True, True): p_exact * p_lang,
        (True, False): p_exact * (1.0 - p_lang),
        (False, True): (1.0 - p_exact) * p_lang,
        (False, False): (1.0 - p_exact) * (1.0 - p_lang),
    }
    toggled = {
        (True, True): values["p_toggled_given_match"],
        (False, True): 1.0 - values["p_toggled_given_match"],
        (True, False): values["p_toggled_given_mismatch"],
        (False, False): 1.0 - values["p_toggled_given_mismatch"],
    }
    return ContextCPT(selected, toggled, alpha=values.get("alpha", 1.0))
