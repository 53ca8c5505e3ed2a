"""Locale / language / target-class identity system.

A *locale* is a language-location or language-script pair ("en-US",
"hi-Latn"); every locale belongs to exactly one *language* ("en", "hi").
The acoustic model is trained on *target classes*, which may be the
locales themselves, the languages, or hand-split groups of locales
(e.g. en-L1 / en-L2 / en-IN).  This module owns those three id spaces
and the mappings between them, plus the logit max-pooling that turns
per-class scores into language posteriors.

Ids are dense integers assigned in insertion order, so hot loops can
index plain arrays instead of hashing tags.  Registries and schemes are
immutable after construction and safe to share across workers.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import BadInputError

# "ll-RR" (region) or "ll-Scr" (4-letter script), e.g. en-US, hi-Latn.
_LOCALE_TAG_RE = re.compile(r"^[a-z]{2,3}-(?:[A-Z]{2}|[A-Z][a-z]{3})$")
_LANGUAGE_TAG_RE = re.compile(r"^[a-z]{2,3}$")


class Level(Enum):
    """Which id space a posterior vector lives in."""

    TARGET_CLASS = "target_class"
    LANGUAGE = "language"
    LOCALE = "locale"


@dataclass(frozen=True)
class Language:
    id: int
    tag: str


@dataclass(frozen=True)
class Locale:
    id: int
    tag: str
    language: Language


@dataclass(frozen=True)
class PosteriorVector:
    """Probability vector over one id space.

    ``values[i]`` is the probability of the entity with id ``i``.  Unless
    ``normalized`` is False the values must form a simplex (sum to 1).
    """

    level: Level
    values: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if not np.all(np.isfinite(v)):
            raise BadInputError("posterior contains non-finite values")
        if np.any(v < 0.0) or np.any(v > 1.0 + 1e-9):
            raise BadInputError("posterior values outside [0, 1]")
        if self.normalized and abs(float(v.sum()) - 1.0) > 1e-9:
            raise BadInputError(
                f"posterior over {self.level.value} sums to {v.sum():.12f}, not 1"
            )

    def argmax(self) -> int:
        """Index of the largest value; ties resolve to the lowest id."""
        return int(np.argmax(self.values))

    def as_dict(self) -> dict[int, float]:
        return {i: float(p) for i, p in enumerate(self.values)}


class Registry:
    """Immutable set of locales and their languages.

    Built once via :func:`build_registry`; afterwards only lookups.
    """

    def __init__(self, locales: Sequence[Locale], languages: Sequence[Language]):
        self._locales = tuple(locales)
        self._languages = tuple(languages)
        self._locale_by_tag = {loc.tag: loc for loc in self._locales}
        self._language_by_tag = {lang.tag: lang for lang in self._languages}
        # locale id -> language id, as an array for hot-loop indexing
        self.locale_language = np.array(
            [loc.language.id for loc in self._locales], dtype=np.int64
        )

    @property
    def locales(self) -> tuple[Locale, ...]:
        return self._locales

    @property
    def languages(self) -> tuple[Language, ...]:
        return self._languages

    @property
    def n_locales(self) -> int:
        return len(self._locales)

    @property
    def n_languages(self) -> int:
        return len(self._languages)

    def locale(self, tag: str) -> Locale:
        try:
            return self._locale_by_tag[tag]
        except KeyError:
            raise BadInputError(f"unknown locale tag {tag!r}") from None

    def language(self, tag: str) -> Language:
        try:
            return self._language_by_tag[tag]
        except KeyError:
            raise BadInputError(f"unknown language tag {tag!r}") from None

    def has_locale(self, tag: str) -> bool:
        return tag in self._locale_by_tag

    def language_of(self, locale_id: int) -> int:
        return int(self.locale_language[locale_id])

    def locale_tags(self) -> tuple[str, ...]:
        return tuple(loc.tag for loc in self._locales)


def build_registry(locale_specs: Iterable[tuple[str, str]]) -> Registry:
    """Create a registry from (locale_tag, language_tag) pairs.

    Integer ids are assigned in insertion order, for locales and for
    languages alike (a language gets its id when first referenced).
    """
    locales: list[Locale] = []
    languages: list[Language] = []
    lang_by_tag: dict[str, Language] = {}
    seen: set[str] = set()
    for locale_tag, language_tag in locale_specs:
        if not _LOCALE_TAG_RE.match(locale_tag):
            raise BadInputError(f"malformed locale tag {locale_tag!r}")
        if not _LANGUAGE_TAG_RE.match(language_tag):
            raise BadInputError(f"malformed language tag {language_tag!r}")
        if locale_tag in seen:
            raise BadInputError(f"duplicate locale tag {locale_tag!r}")
        seen.add(locale_tag)
        lang = lang_by_tag.get(language_tag)
        if lang is None:
            lang = Language(id=len(languages), tag=language_tag)
            languages.append(lang)
            lang_by_tag[language_tag] = lang
        locales.append(Locale(id=len(locales), tag=locale_tag, language=lang))
    return Registry(locales, languages)


def load_registry(path) -> Registry:
    """Read a registry fixture: one ``locale_tag<TAB>language_tag`` per line.

    Blank lines and ``#`` comments are ignored.
    """
    specs: list[tuple[str, str]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise BadInputError(f"{path}:{lineno}: expected 'locale<TAB>language'")
            specs.append((parts[0], parts[1]))
    return build_registry(specs)


def save_registry(registry: Registry, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# locale_tag<TAB>language_tag\n")
        for loc in registry.locales:
            fh.write(f"{loc.tag}\t{loc.language.tag}\n")


class SchemeKind(Enum):
    LOCALES = "locales"
    LANGUAGES = "languages"
    SPLIT = "split"


@dataclass(frozen=True)
class TargetScheme:
    """Mapping between locales and the classes the acoustic model predicts.

    ``locale_to_class`` and ``class_to_language`` are total over their id
    spaces; composing them always reproduces the locale's own language,
    so every target class belongs to exactly one language.
    """

    kind: SchemeKind
    class_names: tuple[str, ...]
    locale_to_class: np.ndarray  # locale id -> class id
    class_to_language: np.ndarray  # class id -> language id
    registry_tags: tuple[str, ...] = field(repr=False, default=())

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def class_of(self, locale_id: int) -> int:
        return int(self.locale_to_class[locale_id])


# split_spec: language_tag -> (carve-out class name -> locale tags, remainder class name)
SplitSpec = Mapping[str, tuple[Mapping[str, Iterable[str]], str]]


def build_scheme(
    kind: SchemeKind,
    registry: Registry,
    split_spec: SplitSpec | None = None,
) -> TargetScheme:
    """Build the training-target mapping for one of the three scheme kinds.

    LOCALES gives one class per locale and LANGUAGES one per language.
    SPLIT starts from LANGUAGES and, for each language mentioned in
    ``split_spec``, replaces the single language class with the named
    carve-out classes plus a remainder class for its leftover locales.
    """
    if kind is SchemeKind.LOCALES:
        names = tuple(loc.tag for loc in registry.locales)
        l2c = np.arange(registry.n_locales, dtype=np.int64)
        c2l = registry.locale_language.copy()
        return TargetScheme(kind, names, l2c, c2l, registry.locale_tags())

    if kind is SchemeKind.LANGUAGES:
        names = tuple(lang.tag for lang in registry.languages)
        l2c = registry.locale_language.copy()
        c2l = np.arange(registry.n_languages, dtype=np.int64)
        return TargetScheme(kind, names, l2c, c2l, registry.locale_tags())

    if kind is not SchemeKind.SPLIT:
        raise BadInputError(f"unknown scheme kind {kind!r}")
    if not split_spec:
        raise BadInputError("split scheme requires a split_spec")

    names: list[str] = []
    c2l_list: list[int] = []
    l2c = np.full(registry.n_locales, -1, dtype=np.int64)

    def add_class(name: str, language_id: int) -> int:
        if name in names:
            raise BadInputError(f"duplicate target class name {name!r}")
        names.append(name)
        c2l_list.append(language_id)
        return len(names) - 1

    split_by_lang_id: dict[int, tuple[Mapping[str, Iterable[str]], str]] = {}
    for lang_tag, entry in split_spec.items():
        split_by_lang_id[registry.language(lang_tag).id] = entry

    for lang in registry.languages:
        members = [loc for loc in registry.locales if loc.language.id == lang.id]
        if lang.id not in split_by_lang_id:
            cid = add_class(lang.tag, lang.id)
            for loc in members:
                l2c[loc.id] = cid
            continue
        carve_outs, remainder_name = split_by_lang_id[lang.id]
        claimed: set[int] = set()
        for class_name, locale_tags in carve_outs.items():
            cid = add_class(class_name, lang.id)
            for tag in locale_tags:
                loc = registry.locale(tag)
                if loc.language.id != lang.id:
                    raise BadInputError(
                        f"carve-out {class_name!r} references {tag!r}, "
                        f"which belongs to language {loc.language.tag!r}, not {lang.tag!r}"
                    )
                if loc.id in claimed:
                    raise BadInputError(f"locale {tag!r} appears in two carve-outs")
                claimed.add(loc.id)
                l2c[loc.id] = cid
        leftover = [loc for loc in members if loc.id not in claimed]
        if leftover:
            cid = add_class(remainder_name, lang.id)
            for loc in leftover:
                l2c[loc.id] = cid

    assert np.all(l2c >= 0), "split scheme left a locale unassigned"
    return TargetScheme(
        SchemeKind.SPLIT,
        tuple(names),
        l2c,
        np.array(c2l_list, dtype=np.int64),
        registry.locale_tags(),
    )


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - np.max(x)
    e = np.exp(z)
    return e / e.sum()


def pool_to_language(
    logits: np.ndarray,
    scheme: TargetScheme,
    n_languages: int,
    space: str = "logit",
) -> PosteriorVector:
    """Collapse per-class scores to a language posterior.

    In the default "logit" space each language takes the max over its
    classes' pre-softmax logits, and the softmax runs over the pooled
    logits.  The "posterior" space variant max-pools the class softmax
    instead and renormalizes; both orderings preserve the argmax since
    softmax is monotone.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != (scheme.n_classes,):
        raise BadInputError(
            f"expected {scheme.n_classes} class logits, got shape {logits.shape}"
        )
    if not np.all(np.isfinite(logits)):
        raise BadInputError("non-finite class logits")
    if space == "logit":
        pooled = np.full(n_languages, -np.inf)
        np.maximum.at(pooled, scheme.class_to_language, logits)
        if np.any(np.isneginf(pooled)):
            raise BadInputError("a language has no target class in this scheme")
        return PosteriorVector(Level.LANGUAGE, _softmax(pooled))
    if space == "posterior":
        post = _softmax(logits)
        pooled = np.zeros(n_languages)
        np.maximum.at(pooled, scheme.class_to_language, post)
        return PosteriorVector(Level.LANGUAGE, pooled / pooled.sum())
    raise BadInputError(f"unknown pooling space {space!r}")
