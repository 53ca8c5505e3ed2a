"""Synthetic multilingual populations, features, audio and context signals.

Real usage data for this problem is private, so experiments run on
generated corpora whose difficulty is engineered: each locale gets a
Gaussian feature prototype, and *links* blend one prototype's
parameters toward another's to create confusable accents (an
underrepresented accent class sitting close to a foreign language) or
exact acoustic ties (two scripts of the same spoken language).  Context
behavior (how often the selected locale matches the truth, how often a
switch is toggled) is part of the population spec.

Everything is a pure function of (spec, seed): per-utterance seeds are
derived by hashing the global seed with the utterance id, so parallel
and serial generation produce identical bytes, and a manifest line is
enough to regenerate an utterance's features.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .dsp import (
    AudioBuffer,
    FeatureSequence,
    read_features,
    read_wav,
    write_features,
    write_wav,
)
from .errors import BadInputError
from .evaluation import PopulationStats, load_stats, save_stats
from .registry import Registry, build_registry, load_registry, save_registry

MANIFEST_VERSION = 1
SPEC_VERSION = 1
FRAME_SHIFT_S = 0.010
AUDIO_SAMPLE_RATE = 16_000


def derive_seed(global_seed: int, *parts) -> int:
    """Stable per-item seed: hash of the global seed and identifying parts."""
    text = ":".join([str(global_seed)] + [str(p) for p in parts])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class AccentPrototype:
    """Per-locale Gaussian feature source.

    The mean is a deterministic unit direction (from ``mean_seed``)
    scaled by ``mean_scale``; ``cov_scale`` is the per-frame isotropic
    variance and ``drift`` the per-utterance mean jitter scale.  Links
    interpolate all three parameters toward other prototypes, so a blend
    weight of 1 reproduces the linked prototype exactly.
    """

    locale: str
    mean_seed: int
    mean_scale: float
    cov_scale: float = 1.0
    drift: float = 0.25
    links: tuple[tuple[str, float], ...] = ()
    tone_hz: float | None = None  # audio-kind corpora only

    def __post_init__(self):
        if self.cov_scale < 0 or self.drift < 0 or self.mean_scale < 0:
            raise BadInputError(f"prototype {self.locale}: negative scale")
        total = 0.0
        for _, w in self.links:
            if not 0.0 <= w <= 1.0:
                raise BadInputError(f"prototype {self.locale}: blend weight {w}")
            total += w
        if total > 1.0 + 1e-12:
            raise BadInputError(f"prototype {self.locale}: blend weights exceed 1")

    def base_mean(self, n_dims: int) -> np.ndarray:
        rng = np.random.default_rng(self.mean_seed)
        v = rng.standard_normal(n_dims)
        norm = np.linalg.norm(v)
        return (v / norm) * self.mean_scale if norm > 0 else v


@dataclass(frozen=True)
class TupleSpec:
    locales: tuple[str, ...]
    monthly_users: float
    utterances: int
    truth_shares: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "locales", tuple(sorted(self.locales)))
        if self.monthly_users <= 0:
            raise BadInputError(f"tuple {self.locales}: monthly_users must be > 0")
        if self.utterances < 0:
            raise BadInputError(f"tuple {self.locales}: negative utterance count")
        for tag in self.truth_shares:
            if tag not in self.locales:
                raise BadInputError(f"truth share for {tag!r} outside tuple")


@dataclass(frozen=True)
class ContextBehavior:
    p_selected_correct: float = 0.9
    p_toggle_given_switch: float = 0.3

    def __post_init__(self):
        for name in ("p_selected_correct", "p_toggle_given_switch"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise BadInputError(f"{name} must be in [0, 1]")


@dataclass(frozen=True)
class PopulationSpec:
    seed: int
    registry_specs: tuple[tuple[str, str], ...]
    prototypes: tuple[AccentPrototype, ...]
    tuples: tuple[TupleSpec, ...]
    context: ContextBehavior = field(default_factory=ContextBehavior)
    kind: str = "features"  # "features" or "audio"
    n_dims: int = 40
    duration_range_s: tuple[float, float] = (2.2, 3.0)
    materialize: bool = False

    def __post_init__(self):
        if self.kind not in ("features", "audio"):
            raise BadInputError(f"unknown corpus kind {self.kind!r}")
        lo, hi = self.duration_range_s
        if not 0 < lo <= hi:
            raise BadInputError("bad duration range")
        tags = {tag for tag, _ in self.registry_specs}
        by_locale = {p.locale for p in self.prototypes}
        for p in self.prototypes:
            if p.locale not in tags:
                raise BadInputError(f"prototype for unknown locale {p.locale!r}")
            for target, _ in p.links:
                if target not in by_locale:
                    raise BadInputError(
                        f"prototype {p.locale} links to unknown prototype {target!r}"
                    )
        seen = set()
        for t in self.tuples:
            if t.locales in seen:
                raise BadInputError(f"duplicate tuple {t.locales}")
            seen.add(t.locales)
            for tag in t.locales:
                if tag not in by_locale:
                    raise BadInputError(f"tuple references {tag!r} with no prototype")

    def registry(self) -> Registry:
        return build_registry(self.registry_specs)

    def prototype(self, locale: str) -> AccentPrototype:
        for p in self.prototypes:
            if p.locale == locale:
                return p
        raise BadInputError(f"no prototype for locale {locale!r}")

    def population_stats(self) -> PopulationStats:
        return PopulationStats(
            tuple((t.locales, t.monthly_users) for t in self.tuples)
        )


def effective_prototype(
    spec: PopulationSpec, locale: str
) -> tuple[np.ndarray, float, float]:
    """Blend a prototype's (mean, cov_scale, drift) with its links."""
    proto = spec.prototype(locale)
    own_w = 1.0 - sum(w for _, w in proto.links)
    mean = own_w * proto.base_mean(spec.n_dims)
    cov = own_w * proto.cov_scale
    drift = own_w * proto.drift
    for target, w in proto.links:
        other = spec.prototype(target)
        mean = mean + w * other.base_mean(spec.n_dims)
        cov += w * other.cov_scale
        drift += w * other.drift
    return mean, cov, drift


def sample_population(spec: PopulationSpec, n_users: int, seed: int) -> list[tuple[str, ...]]:
    """One installed tuple per user, proportional to monthly users.

    Counts use largest-remainder rounding (exact for exact ratios); the
    per-user order is a seeded shuffle.
    """
    weights = np.array([t.monthly_users for t in spec.tuples], dtype=np.float64)
    quotas = n_users * weights / weights.sum()
    counts = np.floor(quotas).astype(int)
    remainder = n_users - counts.sum()
    if remainder > 0:
        fractional = quotas - np.floor(quotas)
        # ties resolve by tuple order in the spec
        order = np.argsort(-fractional, kind="stable")
        for i in order[:remainder]:
            counts[i] += 1
    users: list[tuple[str, ...]] = []
    for t, c in zip(spec.tuples, counts):
        users.extend([t.locales] * int(c))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(users))
    return [users[i] for i in perm]


def synth_features(
    mean: np.ndarray, cov_scale: float, drift: float, duration_s: float, seed: int
) -> FeatureSequence:
    """Gaussian frames around a per-utterance jittered mean."""
    n_frames = int(round(duration_s / FRAME_SHIFT_S))
    if n_frames < 1:
        raise BadInputError("duration shorter than one frame")
    rng = np.random.default_rng(seed)
    jitter = drift * rng.standard_normal(len(mean))
    frames = mean + jitter + np.sqrt(cov_scale) * rng.standard_normal(
        (n_frames, len(mean))
    )
    return FeatureSequence(frames)


def synth_burst_audio(tone_hz: float, duration_s: float, seed: int) -> AudioBuffer:
    """Tone bursts over a low noise floor, with leading quiet.

    The tone gates on and off (100 ms on / 100 ms off), so even after
    mean normalization the band at tone_hz keeps fluctuating and stays
    classifiable; the leading quiet section gives speech detection
    something to find.
    """
    rng = np.random.default_rng(seed)
    lead_s = float(rng.uniform(0.15, 0.35))
    sr = AUDIO_SAMPLE_RATE
    n_lead = int(round(lead_s * sr))
    n_active = int(round(duration_s * sr))
    n = n_lead + n_active
    samples = 0.003 * rng.standard_normal(n)
    t = np.arange(n_active) / sr
    phase = rng.uniform(0.0, 2 * np.pi)
    tone = 0.15 * np.sin(2 * np.pi * tone_hz * t + phase)
    gate = (np.floor(t / 0.1).astype(int) % 2) == 0
    samples[n_lead:] += tone * gate
    return AudioBuffer(np.clip(samples, -1.0, 1.0), sr)


def gen_context(
    truth: str,
    tuple_locales: tuple[str, ...],
    behavior: ContextBehavior,
    seed: int,
) -> tuple[str, bool]:
    """Draw (selected locale, toggled flag) for one request.

    Two-step behavior model: the user's selected locale matches the
    truth with probability p_selected_correct, otherwise it is uniform
    over the other installed locales.  When it matches, the selection
    counts as a fresh toggle with probability p_toggle_given_switch;
    a stale mismatched selection is never a fresh toggle.
    """
    if truth not in tuple_locales:
        raise BadInputError(f"truth {truth!r} not in tuple {tuple_locales}")
    rng = np.random.default_rng(seed)
    others = [tag for tag in tuple_locales if tag != truth]
    if not others or rng.uniform() < behavior.p_selected_correct:
        selected = truth
    else:
        selected = others[int(rng.integers(len(others)))]
    toggled = bool(
        selected == truth and rng.uniform() < behavior.p_toggle_given_switch
    )
    return selected, toggled


@dataclass(frozen=True)
class UtteranceRecord:
    id: str
    truth: str
    installed: tuple[str, ...]
    selected: str
    toggled: bool
    duration_s: float
    gen_seed: int
    feature_path: str | None = None
    audio_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "installed", tuple(sorted(self.installed)))
        if self.truth not in self.installed:
            raise BadInputError(f"{self.id}: truth not in installed set")
        if self.selected not in self.installed:
            raise BadInputError(f"{self.id}: selected not in installed set")
        if self.duration_s <= 0:
            raise BadInputError(f"{self.id}: non-positive duration")

    def to_json(self) -> str:
        record = {
            "id": self.id,
            "truth": self.truth,
            "installed": list(self.installed),
            "selected": self.selected,
            "toggled": self.toggled,
            "duration_s": self.duration_s,
            "gen_seed": self.gen_seed,
        }
        if self.feature_path is not None:
            record["feature_path"] = self.feature_path
        if self.audio_path is not None:
            record["audio_path"] = self.audio_path
        return json.dumps(record, sort_keys=True)


def _spec_to_dict(spec: PopulationSpec) -> dict:
    return {
        "version": SPEC_VERSION,
        "seed": spec.seed,
        "kind": spec.kind,
        "n_dims": spec.n_dims,
        "duration_range_s": list(spec.duration_range_s),
        "materialize": spec.materialize,
        "context": {
            "p_selected_correct": spec.context.p_selected_correct,
            "p_toggle_given_switch": spec.context.p_toggle_given_switch,
        },
        "registry": [list(pair) for pair in spec.registry_specs],
        "prototypes": [
            {
                "locale": p.locale,
                "mean_seed": p.mean_seed,
                "mean_scale": p.mean_scale,
                "cov_scale": p.cov_scale,
                "drift": p.drift,
                "links": [list(link) for link in p.links],
                **({"tone_hz": p.tone_hz} if p.tone_hz is not None else {}),
            }
            for p in spec.prototypes
        ],
        "tuples": [
            {
                "locales": list(t.locales),
                "monthly_users": t.monthly_users,
                "utterances": t.utterances,
                **({"truth_shares": t.truth_shares} if t.truth_shares else {}),
            }
            for t in spec.tuples
        ],
    }


def spec_from_dict(data: dict) -> PopulationSpec:
    if data.get("version") != SPEC_VERSION:
        raise BadInputError(f"unsupported population spec version {data.get('version')}")
    try:
        prototypes = tuple(
            AccentPrototype(
                locale=p["locale"],
                mean_seed=int(p["mean_seed"]),
                mean_scale=float(p["mean_scale"]),
                cov_scale=float(p.get("cov_scale", 1.0)),
                drift=float(p.get("drift", 0.25)),
                links=tuple((l[0], float(l[1])) for l in p.get("links", [])),
                tone_hz=p.get("tone_hz"),
            )
            for p in data["prototypes"]
        )
        tuples = tuple(
            TupleSpec(
                locales=tuple(t["locales"]),
                monthly_users=float(t["monthly_users"]),
                utterances=int(t["utterances"]),
                truth_shares={k: float(v) for k, v in t.get("truth_shares", {}).items()},
            )
            for t in data["tuples"]
        )
        context = ContextBehavior(**data.get("context", {}))
        return PopulationSpec(
            seed=int(data["seed"]),
            registry_specs=tuple((r[0], r[1]) for r in data["registry"]),
            prototypes=prototypes,
            tuples=tuples,
            context=context,
            kind=data.get("kind", "features"),
            n_dims=int(data.get("n_dims", 40)),
            duration_range_s=tuple(data.get("duration_range_s", (2.2, 3.0))),
            materialize=bool(data.get("materialize", False)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise BadInputError(f"malformed population spec: {exc}") from exc


def load_spec(path) -> PopulationSpec:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise BadInputError(f"{path}: not valid JSON: {exc}") from exc
    return spec_from_dict(data)


def save_spec(spec: PopulationSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_spec_to_dict(spec), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _largest_remainder(weights: list[float], total: int) -> list[int]:
    w = np.asarray(weights, dtype=np.float64)
    if w.sum() <= 0:
        return [0] * len(weights)
    quotas = total * w / w.sum()
    counts = np.floor(quotas).astype(int)
    order = np.argsort(-(quotas - np.floor(quotas)), kind="stable")
    for i in order[: total - counts.sum()]:
        counts[i] += 1
    return [int(c) for c in counts]


def plan_utterances(spec: PopulationSpec) -> list[tuple[str, tuple[str, ...]]]:
    """Deterministic (truth locale, tuple) list covering the whole spec."""
    plan: list[tuple[str, tuple[str, ...]]] = []
    for t in spec.tuples:
        shares = [t.truth_shares.get(tag, 1.0) for tag in t.locales]
        counts = _largest_remainder(shares, t.utterances)
        for tag, count in zip(t.locales, counts):
            plan.extend([(tag, t.locales)] * count)
    return plan


def gen_corpus(spec: PopulationSpec, out_dir) -> tuple[list[UtteranceRecord], PopulationStats]:
    """Write manifest.jsonl, stats.tsv, registry.tsv and spec.json.

    Feature corpora store only the generation seed per utterance unless
    the spec asks to materialize blobs; audio corpora always write WAV
    files because they exist to exercise the audio frontend.
    """
    registry = spec.registry()  # validates tags
    os.makedirs(out_dir, exist_ok=True)
    records: list[UtteranceRecord] = []
    plan = plan_utterances(spec)
    write_blobs = spec.materialize and spec.kind == "features"
    if write_blobs:
        os.makedirs(os.path.join(out_dir, "features"), exist_ok=True)
    if spec.kind == "audio":
        os.makedirs(os.path.join(out_dir, "audio"), exist_ok=True)

    for index, (truth, tuple_locales) in enumerate(plan):
        utt_id = f"u{index:06d}"
        meta_rng = np.random.default_rng(derive_seed(spec.seed, utt_id, "meta"))
        lo, hi = spec.duration_range_s
        duration = round(float(meta_rng.uniform(lo, hi)), 3)
        selected, toggled = gen_context(
            truth, tuple_locales, spec.context, derive_seed(spec.seed, utt_id, "ctx")
        )
        gen_seed = derive_seed(spec.seed, utt_id, "signal")
        feature_path = None
        audio_path = None
        if write_blobs:
            feature_path = f"features/{utt_id}.lidf"
            mean, cov, drift = effective_prototype(spec, truth)
            write_features(
                os.path.join(out_dir, feature_path),
                synth_features(mean, cov, drift, duration, gen_seed),
            )
        if spec.kind == "audio":
            audio_path = f"audio/{utt_id}.wav"
            proto = spec.prototype(truth)
            if proto.tone_hz is None:
                raise BadInputError(f"audio corpus needs tone_hz for {truth}")
            write_wav(
                os.path.join(out_dir, audio_path),
                synth_burst_audio(proto.tone_hz, duration, gen_seed),
            )
        records.append(
            UtteranceRecord(
                id=utt_id,
                truth=truth,
                installed=tuple_locales,
                selected=selected,
                toggled=toggled,
                duration_s=duration,
                gen_seed=gen_seed,
                feature_path=feature_path,
                audio_path=audio_path,
            )
        )

    stats = spec.population_stats()
    save_stats(stats, os.path.join(out_dir, "stats.tsv"))
    save_registry(registry, os.path.join(out_dir, "registry.tsv"))
    save_spec(spec, os.path.join(out_dir, "spec.json"))
    meta = {
        "type": "meta",
        "version": MANIFEST_VERSION,
        "seed": spec.seed,
        "kind": spec.kind,
        "registry": "registry.tsv",
        "stats": "stats.tsv",
        "spec": "spec.json",
    }
    with open(os.path.join(out_dir, "manifest.jsonl"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
        for record in records:
            fh.write(record.to_json() + "\n")
    return records, stats


class CorpusReader:
    """Read a generated corpus back: records, registry, stats, features."""

    def __init__(self, manifest_path):
        self.root = os.path.dirname(os.path.abspath(manifest_path))
        with open(manifest_path, "r", encoding="utf-8") as fh:
            lines = [line for line in fh.read().splitlines() if line.strip()]
        if not lines:
            raise BadInputError(f"{manifest_path}: empty manifest")
        meta = json.loads(lines[0])
        if meta.get("type") != "meta" or meta.get("version") != MANIFEST_VERSION:
            raise BadInputError(f"{manifest_path}: missing or unsupported meta line")
        self.meta = meta
        self.spec = load_spec(os.path.join(self.root, meta["spec"]))
        self.records = []
        for line in lines[1:]:
            data = json.loads(line)
            self.records.append(
                UtteranceRecord(
                    id=data["id"],
                    truth=data["truth"],
                    installed=tuple(data["installed"]),
                    selected=data["selected"],
                    toggled=bool(data["toggled"]),
                    duration_s=float(data["duration_s"]),
                    gen_seed=int(data["gen_seed"]),
                    feature_path=data.get("feature_path"),
                    audio_path=data.get("audio_path"),
                )
            )

    def registry(self) -> Registry:
        return load_registry(os.path.join(self.root, self.meta["registry"]))

    def stats(self) -> PopulationStats:
        return load_stats(os.path.join(self.root, self.meta["stats"]))

    def features_for(self, record: UtteranceRecord) -> FeatureSequence:
        """Materialized blob if present, else regenerate from the seed."""
        if record.feature_path is not None:
            return read_features(os.path.join(self.root, record.feature_path))
        if self.spec.kind == "audio":
            raise BadInputError(
                f"{record.id}: audio corpora go through the DSP frontend"
            )
        mean, cov, drift = effective_prototype(self.spec, record.truth)
        return synth_features(mean, cov, drift, record.duration_s, record.gen_seed)

    def audio_for(self, record: UtteranceRecord) -> AudioBuffer:
        if record.audio_path is None:
            raise BadInputError(f"{record.id}: no audio in this corpus")
        return read_wav(os.path.join(self.root, record.audio_path))
