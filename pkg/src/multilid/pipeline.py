"""End-to-end decision path: features -> acoustic net -> context stage.

A pipeline bundles the registry, the training-target scheme, the network
and the context tables, and turns one utterance (features or audio) into
a locale Decision.  "acoustic_only" mode keeps the installed-set mask
but ablates the selected/toggled signals, which is how acoustic models
are compared without the context stage interfering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import acoustic, dsp
from .acoustic import NetworkConfig, Params
from .context import (
    AblationMask,
    ContextCPT,
    ContextSignals,
    Decision,
    fuse,
    mask_and_renormalize,
    project_to_locales,
)
from .errors import BadInputError, CompatibilityError
from .registry import Registry, SchemeKind, TargetScheme, pool_to_language
from .simulate import UtteranceRecord


@dataclass(frozen=True)
class LidPipeline:
    registry: Registry
    scheme: TargetScheme
    config: NetworkConfig
    params: Params
    cpt: ContextCPT
    pooling_space: str = "logit"

    def classify(
        self, features: dsp.FeatureSequence, ctx: ContextSignals
    ) -> tuple[Decision, float]:
        """Decision plus the masked acoustic confidence (pre-context max)."""
        logits, _ = acoustic.forward(self.params, self.config, features)
        lang_post = pool_to_language(
            logits, self.scheme, self.registry.n_languages, self.pooling_space
        )
        scores = project_to_locales(lang_post, self.registry)
        masked = mask_and_renormalize(
            scores, ctx.installed, self.registry.n_locales
        )
        acoustic_conf = float(masked.values.max())
        decision = fuse(masked, ctx, self.cpt, self.registry)
        return decision, acoustic_conf

    def signals_for(self, record: UtteranceRecord, mode: str) -> ContextSignals:
        if mode == "full":
            ablation = AblationMask()
        elif mode == "acoustic_only":
            ablation = AblationMask.all_on()
        else:
            raise BadInputError(f"unknown eval mode {mode!r}")
        return ContextSignals(
            installed=frozenset(self.registry.locale(t).id for t in record.installed),
            selected=self.registry.locale(record.selected).id,
            toggled=record.toggled,
            ablation=ablation,
        )

    def locale_tag(self, locale_id: int) -> str:
        return self.registry.locales[locale_id].tag


def scheme_from_header(header: dict, registry: Registry) -> TargetScheme:
    """Rebuild the target scheme stored in a model file, after checking
    that the model was trained against this registry."""
    current = [[loc.tag, loc.language.tag] for loc in registry.locales]
    if [list(pair) for pair in header["registry"]] != current:
        raise CompatibilityError(
            "model was trained against a different locale registry"
        )
    return TargetScheme(
        kind=SchemeKind(header["scheme_kind"]),
        class_names=tuple(header["class_names"]),
        locale_to_class=np.array(header["locale_to_class"], dtype=np.int64),
        class_to_language=np.array(header["class_to_language"], dtype=np.int64),
        registry_tags=registry.locale_tags(),
    )


def load_pipeline(
    model_path,
    registry: Registry,
    cpt: ContextCPT | None = None,
    pooling_space: str = "logit",
) -> LidPipeline:
    config, params, header = acoustic.load_model(model_path)
    scheme = scheme_from_header(header, registry)
    return LidPipeline(
        registry=registry,
        scheme=scheme,
        config=config,
        params=params,
        cpt=cpt if cpt is not None else ContextCPT.uniform(),
        pooling_space=pooling_space,
    )


def features_from_audio(
    audio: dsp.AudioBuffer, sad: dsp.SADConfig = dsp.SADConfig()
) -> dsp.FeatureSequence:
    """Gate on speech activity, then run the frontend from the onset.

    If the detector never triggers, the whole signal is used; downstream
    length checks will reject it if there is truly nothing there.
    """
    gate = dsp.detect_speech(audio, sad)
    start = 0
    if gate.triggered and gate.onset is not None:
        start = int(round(gate.onset * audio.sample_rate))
    trimmed = dsp.AudioBuffer(audio.samples[start:], audio.sample_rate)
    return dsp.extract_features(trimmed, normalization="cumulative")


def prefix_decider(pipeline: LidPipeline, features: dsp.FeatureSequence, ctx):
    """Closure evaluating the system on growing prefixes of one utterance."""

    def decide(seconds: float):
        return pipeline.classify(features.prefix(seconds), ctx)

    return decide
