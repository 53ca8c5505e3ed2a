"""Two-stage spoken language identification for multilingual users.

An acoustic network with temporal statistics pooling produces language
posteriors from log-Mel features; a context stage projects them to the
locales installed on the device and fuses in interaction signals with a
small naive-Bayes model.  The package also ships the population-weighted
evaluation methodology (Average User Accuracy plus worst-case cells),
confidence-gated incremental inference, and a deterministic corpus
simulator that stands in for private usage data.
"""

__version__ = "0.1.0"

from .context import AblationMask, ContextCPT, ContextSignals, Decision
from .dsp import AudioBuffer, FeatureSequence, SADConfig, SpeechGate
from .errors import (
    AudioFormatError,
    BadInputError,
    CompatibilityError,
    MultilidError,
    NumericsError,
    TooShortError,
)
from .evaluation import EvalReport, PopulationStats, TrialResult
from .incremental import IncrementalResult, LatencyPolicy
from .registry import (
    Level,
    Locale,
    PosteriorVector,
    Registry,
    SchemeKind,
    TargetScheme,
    build_registry,
    build_scheme,
    pool_to_language,
)

__all__ = [
    "AblationMask",
    "AudioBuffer",
    "AudioFormatError",
    "BadInputError",
    "CompatibilityError",
    "ContextCPT",
    "ContextSignals",
    "Decision",
    "EvalReport",
    "FeatureSequence",
    "IncrementalResult",
    "LatencyPolicy",
    "Level",
    "Locale",
    "MultilidError",
    "NumericsError",
    "PopulationStats",
    "PosteriorVector",
    "Registry",
    "SADConfig",
    "SchemeKind",
    "SpeechGate",
    "TargetScheme",
    "TooShortError",
    "TrialResult",
    "build_registry",
    "build_scheme",
    "pool_to_language",
]
