from __future__ import annotations

import hashlib
import json

import numpy as np
import pytest

from multilid import acoustic, presets, simulate
from multilid.dsp import FeatureSequence
from multilid.errors import BadInputError
from multilid.simulate import (
    AccentPrototype,
    ContextBehavior,
    CorpusReader,
    PopulationSpec,
    TupleSpec,
    derive_seed,
    effective_prototype,
    gen_context,
    gen_corpus,
    sample_population,
    synth_features,
)


def two_proto_spec(utterances=10, seed=99, **kwargs):
    registry = (("aa-AA", "aa"), ("bb-BB", "bb"))
    protos = (
        AccentPrototype("aa-AA", mean_seed=1, mean_scale=4.0, cov_scale=0.4),
        AccentPrototype("bb-BB", mean_seed=2, mean_scale=4.0, cov_scale=0.4),
    )
    tuples = (TupleSpec(("aa-AA", "bb-BB"), monthly_users=3.0, utterances=utterances),)
    defaults = dict(
        seed=seed,
        registry_specs=registry,
        prototypes=protos,
        tuples=tuples,
        context=ContextBehavior(0.9, 0.3),
        duration_range_s=(0.8, 1.2),
    )
    defaults.update(kwargs)
    return PopulationSpec(**defaults)


def test_sample_population_proportional():
    spec = PopulationSpec(
        seed=1,
        registry_specs=(("aa-AA", "aa"), ("bb-BB", "bb"), ("cc-CC", "cc")),
        prototypes=(
            AccentPrototype("aa-AA", 1, 1.0),
            AccentPrototype("bb-BB", 2, 1.0),
            AccentPrototype("cc-CC", 3, 1.0),
        ),
        tuples=(
            TupleSpec(("aa-AA", "bb-BB"), monthly_users=3.0, utterances=0),
            TupleSpec(("bb-BB", "cc-CC"), monthly_users=1.0, utterances=0),
        ),
    )
    users = sample_population(spec, 400, seed=5)
    counts = {k: users.count(k) for k in set(users)}
    assert counts[("aa-AA", "bb-BB")] == 300
    assert counts[("bb-BB", "cc-CC")] == 100


def test_sample_population_single_tuple():
    spec = two_proto_spec()
    users = sample_population(spec, 17, seed=0)
    assert len(users) == 17
    assert set(users) == {("aa-AA", "bb-BB")}


def test_sample_population_deterministic():
    spec = two_proto_spec()
    assert sample_population(spec, 50, seed=3) == sample_population(spec, 50, seed=3)


def test_synth_features_degenerate_noise_returns_mean():
    mean = np.linspace(-1, 1, 40)
    feats = synth_features(mean, cov_scale=0.0, drift=0.0, duration_s=0.5, seed=7)
    assert feats.n_frames == 50
    assert np.allclose(feats.frames, mean)


def test_synth_features_frame_count():
    mean = np.zeros(40)
    assert synth_features(mean, 1.0, 0.1, 2.37, seed=1).n_frames == 237


def test_blend_weight_one_reproduces_target():
    spec = two_proto_spec()
    linked = PopulationSpec(
        seed=spec.seed,
        registry_specs=spec.registry_specs + (("cc-Latn", "bb"),),
        prototypes=spec.prototypes
        + (
            AccentPrototype(
                "cc-Latn", mean_seed=77, mean_scale=9.9, cov_scale=5.0,
                drift=2.0, links=(("bb-BB", 1.0),),
            ),
        ),
        tuples=spec.tuples,
    )
    mean_c, cov_c, drift_c = effective_prototype(linked, "cc-Latn")
    mean_b, cov_b, drift_b = effective_prototype(linked, "bb-BB")
    assert np.allclose(mean_c, mean_b)
    assert cov_c == pytest.approx(cov_b)
    assert drift_c == pytest.approx(drift_b)
    # identical parameters and an identical seed give identical draws
    a = synth_features(mean_c, cov_c, drift_c, 1.0, seed=42)
    b = synth_features(mean_b, cov_b, drift_b, 1.0, seed=42)
    assert np.array_equal(a.frames, b.frames)


def test_blend_weights_above_one_rejected():
    with pytest.raises(BadInputError, match="exceed"):
        AccentPrototype("aa-AA", 1, 1.0, links=(("b", 0.7), ("c", 0.6)))


def test_well_separated_prototypes_are_learnable():
    spec = two_proto_spec(utterances=60)
    registry = spec.registry()
    protos = {
        tag: effective_prototype(spec, tag) for tag in ("aa-AA", "bb-BB")
    }
    train, test = [], []
    for i, tag in enumerate(["aa-AA", "bb-BB"] * 50):
        m, c, d = protos[tag]
        feats = synth_features(m, c, d, 0.6, seed=derive_seed(1, i, tag))
        (train if i < 60 else test).append((feats, registry.locale(tag).id))

    # nearest-centroid oracle on utterance means confirms separability
    centroids = {}
    for label in (0, 1):
        rows = [f.frames.mean(axis=0) for f, l in train if l == label]
        centroids[label] = np.mean(rows, axis=0)
    oracle_hits = sum(
        min(centroids, key=lambda c: np.linalg.norm(f.frames.mean(axis=0) - centroids[c])) == l
        for f, l in test
    )
    assert oracle_hits / len(test) >= 0.99

    cfg = acoustic.toy_config(n_targets=2, conv_filters=4, fc_width=16, bottleneck=8, post_width=16)
    params = acoustic.build_network(cfg, seed=5)
    params, _ = acoustic.train(
        params, cfg, train, acoustic.TrainHyper(0.08, 8, 4, seed=5)
    )
    hits = 0
    for feats, label in test:
        logits, _ = acoustic.forward(params, cfg, feats)
        hits += int(np.argmax(logits)) == label
    assert hits / len(test) >= 0.99


def test_gen_context_always_correct():
    behavior = ContextBehavior(p_selected_correct=1.0, p_toggle_given_switch=0.5)
    for i in range(50):
        selected, _ = gen_context("aa-AA", ("aa-AA", "bb-BB"), behavior, seed=i)
        assert selected == "aa-AA"


def test_gen_context_never_correct_pair():
    behavior = ContextBehavior(p_selected_correct=0.0, p_toggle_given_switch=0.5)
    for i in range(50):
        selected, toggled = gen_context("aa-AA", ("aa-AA", "bb-BB"), behavior, seed=i)
        assert selected == "bb-BB"
        assert toggled is False  # mismatched selection is never a fresh toggle


def test_gen_context_rate_concentrates():
    behavior = ContextBehavior(p_selected_correct=0.75, p_toggle_given_switch=0.3)
    hits = sum(
        gen_context("aa-AA", ("aa-AA", "bb-BB"), behavior, seed=i)[0] == "aa-AA"
        for i in range(10_000)
    )
    # binomial concentration: sigma ~ 0.0043 at n = 10k
    assert hits / 10_000 == pytest.approx(0.75, abs=0.02)


def test_gen_corpus_layout_and_loadback(tmp_path):
    spec = two_proto_spec(utterances=8)
    out = tmp_path / "corpus"
    records, stats = gen_corpus(spec, out)
    assert len(records) == 8
    for name in ("manifest.jsonl", "stats.tsv", "registry.tsv", "spec.json"):
        assert (out / name).exists()
    reader = CorpusReader(out / "manifest.jsonl")
    assert len(reader.records) == 8
    rec = reader.records[0]
    feats = reader.features_for(rec)
    assert feats.n_frames == int(round(rec.duration_s / 0.010))
    # regenerating from the stored seed is exact
    again = reader.features_for(rec)
    assert np.array_equal(feats.frames, again.frames)


def test_gen_corpus_empty_spec_is_empty_success(tmp_path):
    spec = two_proto_spec(utterances=0)
    records, _ = gen_corpus(spec, tmp_path / "empty")
    assert records == []
    lines = (tmp_path / "empty" / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 1  # just the meta line
    assert json.loads(lines[0])["type"] == "meta"


def test_gen_corpus_byte_identical_reruns(tmp_path):
    spec = two_proto_spec(utterances=12)
    digests = []
    for name in ("one", "two"):
        out = tmp_path / name
        gen_corpus(spec, out)
        digests.append(
            hashlib.sha256((out / "manifest.jsonl").read_bytes()).hexdigest()
        )
    assert digests[0] == digests[1]


def test_gen_corpus_materialized_blobs(tmp_path):
    spec = two_proto_spec(utterances=4, materialize=True)
    out = tmp_path / "blobs"
    records, _ = gen_corpus(spec, out)
    assert all(r.feature_path for r in records)
    reader = CorpusReader(out / "manifest.jsonl")
    rec = reader.records[0]
    from_blob = reader.features_for(rec)
    mean, cov, drift = effective_prototype(spec, rec.truth)
    regen = synth_features(mean, cov, drift, rec.duration_s, rec.gen_seed)
    assert np.allclose(from_blob.frames, regen.frames, atol=1e-6)


def test_audio_corpus_roundtrip(tmp_path):
    spec = presets.tones_audio("eval", seed=123)
    small = PopulationSpec(
        seed=spec.seed,
        registry_specs=spec.registry_specs,
        prototypes=spec.prototypes,
        tuples=(TupleSpec(("de-DE", "en-US"), 1.0, 4),),
        context=spec.context,
        kind="audio",
        duration_range_s=(0.9, 1.2),
    )
    out = tmp_path / "audio"
    records, _ = gen_corpus(small, out)
    assert all(r.audio_path for r in records)
    reader = CorpusReader(out / "manifest.jsonl")
    audio = reader.audio_for(reader.records[0])
    assert audio.sample_rate == 16000
    assert audio.duration_s > reader.records[0].duration_s  # leading quiet


def test_spec_json_round_trip(tmp_path):
    spec = presets.full_mix("train")
    path = tmp_path / "spec.json"
    simulate.save_spec(spec, path)
    back = simulate.load_spec(path)
    assert back == spec


def test_preset_training_share_constraint():
    spec = presets.full_mix("train")
    plan = simulate.plan_utterances(spec)
    registry = spec.registry()
    en_total = sum(
        1 for truth, _ in plan if registry.locale(truth).language.tag == "en"
    )
    en_in = sum(1 for truth, _ in plan if truth == "en-IN")
    assert en_in > 0
    assert en_in / en_total < 0.10


def test_population_proportions_converge():
    spec = presets.full_mix("train")
    users = sample_population(spec, 10_000, seed=11)
    weights = {t.locales: t.monthly_users for t in spec.tuples}
    total = sum(weights.values())
    for key, w in weights.items():
        observed = users.count(key) / 10_000
        assert observed == pytest.approx(w / total, abs=0.02)


def test_derive_seed_stable_and_distinct():
    a = derive_seed(5, "u000001", "signal")
    assert a == derive_seed(5, "u000001", "signal")
    assert a != derive_seed(5, "u000001", "meta")
    assert a != derive_seed(6, "u000001", "signal")
