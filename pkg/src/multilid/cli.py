"""Command-line entry point.

Subcommands cover the whole workflow:

  gen-corpus   synthesize a corpus from a population spec or preset
  train        fit the acoustic model (and context tables) on a corpus
  eval         score a corpus with a trained model, emit report CSVs
  sweep        evaluate a grid of incremental-inference policies

Exit codes are a stable contract for scripting: 0 success, 2 bad input,
3 I/O failure, 4 numerical failure, 5 artifact incompatibility.
Every run is deterministic given its flags and seeds, and the governing
seeds are echoed in all outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import acoustic, context, evaluation, incremental, pipeline, presets, simulate
from .errors import BadInputError, CompatibilityError, MultilidError, NumericsError
from .registry import SchemeKind, build_scheme

EXIT_BAD_INPUT = 2
EXIT_IO = 3
EXIT_NUMERICS = 4
EXIT_INCOMPATIBLE = 5

ARCHES = {"toy": acoustic.toy_config, "full": acoustic.full_config}


def _load_corpus(manifest_path: str) -> simulate.CorpusReader:
    if not os.path.exists(manifest_path):
        raise BadInputError(f"manifest not found: {manifest_path}")
    reader = simulate.CorpusReader(manifest_path)
    if not reader.records:
        raise BadInputError(f"manifest has no utterances: {manifest_path}")
    return reader


def _features_for(reader: simulate.CorpusReader, record):
    if reader.spec.kind == "audio":
        return pipeline.features_from_audio(reader.audio_for(record))
    return reader.features_for(record)


def cmd_gen_corpus(args) -> int:
    from dataclasses import replace

    if args.spec:
        if not os.path.exists(args.spec):
            raise BadInputError(f"population spec not found: {args.spec}")
        spec = simulate.load_spec(args.spec)
    else:
        spec = presets.get_preset(args.preset)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    if args.materialize:
        spec = replace(spec, materialize=True)
    records, _stats = simulate.gen_corpus(spec, args.out)
    print(f"wrote {len(records)} utterances to {args.out} (seed={spec.seed})")
    return 0


def _parse_scheme(scheme_arg: str, registry):
    if scheme_arg == "locales":
        return build_scheme(SchemeKind.LOCALES, registry)
    if scheme_arg == "languages":
        return build_scheme(SchemeKind.LANGUAGES, registry)
    if scheme_arg.startswith("split:"):
        path = scheme_arg.split(":", 1)[1]
        if not os.path.exists(path):
            raise BadInputError(f"split spec not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise BadInputError(f"{path}: invalid JSON: {exc}") from exc
        split_spec = {}
        for lang, entry in raw.items():
            if lang.startswith("_"):  # annotation keys, e.g. _comment
                continue
            try:
                split_spec[lang] = (entry["carve_outs"], entry["remainder"])
            except (KeyError, TypeError) as exc:
                raise BadInputError(
                    f"{path}: language {lang!r} needs 'carve_outs' and 'remainder'"
                ) from exc
        return build_scheme(SchemeKind.SPLIT, registry, split_spec)
    raise BadInputError(
        f"unknown scheme {scheme_arg!r}; use locales, languages or split:<path>"
    )


def cmd_train(args) -> int:
    reader = _load_corpus(args.manifest)
    registry = reader.registry()
    scheme = _parse_scheme(args.scheme, registry)
    config = ARCHES[args.arch](n_targets=scheme.n_classes, n_mels=reader.spec.n_dims)

    dataset = []
    labels = []
    for record in reader.records:
        feats = _features_for(reader, record)
        if args.train_window > 0:
            feats = feats.prefix(args.train_window)
        label = scheme.class_of(registry.locale(record.truth).id)
        dataset.append((feats, label))
        labels.append(label)
    weights = acoustic.class_weights(labels, scheme.n_classes)
    hyper = acoustic.TrainHyper(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
        class_weights=weights,
    )
    params = acoustic.build_network(config, args.seed)
    params, history = acoustic.train(params, config, dataset, hyper)

    acoustic.save_model(
        args.out,
        config,
        params,
        class_names=scheme.class_names,
        locale_to_class=scheme.locale_to_class,
        class_to_language=scheme.class_to_language,
        registry_pairs=[(l.tag, l.language.tag) for l in registry.locales],
        scheme_kind=scheme.kind.value,
        meta={"seed": args.seed, "corpus_seed": reader.spec.seed},
    )
    loss_path = args.out + ".loss.csv"
    with open(loss_path, "w", encoding="utf-8") as fh:
        fh.write(f"# seed={args.seed}\n")
        fh.write("epoch,mean_loss,min_loss_so_far\n")
        best = float("inf")
        for epoch, loss in enumerate(history):
            best = min(best, loss)
            fh.write(f"{epoch},{loss:.12g},{best:.12g}\n")

    cpt = context.fit_cpt(
        [
            (registry.locale(r.truth).id, _ctx_signals(registry, r))
            for r in reader.records
        ],
        registry,
        alpha=args.alpha,
    )
    context.save_cpt(args.out + ".cpt", cpt)
    final = history[-1] if history else float("nan")
    print(
        f"trained {scheme.kind.value} model ({scheme.n_classes} classes, "
        f"{acoustic.param_count(config)} params) -> {args.out}; final loss {final:.4f}"
    )
    return 0


def _ctx_signals(registry, record) -> context.ContextSignals:
    return context.ContextSignals(
        installed=frozenset(registry.locale(t).id for t in record.installed),
        selected=registry.locale(record.selected).id,
        toggled=record.toggled,
    )


def _build_pipeline(args, reader) -> pipeline.LidPipeline:
    registry = reader.registry()
    cpt_path = args.cpt or (args.model + ".cpt")
    cpt = context.load_cpt(cpt_path) if os.path.exists(cpt_path) else None
    return pipeline.load_pipeline(
        args.model, registry, cpt, pooling_space=args.pooling_space
    )


def _eval_one(lid, reader, record, mode, window, policy):
    feats = _features_for(reader, record)
    ctx = lid.signals_for(record, mode)
    speech_dur = feats.n_frames * feats.frame_shift
    if policy is None:
        used = min(window, speech_dur)
        decision, acoustic_conf = lid.classify(feats.prefix(used), ctx)
        confidence = decision.confidence if mode == "full" else acoustic_conf
        latency = used
    else:
        decide = pipeline.prefix_decider(lid, feats, ctx)

        def thresholded(seconds):
            decision, acoustic_conf = decide(seconds)
            conf = decision.confidence if mode == "full" else acoustic_conf
            return decision, conf

        result = incremental.run_incremental(thresholded, policy, speech_dur)
        decision = result.decision
        confidence = decision.confidence
        latency = result.latency
    return evaluation.TrialResult(
        utterance_id=record.id,
        truth=record.truth,
        predicted=lid.locale_tag(decision.locale),
        installed=record.installed,
        latency=latency,
        confidence=confidence,
    )


_WORKER_STATE: dict = {}


def _worker_init(manifest, model, cpt, pooling_space, mode, window, policy_tuple):
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=1)  # workers partition the cores already
    except ImportError:
        pass
    ns = argparse.Namespace(model=model, cpt=cpt, pooling_space=pooling_space)
    reader = _load_corpus(manifest)
    lid = _build_pipeline(ns, reader)
    policy = (
        incremental.LatencyPolicy(*policy_tuple) if policy_tuple is not None else None
    )
    _WORKER_STATE.update(
        reader=reader, lid=lid, mode=mode, window=window, policy=policy
    )


def _worker_eval(index: int):
    s = _WORKER_STATE
    record = s["reader"].records[index]
    return _eval_one(s["lid"], s["reader"], record, s["mode"], s["window"], s["policy"])


def cmd_eval(args) -> int:
    reader = _load_corpus(args.manifest)
    lid = _build_pipeline(args, reader)
    policy = _parse_policy(args.policy) if args.policy else None

    if args.workers > 1:
        import multiprocessing as mp

        ctx = mp.get_context("fork")
        policy_tuple = (
            (policy.t_min, policy.t_interval, policy.t_max, policy.c)
            if policy
            else None
        )
        with ctx.Pool(
            args.workers,
            initializer=_worker_init,
            initargs=(
                args.manifest,
                args.model,
                args.cpt,
                args.pooling_space,
                args.mode,
                args.window,
                policy_tuple,
            ),
        ) as pool:
            trials = pool.map(_worker_eval, range(len(reader.records)))
    else:
        with acoustic.single_thread_blas():
            trials = [
                _eval_one(lid, reader, record, args.mode, args.window, policy)
                for record in reader.records
            ]

    stats = reader.stats()
    meta = {
        "mode": args.mode,
        "seed": reader.spec.seed,
        "window": args.window,
    }
    report = evaluation.build_report(
        trials,
        stats,
        top_n=args.top_n,
        fixed_window=args.window,
        membership=args.membership,
        meta=meta,
    )
    os.makedirs(args.out, exist_ok=True)
    files = evaluation.write_report_csv(report, args.out)
    print(
        f"aua={report.aua:.4f} worst_cell={report.worst_cell[0]:.4f} "
        f"({'|'.join(report.worst_cell[1])}/{report.worst_cell[2]}) "
        f"mean_latency={report.mean_latency:.3f}s -> {args.out}/{{{','.join(files)}}}"
    )
    return 0


def _parse_policy(text: str) -> incremental.LatencyPolicy:
    parts = text.split(",")
    if len(parts) != 4:
        raise BadInputError("policy must be 't_min,t_interval,t_max,c'")
    try:
        values = [float(p) for p in parts]
    except ValueError as exc:
        raise BadInputError(f"bad policy value: {exc}") from exc
    return incremental.LatencyPolicy(*values)


def cmd_sweep(args) -> int:
    reader = _load_corpus(args.manifest)
    lid = _build_pipeline(args, reader)
    if not os.path.exists(args.grid):
        raise BadInputError(f"policy grid not found: {args.grid}")
    with open(args.grid, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise BadInputError(f"{args.grid}: invalid JSON: {exc}") from exc
    if not isinstance(raw, list) or not raw:
        raise BadInputError(f"{args.grid}: expected a nonempty JSON list of policies")
    try:
        policies = [
            incremental.LatencyPolicy(
                t_min=float(p["t_min"]),
                t_interval=float(p["t_interval"]),
                t_max=float(p["t_max"]),
                c=float(p["c"]),
            )
            for p in raw
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise BadInputError(f"{args.grid}: malformed policy entry: {exc}") from exc

    feature_cache: dict[str, tuple] = {}

    def prepared(record):
        hit = feature_cache.get(record.id)
        if hit is None:
            feats = _features_for(reader, record)
            ctx = lid.signals_for(record, "full")
            hit = (feats, ctx)
            feature_cache[record.id] = hit
        return hit

    items = []
    by_id = {}
    for record in reader.records:
        feats = _features_for(reader, record)
        items.append(
            incremental.SweepItem(
                utterance_id=record.id,
                truth=record.truth,
                installed=record.installed,
                speech_dur=feats.n_frames * feats.frame_shift,
            )
        )
        by_id[record.id] = record

    def decide(item, seconds):
        feats, ctx = prepared(by_id[item.utterance_id])
        decision, _ = lid.classify(feats.prefix(seconds), ctx)
        return lid.locale_tag(decision.locale), decision.confidence

    with acoustic.single_thread_blas():
        rows = incremental.sweep_policy(
            items, decide, policies, reader.stats(), top_n=args.top_n
        )
    incremental.write_sweep_csv(rows, args.out, meta={"seed": reader.spec.seed})
    print(f"swept {len(rows)} policies over {len(items)} utterances -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="multilid",
        description="Two-stage spoken language identification workbench",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="synthesize a corpus")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--spec", help="population spec JSON")
    src.add_argument(
        "--preset", choices=sorted(presets.PRESETS), help="built-in population"
    )
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.add_argument(
        "--materialize", action="store_true", help="write feature blobs to disk"
    )
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train the acoustic model")
    p.add_argument("--manifest", required=True)
    p.add_argument(
        "--scheme",
        default="languages",
        help="locales | languages | split:<split spec JSON>",
    )
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--arch", choices=sorted(ARCHES), default="toy")
    p.add_argument("--epochs", type=int, default=6)
    p.add_argument("--lr", type=float, default=0.06)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--alpha", type=float, default=1.0, help="CPT smoothing")
    p.add_argument(
        "--train-window",
        type=float,
        default=1.0,
        help="seconds of each utterance used for training (0 = all)",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model on a corpus")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--mode", choices=["full", "acoustic_only"], default="full")
    p.add_argument("--cpt", default=None, help="context tables (default <model>.cpt)")
    p.add_argument("--window", type=float, default=2.0)
    p.add_argument("--policy", default=None, help="t_min,t_interval,t_max,c")
    p.add_argument("--top-n", type=int, default=100)
    p.add_argument("--membership", choices=["exact", "superset"], default="exact")
    p.add_argument("--pooling-space", choices=["logit", "posterior"], default="logit")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="sweep incremental policies")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--grid", required=True, help="JSON list of policies")
    p.add_argument("--out", required=True, help="sweep CSV to write")
    p.add_argument("--cpt", default=None)
    p.add_argument("--top-n", type=int, default=100)
    p.add_argument("--pooling-space", choices=["logit", "posterior"], default="logit")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BadInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except NumericsError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICS
    except CompatibilityError as exc:
        print(f"incompatible artifacts: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except MultilidError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
