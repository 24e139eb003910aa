"""Command-line surface for the pipeline.

Subcommands mirror the pipeline stages (gen, train-ae, encode, meta-train,
meta-test) plus two composed drivers (experiment, baseline). Outputs are
byte-identical for identical inputs and seed; wall-clock timing, which is
inherently non-reproducible, goes to a ``<report>.timing.json`` sidecar
instead of the main report. Exit codes: 0 success, 2 usage/config error,
3 data or validation error, 4 numerical divergence. Set FEWTRACE_LOG to
debug/info/warning to control verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .checkpoint import load_ae, load_learner, save_ae, save_learner
from .episodes import (
    group_by_category,
    meta_test_suite,
    meta_training_tasks,
    split_by_median_spans,
    write_episode_manifests,
)
from .errors import ConfigError, FewtraceError, ValidationError
from .featurize import HashingEmbedder, SidecarEmbedder
from .fusion import AEConfig, encode_corpus, train_ae
from .meta import LearnerConfig, MetaConfig, init_learner_params, meta_train
from .pipeline import (
    MAML_ALTERNATIVE_METHODS,
    METHODS,
    RunSettings,
    derive_seed,
    evaluate_task_with_runs,
    read_latents,
    run_experiment,
    write_latents,
)
from .report import aggregate, render_table
from .synthgen import BUILTIN_PROFILES, FaultInjector, SystemProfile, builtin_profile, default_injectors, generate
from .traces import FaultCategory, load_corpus, save_corpus

logger = logging.getLogger("fewtrace")


def _setup_logging() -> None:
    level = os.environ.get("FEWTRACE_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = p.read_text(encoding="utf-8")
    try:
        if p.suffix.lower() in (".yaml", ".yml"):
            import yaml

            obj = yaml.safe_load(text)
        else:
            obj = json.loads(text)
    except Exception as exc:
        raise ConfigError(f"config file {path} could not be parsed: {exc}") from exc
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        raise ConfigError(f"config file {path} must hold a mapping at the top level")
    return obj


def _build(cls, section: dict, **overrides):
    """Construct a config dataclass from a file section plus CLI overrides."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys in config file: {sorted(unknown)}")
    kwargs = dict(section)
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad {cls.__name__}: {exc}") from exc


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{what} {path} does not exist")
    return p


def _embedder_from_args(args) -> HashingEmbedder | SidecarEmbedder:
    if getattr(args, "sidecar", None):
        return SidecarEmbedder(_require_file(args.sidecar, "sidecar file"))
    return HashingEmbedder(dim=args.embed_dim, n_hashes=args.embed_hashes)


def _add_embedder_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--embed-dim", type=int, default=64, help="hashing embedder width")
    p.add_argument("--embed-hashes", type=int, default=2, help="hash functions per token")
    p.add_argument("--sidecar", help="precomputed-embedding sidecar JSONL (overrides hashing)")


# --- subcommands -----------------------------------------------------------------


def _cmd_gen(args) -> int:
    cfg = _load_config_file(args.config)
    if "profile" in cfg:
        profile = _build(SystemProfile, dict(cfg["profile"]))
    else:
        profile = builtin_profile(args.profile)
    if "injectors" in cfg:
        injectors = [_build(FaultInjector, dict(inj)) for inj in cfg["injectors"]]
    else:
        injectors = default_injectors(profile, args.n_categories)
    corpus = generate(profile, injectors, args.n_normal, args.n_per_fault, args.seed)
    save_corpus(corpus, args.out)
    logger.info("wrote %d traces (%d categories) to %s",
                len(corpus.traces), len(corpus.categories), args.out)
    return 0


def _cmd_train_ae(args) -> int:
    section = _load_config_file(args.config).get("ae", {})
    cfg = _build(
        AEConfig,
        section,
        epochs=args.epochs,
        seed=args.seed,
        variant=args.variant,
        d_common=args.d_common,
    )
    corpus = load_corpus(_require_file(args.corpus, "corpus"), args.system)
    embedder = _embedder_from_args(args)
    params, curve = train_ae(corpus, cfg, embedder)
    featurize_info = {
        "embedder": "sidecar" if getattr(args, "sidecar", None) else "hashing",
        "embed_dim": embedder.dim,
        "embed_hashes": getattr(embedder, "n_hashes", None),
    }
    save_ae(args.out, params, featurize_info)
    curve_path = args.curve or f"{args.out}.curve.csv"
    with Path(curve_path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for i, (tr, va) in enumerate(zip(curve.train_loss, curve.val_loss)):
            fh.write(f"{i},{tr!r},{va!r}\n")
    logger.info("trained %s autoencoder for %d epochs", cfg.variant, cfg.epochs)
    return 0


def _cmd_encode(args) -> int:
    params, manifest = load_ae(_require_file(args.ae, "checkpoint"))
    feat = manifest.get("featurize", {})
    if getattr(args, "sidecar", None):
        embedder = SidecarEmbedder(_require_file(args.sidecar, "sidecar file"))
    elif feat.get("embedder") == "sidecar":
        raise ConfigError(
            "checkpoint was trained with sidecar embeddings; pass --sidecar so "
            "encoding uses the same text representation"
        )
    else:
        embedder = HashingEmbedder(
            dim=int(feat.get("embed_dim", args.embed_dim)),
            n_hashes=int(feat.get("embed_hashes") or args.embed_hashes),
        )
    if embedder.dim + 4 != manifest.get("d_span", embedder.dim + 4):
        raise ConfigError(
            f"embedder width {embedder.dim} does not match the checkpoint's "
            f"span feature width {manifest['d_span']}"
        )
    corpus = load_corpus(_require_file(args.corpus, "corpus"), args.system)
    records = encode_corpus(corpus, params, embedder)
    counts = {t.trace_id: (len(t.spans), len(t.logs)) for t in corpus.traces}
    write_latents(records, corpus.system, args.out, counts)
    logger.info("encoded %d traces to %s", len(records), args.out)
    return 0


def _split_pools(records, system, counts, n_novel, seed):
    labels = sorted({label for _, label in records if label is not None})
    if not labels:
        raise ValidationError("latents file has no labeled traces")
    categories = [FaultCategory(id=l, system=system) for l in labels]
    span_counts: dict[str, list[int]] = {}
    for latent, label in records:
        if label is not None and latent.trace_id in counts:
            span_counts.setdefault(label, []).append(counts[latent.trace_id][0])
    return split_by_median_spans(categories, span_counts, n_novel, seed)


def _cmd_meta_train(args) -> int:
    cfg_file = _load_config_file(args.config)
    records, system, counts = read_latents(_require_file(args.latents, "latents file"))
    d_model = len(records[0][0].z)
    base, _ = _split_pools(records, system, counts, args.n_novel,
                           derive_seed(args.seed, "episodes", "split", system))
    groups = group_by_category(records)
    tasks = meta_training_tasks(
        groups, base, args.n_way, args.k_shot, args.m_query, args.tasks,
        derive_seed(args.seed, "episodes", "train"),
    )
    lcfg = _build(
        LearnerConfig,
        cfg_file.get("learner", {}),
        body=args.body,
        d_model=d_model,
        n_classes=args.n_way,
        seed=derive_seed(args.seed, "meta"),
    )
    mcfg = _build(
        MetaConfig,
        cfg_file.get("meta", {}),
        alpha=args.alpha,
        beta=args.beta,
        inner_steps=args.inner_steps,
        meta_iterations=args.iterations,
    )
    theta0 = init_learner_params(lcfg)
    theta, curve = meta_train(theta0, tasks, mcfg, lcfg)
    save_learner(args.out, theta, lcfg, mcfg)
    logger.info("meta-trained on %d tasks for %d iterations (final query loss %.4f)",
                len(tasks), mcfg.meta_iterations, curve[-1] if curve else float("nan"))
    return 0


def _cmd_meta_test(args) -> int:
    records, system, counts = read_latents(_require_file(args.latents, "latents file"))
    theta, lcfg, mcfg = load_learner(_require_file(args.meta, "checkpoint"))
    if mcfg is None:
        mcfg = MetaConfig()
    _, novel = _split_pools(records, system, counts, args.n_novel,
                            derive_seed(args.seed, "episodes", "split", system))
    groups = group_by_category(records)
    suite = meta_test_suite(
        groups, novel, args.n_way, args.k_shot, args.m_query, args.n_tasks,
        derive_seed(args.seed, "episodes", "test"),
    )
    if args.manifests:
        write_episode_manifests(suite, args.manifests)
    results = [
        evaluate_task_with_runs(theta, ep, mcfg, lcfg, args.runs,
                                derive_seed(args.seed, "runs"), i)
        for i, ep in enumerate(suite)
    ]
    report = aggregate(results, experiment_id=f"{system}->{system}",
                       n_way=args.n_way, k_shot=args.k_shot, m_query=args.m_query)
    _write_report(report, args.out)
    print(report.summary_cell())
    return 0


def _write_report(report, out: str) -> None:
    Path(out).write_text(report.to_json(include_timing=False) + "\n", encoding="utf-8")
    if report.timing is not None:
        timing_path = Path(out + ".timing.json")
        timing_path.write_text(
            json.dumps(dataclasses.asdict(report.timing), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )


def _run_settings(args, cfg_file: dict) -> RunSettings:
    ae = _build(AEConfig, cfg_file.get("ae", {}), epochs=args.epochs)
    meta = _build(MetaConfig, cfg_file.get("meta", {}), alpha=args.alpha, beta=args.beta,
                  inner_steps=args.inner_steps, meta_iterations=args.iterations)
    learner = _build(LearnerConfig, cfg_file.get("learner", {}))
    return _build(
        RunSettings,
        cfg_file.get("run", {}),
        seed=args.seed,
        n_way=args.n_way,
        k_shot=args.k_shot,
        m_query=args.m_query,
        n_meta_tasks=args.tasks,
        n_test_tasks=args.n_tasks,
        n_runs=args.runs,
        n_novel=args.n_novel,
        ae=ae,
        meta=meta,
        learner=learner,
        embedder_dim=args.embed_dim,
        embedder_hashes=args.embed_hashes,
    )


def _run_composed(args, method: str) -> int:
    cfg_file = _load_config_file(args.config)
    settings = _run_settings(args, cfg_file)
    train_corpus = load_corpus(_require_file(args.train_corpus, "train corpus"), args.train_system)
    if args.test_corpus == args.train_corpus and args.test_system == args.train_system:
        test_corpus = train_corpus
    else:
        test_corpus = load_corpus(_require_file(args.test_corpus, "test corpus"), args.test_system)
    cross_system = train_corpus.system != test_corpus.system
    if cross_system and method in MAML_ALTERNATIVE_METHODS and not args.allow_cross_system:
        raise ConfigError(
            f"{method} has no transferable initialization and is a within-system "
            "baseline; pass --allow-cross-system to run it anyway"
        )
    embedder = _embedder_from_args(args)
    artifacts = run_experiment(
        train_corpus, test_corpus, settings, method=method,
        experiment_id=args.experiment_id or f"{train_corpus.system}->{test_corpus.system}",
        embedder=embedder,
    )
    _write_report(artifacts.report, args.out)
    print(render_table([artifacts.report]), end="")
    return 0


def _cmd_experiment(args) -> int:
    return _run_composed(args, "transformer-maml")


def _cmd_baseline(args) -> int:
    return _run_composed(args, args.name)


# --- parser ------------------------------------------------------------------------


def _add_episode_flags(p: argparse.ArgumentParser, n_tasks_default: int) -> None:
    p.add_argument("--n-way", type=int, default=5)
    p.add_argument("--k-shot", type=int, default=5)
    p.add_argument("--m-query", type=int, default=15)
    p.add_argument("--n-novel", type=int, default=10, help="novel categories held out per system")
    p.add_argument("--n-tasks", type=int, default=n_tasks_default, help="meta-testing tasks")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tasks", type=int, default=4, help="meta-training tasks")
    p.add_argument("--alpha", type=float, default=None, help="inner-loop learning rate")
    p.add_argument("--beta", type=float, default=None, help="outer-loop learning rate")
    p.add_argument("--inner-steps", type=int, default=None)
    p.add_argument("--iterations", type=int, default=None, help="outer-loop iterations")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewtrace",
        description="Few-shot abnormal trace classification for microservice systems.",
    )
    parser.add_argument("--version", action="version", version=f"fewtrace {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic trace corpus")
    p.add_argument("--profile", default="booking-small",
                   help=f"builtin profile name ({', '.join(sorted(BUILTIN_PROFILES))})")
    p.add_argument("--config", help="profile/injector config file (JSON or YAML)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-normal", type=int, default=200)
    p.add_argument("--n-per-fault", type=int, default=30)
    p.add_argument("--n-categories", type=int, default=30)
    p.set_defaults(fn=_cmd_gen)

    p = sub.add_parser("train-ae", help="train the fusion autoencoder on normal traces")
    p.add_argument("--corpus", required=True)
    p.add_argument("--system", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", help="config file with an 'ae' section")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--d-common", type=int, default=None)
    p.add_argument("--variant", choices=["multihead", "linear", "glu"], default=None)
    p.add_argument("--curve", help="loss-curve CSV path (default: <out>.curve.csv)")
    _add_embedder_flags(p)
    p.set_defaults(fn=_cmd_train_ae)

    p = sub.add_parser("encode", help="encode a corpus into latent traces")
    p.add_argument("--corpus", required=True)
    p.add_argument("--system", required=True)
    p.add_argument("--ae", required=True, help="autoencoder checkpoint")
    p.add_argument("--out", required=True)
    _add_embedder_flags(p)
    p.set_defaults(fn=_cmd_encode)

    p = sub.add_parser("meta-train", help="meta-train the learner on base categories")
    p.add_argument("--latents", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", help="config file with 'learner'/'meta' sections")
    p.add_argument("--body",
                   choices=["transformer_encoder", "linear", "rnn", "lstm", "cnn"],
                   default=None)
    _add_episode_flags(p, n_tasks_default=50)
    _add_train_flags(p)
    p.set_defaults(fn=_cmd_meta_train)

    p = sub.add_parser("meta-test", help="adapt and score on novel-category tasks")
    p.add_argument("--latents", required=True)
    p.add_argument("--meta", required=True, help="meta-learner checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--manifests", help="optional episode-manifest JSONL for audit/re-runs")
    _add_episode_flags(p, n_tasks_default=50)
    p.set_defaults(fn=_cmd_meta_test)

    for name, fn in (("experiment", _cmd_experiment), ("baseline", _cmd_baseline)):
        p = sub.add_parser(
            name,
            help="run a full train-system -> test-system evaluation"
            + ("" if name == "experiment" else " with a baseline method"),
        )
        if name == "baseline":
            p.add_argument("--name", required=True, choices=[m for m in METHODS])
        p.add_argument("--train-corpus", required=True)
        p.add_argument("--train-system", required=True)
        p.add_argument("--test-corpus", required=True)
        p.add_argument("--test-system", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, required=True)
        p.add_argument("--config", help="config file with ae/meta/learner/run sections")
        p.add_argument("--experiment-id", default="")
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--runs", type=int, default=5)
        p.add_argument("--allow-cross-system", action="store_true",
                       help="run within-system baselines across systems anyway")
        _add_episode_flags(p, n_tasks_default=50)
        _add_train_flags(p)
        _add_embedder_flags(p)
        p.set_defaults(fn=fn)

    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except FewtraceError as exc:
        print(f"fewtrace: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
