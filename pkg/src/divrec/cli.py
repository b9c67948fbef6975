"""Experiment harness: config parsing, pipeline orchestration, ablations, sweeps.

Configuration is a flat key=value file with dotted keys (one per line);
environment variables named ``DIVREC_<KEY>`` (dots as underscores, upper
case) override file values, and repeated ``--set key=value`` flags override
both. All randomness flows from the single top-level ``seed`` through named
sub-streams: split, then training (which in turn derives init/sampler/noise
streams).

Subcommands: ingest, train, evaluate, ablate, sweep, report.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import baselines, corpus as corpus_mod, metrics as metrics_mod
from .corpus import DATASET_FORMATS, DiversityProfile, InteractionCorpus, build_diversity_profile
from .model import RankingScorer, build_aspect_profiles, load_checkpoint, save_checkpoint
from .objective import AblationFlags
from .training import TrainConfig, TrainedModel, train

ENV_PREFIX = "DIVREC_"

MODEL_KINDS = ("taml", "cml", "cml+mmr")

ABLATION_KEYS = (
    "disable_adaptive_branch",
    "disable_conventional_branch",
    "reverse_order",
    "drop_attention",
    "drop_diversity_relation",
    "drop_backward_direction",
    "drop_consistency_loss",
)


@dataclass
class ExperimentConfig:
    data_path: str = ""
    data_format: str = "canonical-tsv"
    min_core: int = 1
    output_dir: str = "runs/latest"
    model: str = "taml"
    mmr_lambda: float = 0.8
    split_fraction: float = 0.8
    seed: int = 42
    cutoffs: tuple[int, ...] = (5, 10)
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep_embedding_dim: tuple[int, ...] = ()
    sweep_negatives: tuple[int, ...] = ()
    sweep_num_aspects: tuple[int, ...] = ()

    def validate(self) -> None:
        if self.model not in MODEL_KINDS:
            raise ValueError(f"model.kind must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.data_format not in DATASET_FORMATS:
            raise ValueError(
                f"data.format must be one of {DATASET_FORMATS}, got {self.data_format!r}"
            )
        if not 0.0 < self.split_fraction < 1.0:
            raise ValueError("split.fraction must be in (0, 1)")
        if not self.data_path:
            raise ValueError("data.path is required")
        self.train.validate()


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"cannot parse boolean from {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(x) for x in text.replace(" ", "").split(","))


def read_config_file(path: Path | str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def apply_env_overrides(values: dict[str, str], environ=None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    known = set(_KEY_SETTERS)
    for key in known:
        env_name = ENV_PREFIX + key.replace(".", "_").upper()
        if env_name in environ:
            values[key] = environ[env_name]
    return values


def _set_train(config: ExperimentConfig, **kwargs) -> ExperimentConfig:
    return replace(config, train=replace(config.train, **kwargs))


def _set_flag(config: ExperimentConfig, name: str, raw: str) -> ExperimentConfig:
    flags = replace(config.train.ablation, **{name: _parse_bool(raw)})
    return replace(config, train=replace(config.train, ablation=flags))


_KEY_SETTERS = {
    "data.path": lambda c, v: replace(c, data_path=v),
    "data.format": lambda c, v: replace(c, data_format=v),
    "data.min_core": lambda c, v: replace(c, min_core=int(v)),
    "output.dir": lambda c, v: replace(c, output_dir=v),
    "model.kind": lambda c, v: replace(c, model=v),
    "model.mmr_lambda": lambda c, v: replace(c, mmr_lambda=float(v)),
    "split.fraction": lambda c, v: replace(c, split_fraction=float(v)),
    "seed": lambda c, v: replace(c, seed=int(v)),
    "eval.cutoffs": lambda c, v: replace(c, cutoffs=_parse_int_list(v)),
    "train.batch_size": lambda c, v: _set_train(c, batch_size=int(v)),
    "train.max_epochs": lambda c, v: _set_train(c, max_epochs=int(v)),
    "train.learning_rate": lambda c, v: _set_train(c, learning_rate=float(v)),
    "train.margin": lambda c, v: _set_train(c, margin=float(v)),
    "train.embedding_dim": lambda c, v: _set_train(c, embedding_dim=int(v)),
    "train.num_aspects": lambda c, v: _set_train(c, num_aspects=int(v)),
    "train.negatives": lambda c, v: _set_train(c, negatives=int(v)),
    "train.skew_threshold": lambda c, v: _set_train(c, skew_threshold=float(v)),
    "train.max_history": lambda c, v: _set_train(c, max_history=int(v)),
    "train.init_std": lambda c, v: _set_train(c, init_std=float(v)),
    "train.clip_embeddings": lambda c, v: _set_train(c, clip_embeddings=_parse_bool(v)),
    "sweep.embedding_dim": lambda c, v: replace(c, sweep_embedding_dim=_parse_int_list(v)),
    "sweep.negatives": lambda c, v: replace(c, sweep_negatives=_parse_int_list(v)),
    "sweep.num_aspects": lambda c, v: replace(c, sweep_num_aspects=_parse_int_list(v)),
}
for _name in ABLATION_KEYS:
    _KEY_SETTERS[f"train.{_name}"] = (
        lambda c, v, _n=_name: _set_flag(c, _n, v)
    )


def build_config(
    file_path: str | None, overrides: list[str], environ=None
) -> ExperimentConfig:
    """Layer file < environment < --set flags into an ExperimentConfig."""
    values: dict[str, str] = {}
    if file_path:
        values.update(read_config_file(file_path))
    apply_env_overrides(values, environ)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        values[key.strip()] = val.strip()

    config = ExperimentConfig()
    for key, raw in values.items():
        setter = _KEY_SETTERS.get(key)
        if setter is None:
            raise ValueError(f"unknown config key {key!r}")
        config = setter(config, raw)
    return config


# ---------------------------------------------------------------------------
# pipeline stages


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def _seed_streams(seed: int) -> tuple[int, int]:
    split_seed, train_seed = np.random.SeedSequence(seed).spawn(2)
    return split_seed.generate_state(1)[0].item(), train_seed.generate_state(1)[0].item()


def write_loss_history_csv(model: TrainedModel, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss_conventional", "loss_adaptive", "loss_consistency"])
        for rec in model.history:
            writer.writerow([
                rec.epoch,
                "" if rec.loss_conventional is None else f"{rec.loss_conventional:.6f}",
                "" if rec.loss_adaptive is None else f"{rec.loss_adaptive:.6f}",
                "" if rec.loss_consistency is None else f"{rec.loss_consistency:.6f}",
            ])


def _write_profile_report(profile: DiversityProfile, order: str, out: Path) -> None:
    with open(out / "diversity_profile.tsv", "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t")
        writer.writerow(["user", "diversity"])
        for u, d in enumerate(profile.diversity_of_user):
            if not np.isnan(d):
                writer.writerow([u, f"{d:.6f}"])
    with open(out / "domain_summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["skewness", "skew_threshold", "skewed_domain", "branch_order"])
        writer.writerow([
            f"{profile.skewness:.6f}", profile.skew_threshold,
            profile.skewed_domain, order,
        ])


def _branch_order(profile: DiversityProfile, flags: AblationFlags) -> str:
    # the branch whose weight grows over epochs is trained last
    adaptive_last = profile.skewed_domain != flags.reverse_order
    return "conv_to_adp" if adaptive_last else "adp_to_conv"


def _prepare_corpus(config: ExperimentConfig):
    full = corpus_mod.load_dataset(config.data_path, config.data_format, config.min_core)
    split_seed, train_seed = _seed_streams(config.seed)
    split_corpus = corpus_mod.split(full, config.split_fraction, split_seed)
    profile = build_diversity_profile(split_corpus, config.train.skew_threshold)
    train_config = replace(config.train, seed=train_seed)
    return split_corpus, profile, train_config


def _train_and_evaluate(
    config: ExperimentConfig,
    split_corpus: InteractionCorpus,
    profile: DiversityProfile,
    train_config: TrainConfig,
    out: Path,
    checkpoints: bool = True,
):
    ckpt_dir = out / "checkpoints"
    if config.model == "taml":
        callback = None
        if checkpoints:
            ckpt_dir.mkdir(parents=True, exist_ok=True)

            def callback(epoch: int, model: TrainedModel) -> None:
                for tag, params in (("conv", model.branch_conv), ("adp", model.branch_adp)):
                    if params is not None:
                        save_checkpoint(
                            params, ckpt_dir / f"epoch_{epoch:03d}_{tag}.npz",
                            branch_tag=tag, seed=train_config.seed,
                        )

        model = _stage("train", train, split_corpus, profile, train_config, callback)
        write_loss_history_csv(model, out / "loss_history.csv")
        scorer = model.scorer(split_corpus, profile)
        report = _stage(
            "evaluate", metrics_mod.evaluate, scorer, split_corpus, profile, config.cutoffs
        )
    else:
        result = _stage("train", baselines.train_cml, split_corpus, train_config)
        with open(out / "loss_history.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss"])
            for epoch, value in enumerate(result.history, 1):
                writer.writerow([epoch, f"{value:.6f}"])
        if checkpoints:
            ckpt_dir.mkdir(parents=True, exist_ok=True)
            np.savez_compressed(
                ckpt_dir / "cml.npz",
                user_embeddings=result.params.user_embeddings,
                item_embeddings=result.params.item_embeddings,
            )
        score_fn = baselines.cml_scorer(result.params)
        rerank = None
        if config.model == "cml+mmr":
            rerank = baselines.mmr_rerank_fn(split_corpus.category_of_item, config.mmr_lambda)
        report = _stage(
            "evaluate", metrics_mod.evaluate, score_fn, split_corpus, profile,
            config.cutoffs, rerank,
        )

    metrics_mod.write_report_csv(report, out / "metrics.csv")
    metrics_mod.write_per_user_tsv(report, out / "per_user_metrics.tsv")
    return report


def run_experiment(config: ExperimentConfig) -> metrics_mod.MetricReport:
    """Full pipeline: ingest, split, profile, train, evaluate, write artifacts."""
    _stage("config", config.validate)
    inter, cats = corpus_mod.dataset_files(Path(config.data_path), config.data_format)
    for p in (inter, cats):
        if not p.exists():
            raise StageError("ingest", FileNotFoundError(f"dataset file not found: {p}"))

    split_corpus, profile, train_config = _stage("ingest", _prepare_corpus, config)

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus_mod.save_snapshot(split_corpus, out / "corpus.npz")
    _write_profile_report(profile, _branch_order(profile, config.train.ablation), out)
    return _train_and_evaluate(config, split_corpus, profile, train_config, out)


ABLATION_VARIANTS: tuple[tuple[str, dict], ...] = (
    ("default_order", {}),
    ("reversed_order", {"reverse_order": True}),
    ("conv_only", {"disable_adaptive_branch": True}),
    ("adp_only", {"disable_conventional_branch": True}),
    ("no_diversity_relation", {"drop_diversity_relation": True}),
    ("no_attention", {"drop_attention": True}),
    ("one_way", {"drop_backward_direction": True}),
)


def run_ablation_suite(config: ExperimentConfig) -> Path:
    """Train and evaluate all structural variants on a shared corpus and seed."""
    _stage("config", config.validate)
    if config.model != "taml":
        raise StageError("config", ValueError("ablations apply to model.kind=taml"))
    inter, cats = corpus_mod.dataset_files(Path(config.data_path), config.data_format)
    for p in (inter, cats):
        if not p.exists():
            raise StageError("ingest", FileNotFoundError(f"dataset file not found: {p}"))

    split_corpus, profile, train_config = _stage("ingest", _prepare_corpus, config)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus_mod.save_snapshot(split_corpus, out / "corpus.npz")
    _write_profile_report(profile, _branch_order(profile, config.train.ablation), out)

    rows = []
    for name, flag_kwargs in ABLATION_VARIANTS:
        variant_dir = out / "ablation" / name
        variant_dir.mkdir(parents=True, exist_ok=True)
        variant_train = replace(
            train_config, ablation=replace(train_config.ablation, **flag_kwargs)
        )
        variant_cfg = replace(config, train=variant_train)
        report = _train_and_evaluate(
            variant_cfg, split_corpus, profile, variant_train, variant_dir, checkpoints=False
        )
        row = {"variant": name}
        for k in report.cutoffs:
            for m in metrics_mod.METRIC_NAMES:
                row[f"{m}@{k}"] = report.means[k][m]
        row["diversity_mse"] = report.diversity_mse
        rows.append(row)

    table_path = out / "ablation_results.csv"
    with open(table_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow(
                {k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()}
            )
    return table_path


SWEEP_PARAMS = {
    "embedding_dim": "sweep_embedding_dim",
    "negatives": "sweep_negatives",
    "num_aspects": "sweep_num_aspects",
}


def run_sweep(config: ExperimentConfig) -> Path:
    """Grid sweeps over embedding size, negatives, and aspect count."""
    _stage("config", config.validate)
    requested = {
        name: getattr(config, attr)
        for name, attr in SWEEP_PARAMS.items()
        if getattr(config, attr)
    }
    if not requested:
        raise StageError("config", ValueError("no sweep lists configured (sweep.*)"))

    out = Path(config.output_dir)
    rows = []
    for param, values in requested.items():
        for value in values:
            sub = replace(
                config,
                train=replace(config.train, **{param: int(value)}),
                output_dir=str(out / "sweep" / f"{param}_{value}"),
            )
            report = run_experiment(sub)
            for k in report.cutoffs:
                row = {"parameter": param, "value": value, "cutoff": k}
                row.update({m: report.means[k][m] for m in metrics_mod.METRIC_NAMES})
                rows.append(row)

    table_path = out / "sweep_results.csv"
    with open(table_path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["parameter", "value", "cutoff", *metrics_mod.METRIC_NAMES]
        )
        writer.writeheader()
        for row in rows:
            writer.writerow(
                {k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()}
            )
    return table_path


# ---------------------------------------------------------------------------
# subcommands


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override a config key (repeatable; highest precedence)",
    )


def _cmd_ingest(args) -> int:
    config = build_config(args.config, args.overrides)
    if args.data:
        config = replace(config, data_path=args.data)
    if args.format:
        config = replace(config, data_format=args.format)
    if args.min_core is not None:
        config = replace(config, min_core=args.min_core)
    corpus = _stage(
        "ingest", corpus_mod.load_dataset, config.data_path, config.data_format, config.min_core
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    corpus_mod.save_snapshot(corpus, out)
    print(f"corpus: {corpus.num_users} users, {corpus.num_items} items, "
          f"{corpus.num_train} interactions, {corpus.num_categories} categories -> {out}")
    return 0


def _cmd_train(args) -> int:
    config = build_config(args.config, args.overrides)
    report = run_experiment(config)
    k = report.cutoffs[-1]
    print(f"run complete: f1@{k}={report.means[k]['f1']:.4f} "
          f"recall@{k}={report.means[k]['recall']:.4f} ild@{k}={report.means[k]['ild']:.4f} "
          f"-> {config.output_dir}")
    return 0


def _cmd_evaluate(args) -> int:
    config = build_config(args.config, args.overrides)
    run_dir = Path(args.run_dir)
    snapshot = run_dir / "corpus.npz"
    if not snapshot.exists():
        raise StageError("evaluate", FileNotFoundError(f"no corpus snapshot at {snapshot}"))
    split_corpus = corpus_mod.load_snapshot(snapshot)
    profile = build_diversity_profile(split_corpus, config.train.skew_threshold)

    ckpt_dir = run_dir / "checkpoints"
    conv_files = sorted(ckpt_dir.glob("epoch_*_conv.npz"))
    adp_files = sorted(ckpt_dir.glob("epoch_*_adp.npz"))
    if not conv_files and not adp_files:
        raise StageError("evaluate", FileNotFoundError(f"no checkpoints in {ckpt_dir}"))
    branch_conv = load_checkpoint(conv_files[-1])[0] if conv_files else None
    branch_adp = load_checkpoint(adp_files[-1])[0] if adp_files else None
    num_aspects = min(config.train.num_aspects, split_corpus.num_categories)
    profiles = build_aspect_profiles(split_corpus, num_aspects)
    scorer = RankingScorer(branch_conv, branch_adp, profiles, split_corpus, profile,
                           flags=config.train.ablation, max_history=config.train.max_history)
    report = _stage(
        "evaluate", metrics_mod.evaluate, scorer, split_corpus, profile, config.cutoffs
    )
    metrics_mod.write_report_csv(report, run_dir / "metrics.csv")
    metrics_mod.write_per_user_tsv(report, run_dir / "per_user_metrics.tsv")
    k = report.cutoffs[-1]
    print(f"evaluated {report.num_users} users: f1@{k}={report.means[k]['f1']:.4f}")
    return 0


def _cmd_ablate(args) -> int:
    config = build_config(args.config, args.overrides)
    table = run_ablation_suite(config)
    print(f"ablation table -> {table}")
    return 0


def _cmd_sweep(args) -> int:
    config = build_config(args.config, args.overrides)
    table = run_sweep(config)
    print(f"sweep table -> {table}")
    return 0


def _cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    path = run_dir / "metrics.csv"
    if not path.exists():
        raise StageError("report", FileNotFoundError(f"no metrics at {path}"))
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            print("\t".join(row))
    loss_path = run_dir / "loss_history.csv"
    if loss_path.exists():
        with open(loss_path, newline="") as fh:
            rows = list(csv.reader(fh))
        if len(rows) > 1:
            print(f"epochs trained: {len(rows) - 1} (final row: {', '.join(rows[-1])})")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="divrec",
        description="Bilateral-branch diversified recommendation experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="build and save a corpus snapshot")
    _add_config_args(p_ingest)
    p_ingest.add_argument("--data", help="dataset directory")
    p_ingest.add_argument("--format", choices=DATASET_FORMATS)
    p_ingest.add_argument("--min-core", type=int, default=None)
    p_ingest.add_argument("--out", required=True, help="snapshot path (.npz)")
    p_ingest.set_defaults(fn=_cmd_ingest)

    p_train = sub.add_parser("train", help="run the full experiment pipeline")
    _add_config_args(p_train)
    p_train.set_defaults(fn=_cmd_train)

    p_eval = sub.add_parser("evaluate", help="re-evaluate a finished run directory")
    _add_config_args(p_eval)
    p_eval.add_argument("--run-dir", required=True)
    p_eval.set_defaults(fn=_cmd_evaluate)

    p_ablate = sub.add_parser("ablate", help="run the structural-variant suite")
    _add_config_args(p_ablate)
    p_ablate.set_defaults(fn=_cmd_ablate)

    p_sweep = sub.add_parser("sweep", help="grid sweeps over D / P / K")
    _add_config_args(p_sweep)
    p_sweep.set_defaults(fn=_cmd_sweep)

    p_report = sub.add_parser("report", help="print the metrics of a run directory")
    p_report.add_argument("--run-dir", required=True)
    p_report.set_defaults(fn=_cmd_report)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except StageError as exc:
        print(f"error {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
