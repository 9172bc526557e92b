"""
CLI: Command-line interface for memaudit.

Contract: cli v1.0.0
"""

import argparse
import io
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from . import TOOL_VERSION
from .analysis import (
    evaluation_noise, influence_memorisation_correlation, latent_localisation,
    localised_units, m_profile, seed_variation_report,
)
from .canary import build_canary_dataset, build_probe_triple, render_glyph
from .config import AuditConfig, ExperimentConfig, TrainConfig, load_config
from .data import DATASET_DIRS, Dataset, OODSpec, load_dataset, make_ood_set, write_cifar10, write_idx
from .errors import ConfigError, DataError, MemauditError
from .influence import CheckpointSet, rank_canaries, read_influence_csv, self_influence_table, write_influence_csv
from .manifest import check_status, complete_manifest, load_manifest, start_manifest
from .plots import activation_masks, divergence_histogram, m_profile_plot, seed_variation_plot
from .report import generate
from .scanner import AUDIT_FILENAME, WHITEBOX_FILENAME, scan
from .score import (
    TESTS, MScoreResult, ScoreSpread, append_results_csv, m_score, m_score_spread, mw_score, mw_score_spread,
    write_result_json,
)
from .store import atomic_write_bytes, atomic_write_json, atomic_write_text, read_json, short_hash
from .trainer import RunArtifacts, load_run, matrix_configs, run_name, train_configs

RESULTS_FILENAME = "results.csv"
REPORT_FILENAME = "report.md"
SUMMARY_FILENAME = "summary.csv"
INFLUENCE_FILENAME = "influence.csv"
PREVIEW_SCALE = 8


class _ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with 1, like config errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"Error: {message}", file=sys.stderr)
        sys.exit(1)


def _progress() -> bool:
    return sys.stdout.isatty()


def _load(args) -> tuple[ExperimentConfig, Path, Path]:
    """(config, config path, experiment dir) with command-line overrides applied."""
    if not args.config:
        raise ConfigError("--config is required")
    config_path = Path(args.config)
    config = load_config(config_path)
    if args.seed is not None:
        config.seeds = [args.seed]
        config.training = config.training.replace(seed=args.seed)
    if args.data_root:
        config.data.root = args.data_root
    return config, config_path, Path(args.out) / config.name


def _train_data(config: ExperimentConfig) -> Dataset:
    return load_dataset(config.data.dataset, config.data.root, "train", config.data.subset)


def _ood_set(config: ExperimentConfig) -> Dataset:
    spec = OODSpec.for_target(config.data.dataset, config.data.ood_source)
    source = load_dataset(spec.source, config.data.root, "test")
    return make_ood_set(spec, source, config.data.ood_n, config.audit.seed)


def _completed_runs(exp_dir: Path, only: Optional[str] = None) -> list[Path]:
    if only:
        run_dir = Path(only)
        manifest = load_manifest(run_dir)
        if manifest is None or manifest.status != "completed":
            raise DataError(f"no completed run in {run_dir}")
        return [run_dir]
    found = scan(str(exp_dir))
    for warning in found["warnings"]:
        print(f"  Warning: {warning}")
    runs = [exp_dir / rel for rel in found["runs"]]
    if not runs:
        raise DataError(f"no completed runs under {exp_dir}")
    return runs


def _metadata(run: RunArtifacts) -> dict:
    cfg = run.config
    return {
        "canary_id": cfg.canary.key,
        "dataset": cfg.dataset,
        "model": cfg.architecture,
        "regulariser": cfg.regulariser_label,
        "seed": cfg.seed,
        "letter": cfg.canary.letter,
        "run": run_name(cfg),
        "weights_hash": run.weights_hash,
    }


# ------------------------------
# inject
# ------------------------------

def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_preview(path: Path, original: np.ndarray, injected: np.ndarray, scale: int = PREVIEW_SCALE) -> Path:
    """Original and injected image side by side, upscaled with nearest neighbour."""
    gap = np.ones((original.shape[0], 1, original.shape[2]), dtype=np.float32)
    pair = _to_uint8(np.concatenate([original, gap, injected], axis=1))
    image = Image.fromarray(pair[..., 0] if pair.shape[-1] == 1 else pair)
    image = image.resize((image.width * scale, image.height * scale), Image.Resampling.NEAREST)
    buffer = io.BytesIO()
    image.save(buffer, format="PNG")
    atomic_write_bytes(path, buffer.getvalue())
    return path


def cmd_inject(args) -> int:
    """Write a canary copy of a dataset's train split plus a preview image."""
    try:
        patch = render_glyph(args.letter)
    except ConfigError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1

    print(f"Loading {args.dataset}...")
    data = load_dataset(args.dataset, args.data_root, "train")
    if not 0 <= args.index < len(data):
        print(f"Error: index {args.index} out of range [0, {len(data)})", file=sys.stderr)
        return 1

    canary = build_canary_dataset(data, args.index, patch)
    out = Path(args.out) / f"{args.dataset}-{args.letter.upper()}-{args.index}"
    target = out / DATASET_DIRS[args.dataset]
    if args.dataset == "cifar10":
        for i, chunk in enumerate(np.array_split(np.arange(len(canary)), 5), start=1):
            write_cifar10(target / f"data_batch_{i}.bin", canary.subset(chunk))
    else:
        write_idx(target / "train-images-idx3-ubyte", target / "train-labels-idx1-ubyte", canary)
    print(f"  Injected '{args.letter.upper()}' into image {args.index} (label {int(canary.labels[args.index])})")
    print(f"Wrote {target}")

    preview = write_preview(out / "preview.png", data.images[args.index], canary.images[args.index])
    print(f"Wrote {preview}")
    return 0


# ------------------------------
# train
# ------------------------------

def _cell(config: ExperimentConfig, cfg: TrainConfig) -> dict:
    """Everything that determines one run's weights: its training config and training data."""
    return {"training": cfg.to_dict(), "data": {"dataset": config.data.dataset, "subset": config.data.subset}}


def cmd_train(args) -> int:
    """Train every (canary, seed) cell of the experiment that is not already current."""
    config, config_path, exp_dir = _load(args)
    base = config.training
    canary_ids = config.canary_ids or [None]
    configs = matrix_configs(base, canary_ids, config.seeds)

    pending, run_dirs, manifests = [], [], []
    for cfg in configs:
        run_dir = exp_dir / "runs" / run_name(cfg)
        status = check_status(run_dir, config_path, cell=_cell(config, cfg))
        if not status["is_stale"]:
            print(f"  Warning: {run_dir.name} already completed with this config; skipping")
            continue
        if status["staleness_reason"] not in (None, "not_run"):
            print(f"  Rerunning {run_dir.name} ({status['staleness_reason']})")
        pending.append(cfg)
        run_dirs.append(run_dir)

    if not pending:
        print("Nothing to train.")
        return 0

    print(f"Loading {config.data.dataset}...")
    data = _train_data(config)
    print(f"  {len(data)} images {data.shape}")

    for cfg, run_dir in zip(pending, run_dirs):
        manifests.append(start_manifest(run_dir, config.name, config_path, cfg.seed, cfg.canary.key, _cell(config, cfg)))

    print(f"Training {len(pending)} run(s) of {base.architecture} on {base.dataset} (workers: {args.workers})...")
    runs = train_configs(pending, data, run_dirs, workers=args.workers, progress=_progress() and args.workers <= 1)

    for run, run_dir, manifest in zip(runs, run_dirs, manifests):
        complete_manifest(run_dir, manifest)
        best = run.best_metrics
        print(
            f"  {run_dir.name}: best epoch {run.best_epoch}, val_acc {best.val_acc:.4f}, "
            f"weights {short_hash(run.weights_hash)}"
        )
    print(f"\nWrote {exp_dir / 'runs'}")
    return 0


# ------------------------------
# audit
# ------------------------------

def _whitebox(run: RunArtifacts, model, train_data: Dataset, audit: AuditConfig) -> Optional[dict]:
    if not run.canary_indices:
        return None
    label = int(train_data.labels[run.canary_indices[0]])
    members = [i for i in np.asarray(run.train_indices).tolist()
               if train_data.labels[i] == label and i not in run.canary_indices]
    d_y = train_data.subset(members)
    patch = run.config.canary.patch()
    result = mw_score(model, d_y, patch, audit.seed, label=label, metadata=_metadata(run), matched=audit.matched)
    payload = result.to_dict()
    if audit.evaluations > 1:
        seeds = [audit.seed + i for i in range(audit.evaluations)]
        spread = mw_score_spread(model, d_y, patch, seeds, label=label, matched=audit.matched)
        payload["evaluation_spread"] = spread.to_dict()
    return payload


def cmd_audit(args) -> int:
    """Black-box M for every completed run (optionally white-box M_w too)."""
    config, _, exp_dir = _load(args)
    runs = _completed_runs(exp_dir, args.run)
    white_box = args.white_box or config.audit.white_box
    test = args.test or config.audit.test

    print("Building OOD probe set...")
    ood = _ood_set(config)
    print(f"  {len(ood)} images from {ood.name}")
    train_data = _train_data(config) if white_box else None

    rows = []
    for run_dir in runs:
        run = load_run(run_dir)
        model = run.model()
        triple = build_probe_triple(ood, run.config.canary.patch(), config.audit.seed, config.audit.matched)
        result = m_score(model, triple, test=test, metadata=_metadata(run), references=config.audit.references)
        write_result_json(run_dir / AUDIT_FILENAME, result)
        divergence_histogram(result, run_dir / "divergence.svg")
        rows.append(result.to_row())
        flag = " *" if result.significant else ""
        print(f"  {run_dir.name}: M = {result.m:.4g}, p = {result.p_value:.3g} ({test}){flag}")

        if white_box:
            wb = _whitebox(run, model, train_data, config.audit)
            if wb is None:
                print(f"  Warning: {run_dir.name} has no canary; skipping white-box score")
            else:
                atomic_write_json(run_dir / WHITEBOX_FILENAME, wb)
                spread = wb.get("evaluation_spread")
                extra = f", spread {spread['std']:.3g} over {len(spread['values'])} draws" if spread else ""
                print(f"  {run_dir.name}: M_w = {wb['M_w']:.4g}, p = {wb['p_value']}{extra}")

    results_path = exp_dir / RESULTS_FILENAME
    append_results_csv(results_path, rows, unique_on=["canary_id", "dataset", "model", "regulariser", "seed"])
    print(f"\nWrote {results_path}")
    return 0


# ------------------------------
# influence
# ------------------------------

def cmd_influence(args) -> int:
    """TracIn self-influence over the training data of each completed run."""
    config, _, exp_dir = _load(args)
    runs = _completed_runs(exp_dir, args.run)
    k = args.k if args.k is not None else config.influence.k
    data = _train_data(config)

    for run_dir in runs:
        run = load_run(run_dir)
        checkpoints = CheckpointSet.from_run(run, config.influence.checkpoints)
        samples = data
        if run.canary_indices:
            samples = build_canary_dataset(data, run.canary_indices, run.config.canary.patch())
        print(f"Self-influence for {run_dir.name} ({len(samples)} samples, epochs {checkpoints.epochs})...")
        records = self_influence_table(
            checkpoints, run.model(), samples, config.influence.batch_size, progress=_progress(),
        )
        write_influence_csv(run_dir / INFLUENCE_FILENAME, records)
        top, bottom = rank_canaries(records, k)
        atomic_write_json(run_dir / "canaries.json", {
            "k": k,
            "top": top,
            "bottom": bottom,
            "checkpoints": checkpoints.metadata(),
        })
        print(f"  top-{k}: {top}")
        print(f"  bottom-{k}: {bottom}")
        print(f"Wrote {run_dir / INFLUENCE_FILENAME}")
    return 0


# ------------------------------
# analyze
# ------------------------------

def _analyze_profile(config: ExperimentConfig, runs: list[Path]) -> int:
    ood = _ood_set(config)
    for run_dir in runs:
        run = load_run(run_dir)
        triple = build_probe_triple(ood, run.config.canary.patch(), config.audit.seed, config.audit.matched)
        profile = m_profile(run, triple, test=config.audit.test, references=config.audit.references)
        atomic_write_json(run_dir / "profile.json", profile.to_dict())
        m_profile_plot(profile, run_dir / "profile.svg")
        print(f"  {run_dir.name}: M over epochs {profile.epochs}")
        print(f"Wrote {run_dir / 'profile.svg'}")
    return 0


def _analyze_latent(config: ExperimentConfig, runs: list[Path], out: Path) -> int:
    loaded = [load_run(r) for r in runs]
    canaried = [r for r in loaded if r.canary_indices]
    if not canaried:
        print("  Warning: no canaried runs; localising the configured glyph on clean models")
    pool = (canaried or loaded)[: config.analysis.models]
    models = [r.model() for r in pool]
    patches = [r.config.canary.patch() for r in pool]
    ood = _ood_set(config)
    unique, random = latent_localisation(models, ood.images, patches, config.audit.seed, config.audit.matched)
    units = localised_units(unique, random)
    canary_ids = [r.config.canary.key for r in pool]
    atomic_write_json(out / "latent.json", {
        "canary_ids": canary_ids,
        "runs": [run_name(r.config) for r in pool],
        "unique": unique.to_dict(),
        "random": random.to_dict(),
        "localised_units": units,
    })
    activation_masks(unique, random, out / "latent.svg")
    print(f"  {len(models)} models, canaries {sorted(set(canary_ids), key=str)}: localised units {units or 'none'}")
    print(f"Wrote {out / 'latent.svg'}")
    return 0


def _seed_values(runs: list[Path], filename: str, key: str) -> tuple[dict[str, list[float]], dict[str, dict]]:
    """Per-canary score values across runs, plus each canary's stored evaluation spread."""
    by_canary: dict[str, list[float]] = {}
    spreads: dict[str, dict] = {}
    for run_dir in runs:
        path = run_dir / filename
        if not path.exists():
            continue
        data = read_json(path)
        cid = str(data.get("metadata", {}).get("canary_id"))
        by_canary.setdefault(cid, []).append(float(data[key]))
        if "evaluation_spread" in data:
            spreads.setdefault(cid, {"run": run_dir.name, **data["evaluation_spread"]})
    return {k: v for k, v in by_canary.items() if len(v) >= 2}, spreads


def _analyze_seeds(config: ExperimentConfig, runs: list[Path], out: Path) -> int:
    m_values, _ = _seed_values(runs, AUDIT_FILENAME, "M")
    mw_values, mw_spreads = _seed_values(runs, WHITEBOX_FILENAME, "M_w")
    if not m_values and not mw_values:
        raise DataError("seed variation needs audited runs with at least two seeds per canary")

    payload: dict = {}
    if m_values:
        report = seed_variation_report(m_values)
        payload["seed_variation"] = [v.to_dict() for v in report]
        first = next(r for r in runs if (r / AUDIT_FILENAME).exists())
        if config.analysis.evaluations > 1:
            run = load_run(first)
            seeds = [config.audit.seed + i for i in range(config.analysis.evaluations)]
            spread = m_score_spread(run.model(), _ood_set(config), run.config.canary.patch(), seeds, config.audit.matched)
            payload["evaluation_spread"] = {"run": first.name, **spread.to_dict()}
            payload["noise"] = evaluation_noise(report, spread)
        seed_variation_plot(m_values, report, out / "seeds.svg")
        spanning = sum(v.spans_zero for v in report)
        print(f"  M: {len(report)} canaries, {spanning} change sign across seeds")
        print(f"Wrote {out / 'seeds.svg'}")

    if mw_values:
        report_w = seed_variation_report(mw_values)
        payload["seed_variation_mw"] = [v.to_dict() for v in report_w]
        spread_w = next(iter(mw_spreads.values()), None)
        if spread_w is not None:
            payload["evaluation_spread_mw"] = spread_w
            payload["noise_mw"] = evaluation_noise(report_w, ScoreSpread(spread_w["values"]))
        seed_variation_plot(mw_values, report_w, out / "seeds-mw.svg", label="M_w")
        spanning = sum(v.spans_zero for v in report_w)
        print(f"  M_w: {len(report_w)} canaries, {spanning} change sign across seeds")
        print(f"Wrote {out / 'seeds-mw.svg'}")

    atomic_write_json(out / "seeds.json", payload)
    return 0


def _analyze_correlation(runs: list[Path], out: Path) -> int:
    influence: dict[int, float] = {}
    scores: dict[int, list[float]] = {}
    for run_dir in runs:
        manifest = load_manifest(run_dir)
        if manifest is not None and manifest.canary_id == "none" and (run_dir / INFLUENCE_FILENAME).exists():
            for record in read_influence_csv(run_dir / INFLUENCE_FILENAME):
                influence.setdefault(record.sample_index, record.self_influence)
        audit = run_dir / AUDIT_FILENAME
        if audit.exists():
            result = MScoreResult.from_dict(read_json(audit))
            cid = str(result.metadata.get("canary_id"))
            if cid.isdigit():
                scores.setdefault(int(cid), []).append(result.m)
    if not influence:
        raise DataError("no influence table from a clean run; run 'memaudit influence' first")
    pairs = sorted((cid, influence[cid], float(np.mean(m))) for cid, m in scores.items() if cid in influence)
    r = influence_memorisation_correlation([p[1] for p in pairs], [p[2] for p in pairs])
    atomic_write_json(out / "correlation.json", {
        "pearson_r": r,
        "pairs": [{"canary_id": c, "self_influence": s, "M": m} for c, s, m in pairs],
    })
    print(f"  Pearson r = {r:.4f} over {len(pairs)} canaries")
    print(f"Wrote {out / 'correlation.json'}")
    return 0


def cmd_analyze(args) -> int:
    """Characterisation analyses over an experiment's runs."""
    config, _, exp_dir = _load(args)
    runs = _completed_runs(exp_dir, args.run)
    out = exp_dir / "analysis"
    print(f"Analysis ({args.kind}) over {len(runs)} run(s)...")
    if args.kind == "profile":
        return _analyze_profile(config, runs)
    if args.kind == "latent":
        return _analyze_latent(config, runs, out)
    if args.kind == "seeds":
        return _analyze_seeds(config, runs, out)
    return _analyze_correlation(runs, out)


# ------------------------------
# report
# ------------------------------

def cmd_report(args) -> int:
    """Aggregate audit results into report.md and summary.csv."""
    exp_dir = Path(args.experiment) if args.experiment else _load(args)[2]
    if not exp_dir.is_dir():
        print(f"Error: Experiment directory does not exist: {exp_dir}", file=sys.stderr)
        return 1

    print(f"Scanning {exp_dir}...")
    found = scan(str(exp_dir))
    for warning in found["warnings"]:
        print(f"  Warning: {warning}")
    print(f"  Found {len(found['runs'])} runs, {len(found['audits'])} audits")

    audits = [MScoreResult.from_dict(read_json(exp_dir / rel)).to_row() for rel in found["audits"]]
    whitebox = []
    for rel in found["whitebox"]:
        data = read_json(exp_dir / rel)
        whitebox.append({**data, **data.get("metadata", {})})

    result = generate(audits, whitebox, experiment=exp_dir.name)
    for warning in result.warnings:
        print(f"  Warning: {warning}")

    report_path = exp_dir / REPORT_FILENAME
    atomic_write_text(report_path, result.content)
    print(f"\nWrote {report_path}")
    if result.summary is not None:
        summary_path = exp_dir / SUMMARY_FILENAME
        atomic_write_text(summary_path, result.summary.to_csv(index=False))
        print(f"Wrote {summary_path}")
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    """Main entry point."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Experiment config (YAML)")
    common.add_argument("--seed", type=int, help="Run a single seed instead of the config's list")
    common.add_argument("--workers", type=int, default=1, help="Parallel training processes")
    common.add_argument("--out", default="experiments", help="Output root directory")
    common.add_argument("--data-root", help="Dataset root (default: $MEMAUDIT_DATA_DIR)")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")

    parser = _ArgumentParser(
        prog="memaudit",
        description="Audit image classifiers for memorisation of unique features",
    )
    parser.add_argument("--version", action="version", version=f"memaudit {TOOL_VERSION}")
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    # inject
    inject_parser = subparsers.add_parser("inject", parents=[common], help="Write a canary dataset")
    inject_parser.add_argument("--dataset", choices=sorted(DATASET_DIRS), default="mnist")
    inject_parser.add_argument("--index", type=int, required=True, help="Training image to inject")
    inject_parser.add_argument("--letter", default="A", help="Glyph for the unique feature (A-Z)")
    inject_parser.set_defaults(func=cmd_inject)

    # train
    train_parser = subparsers.add_parser("train", parents=[common], help="Train the run matrix")
    train_parser.set_defaults(func=cmd_train)

    # audit
    audit_parser = subparsers.add_parser("audit", parents=[common], help="Compute M scores")
    audit_parser.add_argument("--run", help="Audit a single run directory")
    audit_parser.add_argument("--white-box", action="store_true", help="Also compute M_w on the canary's class")
    audit_parser.add_argument("--test", choices=TESTS, help="Significance test (default from config: reference)")
    audit_parser.set_defaults(func=cmd_audit)

    # influence
    influence_parser = subparsers.add_parser("influence", parents=[common], help="TracIn self-influence")
    influence_parser.add_argument("--run", help="Single run directory")
    influence_parser.add_argument("--k", type=int, help="Top/bottom list length (default from config)")
    influence_parser.set_defaults(func=cmd_influence)

    # analyze
    analyze_parser = subparsers.add_parser("analyze", parents=[common], help="Characterisation analyses")
    analyze_parser.add_argument("--kind", choices=["profile", "latent", "seeds", "correlation"], required=True)
    analyze_parser.add_argument("--run", help="Single run directory")
    analyze_parser.set_defaults(func=cmd_analyze)

    # report
    report_parser = subparsers.add_parser("report", parents=[common], help="Aggregate report")
    report_parser.add_argument("experiment", nargs="?", help="Experiment directory (default from --config)")
    report_parser.set_defaults(func=cmd_report)

    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )

    try:
        return args.func(args)
    except ConfigError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1
    except (MemauditError, OSError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
