"""Command-line runner: experiment orchestration and artifact persistence.

Subcommands:
  search        relaxed-supernet architecture search, emits a genotype
  evaluate      retrain a genotype from scratch, emits test metrics
  toy-mi        information-plane study on the binary toy task
  ablate-sigma  fixed-noise grid over (std, mean) on the toy task
  histogram     aggregate operator counts over genotype files

Every run writes all artifacts into its own output directory: a copy of
the resolved config, the metric CSV families, and a manifest listing
the produced files.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import datetime
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import grad_norm_split, mi_trajectory, op_histogram
from .bilevel import (
    SupernetTrainer,
    TrainingDiverged,
    evaluation_phase,
    search_phase,
    train_weights,
)
from .config import (
    ConfigError,
    ExperimentConfig,
    config_from_dict,
    config_hash,
    config_to_dict,
    dump_config,
    load_config,
)
from .data import BatchStream, generate_image_dataset, generate_toy_dataset, \
    load_dataset_file, split
from .mlp import MLPTrainer, ToyMLP
from .search_space import Supernet, genotype_from_json, genotype_to_json

log = logging.getLogger(__name__)

TRAIN_COLUMNS = ("epoch", "split", "loss", "nll", "kl", "accuracy")
MI_COLUMNS = ("epoch", "layer", "I_all", "I_clean", "I_noisy", "I_zx")
GRADNORM_COLUMNS = ("epoch", "clean_mean", "clean_std", "noisy_mean", "noisy_std")
ALPHA_COLUMNS = ("epoch", "cell", "edge", "op", "logit")


def _fmt(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, float):
        return f"{value:.9g}"
    return str(value)


def export_metrics(rows: list[dict], path: Path, columns) -> None:
    """One CSV per record family: header row, stable column order,
    floats at 9 significant digits."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(col)) for col in columns])


def import_metrics(path: Path) -> list[dict]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


class RunDir:
    """Collects every artifact of one run and finalizes the manifest."""

    def __init__(self, out: Path, cfg: ExperimentConfig | None):
        self.path = Path(out)
        self.path.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []
        self.started = datetime.datetime.now(datetime.timezone.utc).isoformat()
        self.cfg = cfg
        if cfg is not None:
            self.write_text("config.yaml", dump_config(cfg))

    def write_text(self, name: str, text: str) -> Path:
        target = self.path / name
        target.write_text(text, encoding="utf-8")
        self.files.append(name)
        return target

    def write_csv(self, name: str, rows: list[dict], columns) -> Path:
        target = self.path / name
        export_metrics(rows, target, columns)
        self.files.append(name)
        return target

    def finish(self) -> None:
        manifest = {
            "config_hash": config_hash(self.cfg) if self.cfg is not None else None,
            "version": __version__,
            "started": self.started,
            "finished": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "files": sorted(self.files),
        }
        (self.path / "manifest.json").write_text(
            json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


# -- dataset assembly ---------------------------------------------------------


def _base_dataset(cfg: ExperimentConfig):
    d = cfg.dataset
    if d.kind == "toy":
        return generate_toy_dataset(d.n_bits, d.n_samples, cfg.seed)
    if d.kind == "image":
        return generate_image_dataset(d.classes, d.per_class, d.hw, cfg.seed)
    if not d.path:
        raise ConfigError("dataset.path: required for kind 'file'")
    return load_dataset_file(d.path)


def _train_holdout(cfg: ExperimentConfig):
    """(noisy train split, clean holdout split)."""
    base = _base_dataset(cfg)
    train, holdout = split(base, (1.0 - cfg.dataset.holdout_fraction,
                                  cfg.dataset.holdout_fraction), cfg.seed + 1)
    return train.with_noise(cfg.noise.spec(cfg.seed + 2)), holdout


def _bilevel_split(cfg: ExperimentConfig):
    """Disjoint halves for the bilevel problem, both label-corrupted."""
    base = _base_dataset(cfg)
    pool, _ = split(base, (1.0 - cfg.dataset.holdout_fraction,
                           cfg.dataset.holdout_fraction), cfg.seed + 1)
    noisy = pool.with_noise(cfg.noise.spec(cfg.seed + 2))
    return split(noisy, (0.5, 0.5), cfg.seed + 3)


def _train_rows(metrics: list[dict], eval_split: str) -> list[dict]:
    rows = []
    for m in metrics:
        rows.append({"epoch": m["epoch"], "split": "train", "loss": m["train_loss"],
                     "nll": m["train_nll"], "kl": m["train_kl"],
                     "accuracy": m["train_accuracy"]})
        if "val_accuracy" in m:
            rows.append({"epoch": m["epoch"], "split": eval_split,
                         "loss": m.get("val_loss"), "nll": m.get("val_nll"),
                         "kl": m.get("val_kl"), "accuracy": m["val_accuracy"]})
    return rows


def _mi_rows(records) -> list[dict]:
    return [{"epoch": r.epoch, "layer": r.layer, "I_all": r.i_all,
             "I_clean": r.i_clean, "I_noisy": r.i_noisy,
             "I_zx": r.i_zx if r.i_zx is not None else ""} for r in records]


def _gradnorm_rows(records) -> list[dict]:
    return [{"epoch": r.epoch, "clean_mean": r.clean_mean, "clean_std": r.clean_std,
             "noisy_mean": r.noisy_mean, "noisy_std": r.noisy_std} for r in records]


def _alpha_rows(trajectory, kinds) -> list[dict]:
    rows = []
    for epoch, snap in enumerate(trajectory):
        for cell in ("normal", "reduce"):
            mat = snap[cell]
            for e in range(mat.shape[0]):
                for r, kind in enumerate(kinds):
                    rows.append({"epoch": epoch, "cell": cell, "edge": e,
                                 "op": kind, "logit": float(mat[e, r])})
    return rows


# -- subcommands ----------------------------------------------------------------

NCONV_KINDS = ("sep_nconv_3x3", "dil_nconv_3x3")


def cmd_search(cfg: ExperimentConfig) -> int:
    run = RunDir(cfg.out, cfg)
    trn, val = _bilevel_split(cfg)
    net = Supernet(n_classes=trn.n_classes, init_channels=cfg.model.channels,
                   n_cells=cfg.model.cells, n_nodes=cfg.model.nodes, seed=cfg.seed,
                   input_channels=trn.inputs.shape[1])
    if cfg.model.mask_nconv:
        net.mask_kinds(NCONV_KINDS)
    scfg = cfg.optim.search_config()
    trajectory, metrics = search_phase(
        net, BatchStream(trn, scfg.batch_size, cfg.seed + 4),
        BatchStream(val, scfg.batch_size, cfg.seed + 5), scfg,
        beta=cfg.objective.beta, mu_mode=cfg.objective.mu_mode,
        kl_aggregate=cfg.objective.kl_aggregate,
        metrics_cb=lambda row: log.info("search %s", row))
    genotype = net.derive_genotype({
        "seed": cfg.seed,
        "noise": {"kind": cfg.noise.kind, "rate": cfg.noise.rate},
        "epoch": scfg.epochs,
        "masked_nconv": cfg.model.mask_nconv,
    })
    run.write_text("genotype.json", genotype_to_json(genotype))
    run.write_csv("metrics_train.csv", _train_rows(metrics, "val"), TRAIN_COLUMNS)
    run.write_csv("metrics_alpha.csv", _alpha_rows(trajectory, net.kinds), ALPHA_COLUMNS)
    run.finish()
    return 0


def cmd_evaluate(cfg: ExperimentConfig, genotype_path: str) -> int:
    run = RunDir(cfg.out, cfg)
    genotype = genotype_from_json(Path(genotype_path).read_text(encoding="utf-8"))
    trn, test = _train_holdout(cfg)
    scfg = cfg.optim.search_config()
    mi_records = []
    gradnorm_records = []
    net_holder = {}

    def epoch_cb(row):
        log.info("evaluate %s", row)
        epoch = row["epoch"]
        model = net_holder["model"]
        if cfg.analysis.gradnorm_every and epoch % cfg.analysis.gradnorm_every == 0:
            stream = net_holder["stream"]
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 61, epoch]))
            take = min(cfg.analysis.gradnorm_samples, len(trn))
            idx = rng.choice(len(trn), size=take, replace=False)
            gradnorm_records.append(
                grad_norm_split(model, trn, idx, epoch, stream._batch))

    trn_stream = BatchStream(trn, scfg.batch_size, cfg.seed + 4)
    test_stream = BatchStream(test, scfg.batch_size, cfg.seed + 5)

    from .search_space import build_discrete_network
    net = build_discrete_network(genotype, trn.n_classes, cfg.model.channels,
                                 cfg.model.cells, cfg.seed,
                                 input_channels=trn.inputs.shape[1])
    model = SupernetTrainer(net, cfg.objective.beta, cfg.objective.mu_mode,
                            cfg.objective.kl_aggregate)
    net_holder["model"] = model
    net_holder["stream"] = trn_stream
    metrics = train_weights(model, trn_stream, scfg, eval_stream=test_stream,
                            metrics_cb=epoch_cb)
    final_acc = model.accuracy(test_stream.full())

    run.write_csv("metrics_train.csv", _train_rows(metrics, "test"), TRAIN_COLUMNS)
    if gradnorm_records:
        run.write_csv("metrics_gradnorm.csv", _gradnorm_rows(gradnorm_records),
                      GRADNORM_COLUMNS)
    run.write_text("final.json", json.dumps(
        {"test_accuracy": final_acc, "epochs": scfg.epochs,
         "parameters": net.store.n_params()}, indent=2) + "\n")
    run.finish()
    return 0


def _toy_model(cfg: ExperimentConfig, injection) -> ToyMLP:
    return ToyMLP(cfg.dataset.n_bits, list(cfg.model.hidden), 2, cfg.seed,
                  injection=injection,
                  injector_reduction=cfg.model.injector_reduction)


def cmd_toy_mi(cfg: ExperimentConfig) -> int:
    run = RunDir(cfg.out, cfg)
    trn, val = _train_holdout(cfg)
    injection = "learned" if cfg.model.inject else None
    net = _toy_model(cfg, injection)
    model = MLPTrainer(net, cfg.objective.beta, cfg.objective.mu_mode,
                       cfg.objective.kl_aggregate)
    scfg = cfg.optim.search_config()
    mi_every = cfg.analysis.mi_every or 10
    mi_records = []
    gradnorm_records = []
    trn_stream = BatchStream(trn, scfg.batch_size, cfg.seed + 4)

    def epoch_cb(row):
        epoch = row["epoch"]
        if epoch % mi_every == 0 or epoch == scfg.epochs - 1:
            mi_records.extend(mi_trajectory(net, trn, epoch,
                                            n_bins=cfg.analysis.n_bins,
                                            compute_zx=cfg.analysis.mi_zx))
        if cfg.analysis.gradnorm_every and epoch % cfg.analysis.gradnorm_every == 0:
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 62, epoch]))
            take = min(cfg.analysis.gradnorm_samples, len(trn))
            idx = rng.choice(len(trn), size=take, replace=False)
            gradnorm_records.append(
                grad_norm_split(model, trn, idx, epoch, trn_stream._batch))
        if epoch % 50 == 0:
            log.info("toy-mi %s", row)

    metrics = train_weights(model, trn_stream, scfg,
                            eval_stream=BatchStream(val, scfg.batch_size, cfg.seed + 5),
                            metrics_cb=epoch_cb)
    run.write_csv("metrics_train.csv", _train_rows(metrics, "val"), TRAIN_COLUMNS)
    run.write_csv("metrics_mi.csv", _mi_rows(mi_records), MI_COLUMNS)
    if gradnorm_records:
        run.write_csv("metrics_gradnorm.csv", _gradnorm_rows(gradnorm_records),
                      GRADNORM_COLUMNS)
    run.write_text("final.json", json.dumps(
        {"val_accuracy": metrics[-1]["val_accuracy"],
         "inject": cfg.model.inject}, indent=2) + "\n")
    run.finish()
    return 0


def cmd_ablate_sigma(cfg: ExperimentConfig) -> int:
    """Fixed-noise grid: the injector's std/mean are set externally, not
    learned, so the objective reduces to plain cross-entropy."""
    run = RunDir(cfg.out, cfg)
    trn, val = _train_holdout(cfg)
    scfg = cfg.optim.search_config()
    summary = []
    for sigma in cfg.ablation.sigmas:
        for mu in cfg.ablation.mus:
            net = _toy_model(cfg, ("fixed", float(sigma), float(mu)))
            model = MLPTrainer(net, beta=0.0)
            metrics = train_weights(
                model, BatchStream(trn, scfg.batch_size, cfg.seed + 4), scfg,
                eval_stream=BatchStream(val, scfg.batch_size, cfg.seed + 5))
            summary.append({"sigma": float(sigma), "mu": float(mu), "seed": cfg.seed,
                            "val_accuracy": metrics[-1]["val_accuracy"],
                            "train_loss": metrics[-1]["train_loss"]})
            log.info("ablate sigma=%s mu=%s -> %s", sigma, mu,
                     summary[-1]["val_accuracy"])
    run.write_csv("ablation_summary.csv", summary,
                  ("sigma", "mu", "seed", "val_accuracy", "train_loss"))
    run.finish()
    return 0


def cmd_histogram(paths: list[str], out: str) -> int:
    run = RunDir(out, None)
    genotypes = [genotype_from_json(Path(p).read_text(encoding="utf-8"))
                 for p in paths]
    hist = op_histogram(genotypes)
    rows = [{"cell_type": ct, "op": op, "count": count}
            for ct in ("normal", "reduce")
            for op, count in hist.counts[ct].items()]
    run.write_csv("histogram.csv", rows, ("cell_type", "op", "count"))
    run.write_text("histogram_summary.json", json.dumps({
        "runs": hist.runs,
        "parameterless_fraction": {
            ct: hist.parameterless_fraction(ct) for ct in ("normal", "reduce")},
    }, indent=2) + "\n")
    run.finish()
    return 0


# -- entry point ------------------------------------------------------------------


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if getattr(args, "beta", None) is not None:
        cfg.objective.beta = args.beta
    if getattr(args, "order", None) is not None:
        cfg.optim.order = args.order
    if getattr(args, "inject", None) is not None:
        cfg.model.inject = args.inject
    return cfg


def _seed_worker(payload) -> int:
    subcommand, config_dict, seed, out, genotype = payload
    cfg = config_from_dict(config_dict)
    cfg.seed = seed
    cfg.out = out
    return _dispatch(subcommand, cfg, genotype)


def _dispatch(subcommand: str, cfg: ExperimentConfig, genotype: str | None) -> int:
    if subcommand == "search":
        return cmd_search(cfg)
    if subcommand == "evaluate":
        if not genotype:
            raise ConfigError("evaluate requires --genotype PATH")
        return cmd_evaluate(cfg, genotype)
    if subcommand == "toy-mi":
        return cmd_toy_mi(cfg)
    if subcommand == "ablate-sigma":
        return cmd_ablate_sigma(cfg)
    raise ConfigError(f"unknown subcommand {subcommand!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="noisynas",
        description="architecture search and analysis under label noise")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, with_model_flags=True):
        p.add_argument("--config", type=str, default=None, help="YAML config path")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--seeds", type=int, default=None,
                       help="launch K independent seeded runs concurrently")
        p.add_argument("--out", type=str, default=None)
        if with_model_flags:
            p.add_argument("--beta", type=float, default=None)
            p.add_argument("--order", choices=("first", "second"), default=None)
            p.add_argument("--inject", action=argparse.BooleanOptionalAction,
                           default=None)

    add_common(sub.add_parser("search", help="relaxed architecture search"))
    pe = sub.add_parser("evaluate", help="retrain a genotype from scratch")
    add_common(pe)
    pe.add_argument("--genotype", type=str, required=True)
    add_common(sub.add_parser("toy-mi", help="information-plane toy study"))
    add_common(sub.add_parser("ablate-sigma", help="fixed-noise grid on the toy task"))
    ph = sub.add_parser("histogram", help="operator histogram over genotypes")
    ph.add_argument("genotypes", nargs="+", help="genotype JSON files")
    ph.add_argument("--out", type=str, required=True)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("NOISYNAS_LOGLEVEL", "INFO"),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "histogram":
            return cmd_histogram(args.genotypes, args.out)
        cfg = load_config(args.config) if args.config else config_from_dict({})
        cfg = _apply_overrides(cfg, args)
        genotype = getattr(args, "genotype", None)
        if args.seeds is not None and args.seeds > 1:
            base_out = Path(cfg.out)
            payloads = [(args.command, config_to_dict(cfg), cfg.seed + i,
                         str(base_out / f"seed_{cfg.seed + i}"), genotype)
                        for i in range(args.seeds)]
            workers = min(args.seeds, os.cpu_count() or 1)
            with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
                codes = list(pool.map(_seed_worker, payloads))
            return max(codes)
        return _dispatch(args.command, cfg, genotype)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
