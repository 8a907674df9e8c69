"""Command-line experiment harness.

Subcommands: train, sweep, verify, cost, incremental. Configs are single
JSON files with a schema version; command-line flags override config
fields. All result files are written atomically (temp file + rename) and
CSV/JSON-lines outputs round-trip exactly, so reruns with the same seeds
are byte-identical.

Exit codes: 0 success, 1 runtime failure, 2 config error, 3 corrupt
artifact. For `verify`, success additionally requires the equivalence
check to pass.
"""

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .connectivity import (
    DEPTH_MULTIPLIER, SPARSE_RANDOM,
    TransformSpec, apply_transform, arch_from_json, conv_param_count, match_budget,
)
from .data import SynthSpec, load_idx, synth_dataset
from .equivalence import (
    equivalence_class_size, permute_network, random_permutation_set, verify_equivalence,
)
from .errors import CheckpointError, ConfigError, DataFormatError, TrainingDiverged
from .network import cost_report, load_checkpoint, save_checkpoint
from .training import DensifySchedule, TrainConfig, run_training

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_CORRUPT = 3


def atomic_write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f"{path.name}.tmp.{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)


def fmt(value):
    """CSV cell formatting that round-trips floats exactly via repr."""
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    atomic_write_text(path, buf.getvalue())


@dataclass
class ExperimentConfig:
    arch_path: str
    arch: object
    dataset: dict
    train: TrainConfig
    transform: TransformSpec = None
    densify: DensifySchedule = None
    out_dir: str = "out"
    seeds: tuple = (0,)
    budgets: tuple = ()

    @classmethod
    def load(cls, path):
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}")
        version = raw.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(f"config schema_version {version!r}, expected {SCHEMA_VERSION}")
        arch_path = raw.get("arch")
        if not arch_path:
            raise ConfigError("config missing 'arch' (path to architecture JSON)")
        arch_file = Path(path).parent / arch_path if not Path(arch_path).is_absolute() else Path(arch_path)
        if not arch_file.exists():
            raise ConfigError(f"architecture file not found: {arch_file}")
        arch = arch_from_json(arch_file.read_text())
        dataset = raw.get("dataset")
        if not isinstance(dataset, dict) or "kind" not in dataset:
            raise ConfigError("config missing dataset.kind (mnist|synth)")
        seeds = tuple(raw.get("seeds", [0]))
        if not seeds:
            raise ConfigError("seeds list must be non-empty")
        cfg = cls(
            arch_path=str(arch_file),
            arch=arch,
            dataset=dataset,
            train=TrainConfig.from_json_dict(raw.get("train", {})),
            transform=(TransformSpec.from_json_dict(raw["transform"])
                       if raw.get("transform") else None),
            densify=(DensifySchedule.from_json_dict(raw["densify"])
                     if raw.get("densify") else None),
            out_dir=raw.get("out_dir", "out"),
            seeds=seeds,
            budgets=tuple(raw.get("budgets", ())),
        )
        if dataset["kind"] == "mnist":
            base = Path(path).parent
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                if key not in dataset:
                    raise ConfigError(f"mnist dataset config missing {key!r}")
                p = Path(dataset[key])
                resolved = p if p.is_absolute() else base / p
                if not resolved.exists():
                    raise ConfigError(f"dataset path does not exist: {resolved}")
                dataset[key] = str(resolved)
        elif dataset["kind"] != "synth":
            raise ConfigError(f"unknown dataset kind {dataset['kind']!r}")
        return cfg

    def load_datasets(self):
        d = self.dataset
        if d["kind"] == "mnist":
            train = load_idx(d["train_images"], d["train_labels"])
            test = load_idx(d["test_images"], d["test_labels"])
            limit = d.get("train_limit")
            if limit:
                train = train.subset(int(limit))
        else:
            spec = SynthSpec(
                num_classes=int(d.get("classes", 4)),
                size=int(d.get("size", 16)),
                count=int(d.get("train_count", 2048)),
                noise=float(d.get("noise", 0.15)),
            )
            test_spec = SynthSpec(
                num_classes=spec.num_classes, size=spec.size,
                count=int(d.get("test_count", 512)), noise=spec.noise,
            )
            data_seed = int(d.get("seed", 1))
            train = synth_dataset(spec, seed=data_seed)
            test = synth_dataset(test_spec, seed=data_seed + 1)
        if self.arch.input_shape != tuple(train.images.shape[1:]):
            raise ConfigError(
                f"architecture expects input {self.arch.input_shape}, dataset has "
                f"{tuple(train.images.shape[1:])}"
            )
        return train, test


def _realize(cfg, transform, seed):
    """Arch + masks for one run; full-mask lists collapse to dense layers.

    Each run seed draws a fresh random connection structure (rounds are
    averaged over structures, not just over init/batch order), derived
    deterministically from the transform's base seed and the run seed.
    """
    if transform is None:
        return cfg.arch, None
    eff_seed = int(np.random.SeedSequence([transform.seed, seed]).generate_state(1)[0])
    spec = TransformSpec(
        kind=transform.kind, alpha=transform.alpha, seed=eff_seed,
        depth_alpha=transform.depth_alpha,
    ).validate()
    arch, masks = apply_transform(cfg.arch, spec)
    if masks is not None and all(m.is_full() for m in masks):
        masks = None  # dense layers compute the identical function, faster
    return arch, masks


def _train_one(cfg, transform, seed, out, label, schedule=None):
    arch, masks = _realize(cfg, transform, seed)
    train_set, test_set = cfg.load_datasets()
    tc_dict = cfg.train.to_json_dict()
    tc_dict["seed"] = seed
    tc = TrainConfig.from_json_dict(tc_dict)
    runs_dir = Path(out) / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    net, record = run_training(
        arch, masks, train_set, test_set, tc, schedule=schedule,
        jsonl_path=runs_dir / f"{label}.jsonl", label=label,
    )
    ckpt_dir = Path(out) / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, ckpt_dir / f"{label}.ckpt", extra={"label": label})
    return net, record


def cmd_train(cfg, out, threads=1):
    rows = []
    for seed in cfg.seeds:
        label = f"train_seed{seed}"
        _, record = _train_one(cfg, cfg.transform, seed, out, label)
        final = record.final
        rows.append((seed, final.step, final.params, final.madds,
                     final.density, final.train_loss, final.test_accuracy))
    rows.sort(key=lambda r: r[0])
    write_csv(
        Path(out) / "results.csv",
        ["seed", "steps", "params", "madds", "density", "train_loss", "accuracy"],
        rows,
    )
    print(f"wrote {Path(out) / 'results.csv'} ({len(rows)} runs)")
    return EXIT_OK


def cmd_incremental(cfg, out, threads=1):
    if cfg.densify is None:
        raise ConfigError("incremental training needs a 'densify' schedule in the config")
    if cfg.transform is None:
        # start from a sparse net at the schedule's initial density
        cfg = _with_transform(cfg, TransformSpec(SPARSE_RANDOM, cfg.densify.initial_density, seed=0))
    rows = []
    for seed in cfg.seeds:
        label = f"incr_seed{seed}"
        _, record = _train_one(cfg, cfg.transform, seed, out, label, schedule=cfg.densify)
        final = record.final
        rows.append((seed, final.step, final.params, final.madds,
                     final.density, final.train_loss, final.test_accuracy))
    rows.sort(key=lambda r: r[0])
    write_csv(
        Path(out) / "results.csv",
        ["seed", "steps", "params", "madds", "density", "train_loss", "accuracy"],
        rows,
    )
    print(f"wrote {Path(out) / 'results.csv'} ({len(rows)} incremental runs)")
    return EXIT_OK


def _with_transform(cfg, transform):
    return ExperimentConfig(
        arch_path=cfg.arch_path, arch=cfg.arch, dataset=cfg.dataset,
        train=cfg.train, transform=transform, densify=cfg.densify,
        out_dir=cfg.out_dir, seeds=cfg.seeds, budgets=cfg.budgets,
    )


def cmd_sweep(cfg, out, threads=1):
    budgets = cfg.budgets or (1.0, 0.3, 0.1, 0.03)
    dense_params = conv_param_count(cfg.arch)
    jobs = []
    rows = []
    for budget in budgets:
        target = max(1, round(budget * dense_params))
        for kind in (DEPTH_MULTIPLIER, SPARSE_RANDOM):
            try:
                spec = match_budget(cfg.arch, target, kind, seed=0)
            except ConfigError as exc:
                print(f"warning: budget {budget} unreachable for {kind}: {exc}",
                      file=sys.stderr)
                rows.append((kind, None, target, None, None, None))
                continue
            for seed in cfg.seeds:
                jobs.append((kind, spec, budget, seed))

    def run_job(job):
        kind, spec, budget, seed = job
        label = f"{kind}_b{budget}_s{seed}"
        net, record = _train_one(cfg, spec, seed, out, label)
        final = record.final
        return (kind, spec.alpha, final.params, final.madds, seed, final.test_accuracy)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows.extend(pool.map(run_job, jobs))
    else:
        rows.extend(run_job(j) for j in jobs)
    rows.sort(key=lambda r: (r[0], -(r[2] if r[2] is not None else -1),
                             r[4] if r[4] is not None else -1))
    write_csv(
        Path(out) / "results.csv",
        ["kind", "alpha", "params", "madds", "seed", "accuracy"],
        rows,
    )
    print(f"wrote {Path(out) / 'results.csv'} ({len(rows)} rows)")
    return EXIT_OK


def cmd_verify(checkpoint, trials, tol, seed, out=None, precision=64):
    net = load_checkpoint(checkpoint, precision=precision)
    perms = random_permutation_set(net, rng=seed)
    twin = permute_network(net, perms)
    report = verify_equivalence(net, twin, trials=trials, tol=tol, seed=seed + 1)
    payload = report.to_json_dict()
    payload["equivalence_class_size"] = str(equivalence_class_size(net.arch))
    text = json.dumps(payload, sort_keys=True, indent=2)
    print(text)
    if out:
        atomic_write_text(Path(out) / "report.json", text + "\n")
    return EXIT_OK if report.passed else EXIT_RUNTIME


def cmd_cost(arch_path, kind=None, alpha=None, depth_alpha=None, seed=0, json_out=None):
    arch_file = Path(arch_path)
    if not arch_file.exists():
        raise ConfigError(f"architecture file not found: {arch_file}")
    arch = arch_from_json(arch_file.read_text())
    masks = None
    if kind is not None:
        if alpha is None:
            raise ConfigError("--alpha is required when --kind is given")
        spec = TransformSpec(kind, alpha=alpha, seed=seed, depth_alpha=depth_alpha).validate()
        arch, masks = apply_transform(arch, spec)
    from .network import Network

    net = Network.build(arch, masks=masks, seed=seed)
    report = cost_report(net)
    print(report.table())
    if json_out:
        atomic_write_text(json_out, json.dumps(report.to_json_dict(), sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sparseconv",
        description="Channel-sparse convolution experiments: train, sweep, verify, cost.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--seeds", default=None, help="comma-separated seed list (overrides config)")
        p.add_argument("--threads", type=int, default=1, help="worker pool width")
        p.add_argument("--precision", type=int, choices=(32, 64), default=None,
                       help="float precision (overrides config)")

    add_common(sub.add_parser("train", help="train one network per seed"))
    p_sweep = sub.add_parser("sweep", help="budget-matched dense vs sparse sweep")
    add_common(p_sweep)
    p_sweep.add_argument("--budgets", default=None,
                         help="comma-separated budget fractions, e.g. 1,0.3,0.1,0.03")
    add_common(sub.add_parser("incremental", help="train with incremental densification"))

    p_verify = sub.add_parser("verify", help="verify permutation equivalence of a checkpoint")
    p_verify.add_argument("--checkpoint", required=True)
    p_verify.add_argument("--trials", type=int, default=5)
    p_verify.add_argument("--tol", type=float, default=1e-5)
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.add_argument("--out", default=None)
    p_verify.add_argument("--precision", type=int, choices=(32, 64), default=64)

    p_cost = sub.add_parser("cost", help="parameter and multiply-add table for an architecture")
    p_cost.add_argument("--arch", required=True)
    p_cost.add_argument("--kind", choices=(DEPTH_MULTIPLIER, SPARSE_RANDOM, "hybrid"), default=None)
    p_cost.add_argument("--alpha", type=float, default=None)
    p_cost.add_argument("--depth-alpha", type=float, default=None)
    p_cost.add_argument("--seed", type=int, default=0)
    p_cost.add_argument("--json", dest="json_out", default=None)
    return parser


def _load_config_with_overrides(args):
    cfg = ExperimentConfig.load(args.config)
    if args.seeds is not None:
        seeds = tuple(int(s) for s in str(args.seeds).split(",") if s != "")
        if not seeds:
            raise ConfigError("--seeds must name at least one seed")
        cfg = ExperimentConfig(**{**cfg.__dict__, "seeds": seeds})
    if args.precision is not None:
        tc = cfg.train.to_json_dict()
        tc["precision"] = args.precision
        cfg = ExperimentConfig(**{**cfg.__dict__, "train": TrainConfig.from_json_dict(tc)})
    if getattr(args, "budgets", None):
        budgets = tuple(float(b) for b in str(args.budgets).split(",") if b != "")
        cfg = ExperimentConfig(**{**cfg.__dict__, "budgets": budgets})
    out = args.out or cfg.out_dir
    return cfg, out


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            cfg, out = _load_config_with_overrides(args)
            return cmd_train(cfg, out, threads=args.threads)
        if args.command == "sweep":
            cfg, out = _load_config_with_overrides(args)
            return cmd_sweep(cfg, out, threads=args.threads)
        if args.command == "incremental":
            cfg, out = _load_config_with_overrides(args)
            return cmd_incremental(cfg, out, threads=args.threads)
        if args.command == "verify":
            return cmd_verify(args.checkpoint, args.trials, args.tol, args.seed,
                              out=args.out, precision=args.precision)
        if args.command == "cost":
            return cmd_cost(args.arch, kind=args.kind, alpha=args.alpha,
                            depth_alpha=args.depth_alpha, seed=args.seed,
                            json_out=args.json_out)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, DataFormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"corrupt artifact: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        for line in exc.diagnostics:
            print(f"  {line}", file=sys.stderr)
        return EXIT_RUNTIME


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
