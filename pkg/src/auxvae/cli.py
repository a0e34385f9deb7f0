"""Command-line entry point: dataset generation, training, grid search,
evaluation, and the analysis experiments, driven by key=value config files.

Heavy numeric imports are deferred until after argument parsing so that
--threads-deterministic can pin the BLAS thread pools first.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
import time

EXIT_NUMERICAL = 1
EXIT_USAGE = 2
EXIT_IO = 3

_SECTION_KEYS = {
    "dataset": {"kind", "n", "seed", "size", "pixel_scale", "oversample",
                "psf_truncation_sigmas", "normalize"},
    "train": {"dataset", "case", "factors", "arch_variant", "d_z", "hidden",
              "beta", "lambda1", "lambda2", "k_degree", "j_samples",
              "batch_size", "lr", "epochs", "seed", "corr_mode", "grad_clip"},
    "grid": {"beta", "lambda1", "lambda2"},
    "evaluate": {"checkpoint", "dataset", "split"},
    "traverse": {"checkpoint", "dataset", "split", "latent_index", "steps",
                 "base_index"},
    "perturb": {"checkpoint", "dataset", "split", "target", "noise_scale",
                "count", "seed"},
    "attack": {"checkpoint", "dataset", "split", "epsilons"},
}


class ConfigError(ValueError):
    pass


def load_config(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as e:
        raise e
    except configparser.Error as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from e
    for section in parser.sections():
        if section not in _SECTION_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        unknown = set(parser[section]) - _SECTION_KEYS[section]
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return parser


def _section(cfg: configparser.ConfigParser, name: str) -> dict:
    if name not in cfg:
        raise ConfigError(f"config is missing required section [{name}]")
    return dict(cfg[name])


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class Manifest:
    """Record of one command run: resolved config, inputs, hashed outputs."""

    def __init__(self, command: str, config: dict, seed):
        self.data = {
            "command": command,
            "config": config,
            "seed": seed,
            "inputs": [],
            "outputs": {},
            "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }

    def add_input(self, path):
        self.data["inputs"].append(str(path))

    def add_output(self, path):
        self.data["outputs"][str(path)] = _sha256(path)

    def write(self, out_dir):
        self.data["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        path = os.path.join(out_dir, "manifest.json")
        with open(path, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
        return path


def _train_config(section: dict, seed_override):
    from .trainer import TrainConfig
    kwargs = {}
    converters = {
        "dataset": str, "case": str, "arch_variant": str, "corr_mode": str,
        "d_z": int, "k_degree": int, "j_samples": int, "batch_size": int,
        "epochs": int, "seed": int,
        "beta": float, "lambda1": float, "lambda2": float, "lr": float,
    }
    for key, value in section.items():
        if key == "factors":
            kwargs["factors"] = [f.strip() for f in value.split(",") if f.strip()]
        elif key == "hidden":
            kwargs["hidden"] = tuple(int(v) for v in value.split(","))
        elif key == "grad_clip":
            kwargs["grad_clip"] = None if value.lower() == "none" else float(value)
        else:
            kwargs[key] = converters[key](value)
    if seed_override is not None:
        kwargs["seed"] = seed_override
    try:
        return TrainConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad [train] section: {e}") from e


def _render_config(section: dict):
    from .datagen import RenderConfig
    kwargs = {}
    if "size" in section:
        kwargs["size"] = int(section["size"])
    if "pixel_scale" in section:
        kwargs["pixel_scale"] = float(section["pixel_scale"])
    if "oversample" in section:
        kwargs["oversample"] = int(section["oversample"])
    if "psf_truncation_sigmas" in section:
        kwargs["psf_truncation_sigmas"] = float(section["psf_truncation_sigmas"])
    if "normalize" in section:
        kwargs["normalize"] = section["normalize"]
    try:
        return RenderConfig(**kwargs)
    except ValueError as e:
        raise ConfigError(f"bad [dataset] section: {e}") from e


def _load_split(section: dict, default="test"):
    from . import datagen, trainer
    ckpt = trainer.load_checkpoint(section["checkpoint"])
    ds = datagen.load_dataset(section["dataset"])
    which = section.get("split", default)
    if which == "all":
        return ckpt, ds
    parts = dict(zip(("train", "val", "test"),
                     datagen.split(ds, (7, 2, 1), seed=ckpt.config.seed)))
    if which not in parts:
        raise ConfigError(f"unknown split {which!r}")
    return ckpt, parts[which]


def cmd_generate(args) -> int:
    from . import datagen
    section = _section(load_config(args.config), "dataset")
    kind = section.get("kind", "galaxy")
    n = int(section.get("n", "1024"))
    seed = args.seed if args.seed is not None else int(section.get("seed", "0"))
    cfg = _render_config(section) if kind == "galaxy" else None
    manifest = Manifest("generate", dict(section), seed)
    manifest.add_input(args.config)
    ds = datagen.build_dataset(kind, n, seed, cfg, workers=args.workers)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, f"{kind}.axvd")
    datagen.save_dataset(ds, out_path)
    manifest.add_output(out_path)
    manifest.write(args.out)
    print(f"wrote {out_path} ({ds.n} samples, image shape {ds.image_shape})")
    return 0


def cmd_train(args) -> int:
    from . import trainer
    cfg = _train_config(_section(load_config(args.config), "train"), args.seed)
    manifest = Manifest("train", json.loads(cfg.to_json()), cfg.seed)
    manifest.add_input(args.config)
    manifest.add_input(cfg.dataset)
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "training_log.csv")
    ckpt, _ = trainer.train(cfg, log_path=log_path)
    ckpt_path = os.path.join(args.out, "model.axvc")
    trainer.save_checkpoint(ckpt, ckpt_path)
    manifest.add_output(ckpt_path)
    manifest.add_output(log_path)
    manifest.write(args.out)
    print(f"wrote {ckpt_path} (epochs={ckpt.final_epoch}, n_train={ckpt.n_train})")
    return 0


def cmd_gridsearch(args) -> int:
    from . import trainer
    parsed = load_config(args.config)
    base_cfg = _train_config(_section(parsed, "train"), args.seed)
    grid_section = _section(parsed, "grid")

    def values(key, default):
        if key not in grid_section:
            return [default]
        return [float(v) for v in grid_section[key].split(",")]

    grid = [(b, l1, l2)
            for b in values("beta", base_cfg.beta)
            for l1 in values("lambda1", base_cfg.lambda1)
            for l2 in values("lambda2", base_cfg.lambda2)]
    manifest = Manifest("gridsearch", json.loads(base_cfg.to_json()), base_cfg.seed)
    manifest.add_input(args.config)
    manifest.add_input(base_cfg.dataset)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "grid.csv")
    result = trainer.grid_search(base_cfg, grid, workers=args.workers,
                                 csv_path=csv_path)
    best_path = os.path.join(args.out, "best_config.json")
    with open(best_path, "w") as fh:
        fh.write(result.best_config.to_json())
    manifest.add_output(csv_path)
    manifest.add_output(best_path)
    manifest.write(args.out)
    best = result.best
    print(f"best cell: beta={best.beta} lambda1={best.lambda1} "
          f"lambda2={best.lambda2} (product={best.product:.4f})")
    return 0


def cmd_evaluate(args) -> int:
    from . import metrics, trainer
    section = _section(load_config(args.config), "evaluate")
    ckpt, part = _load_split(section)
    manifest = Manifest("evaluate", dict(section), ckpt.seed)
    manifest.add_input(section["checkpoint"])
    manifest.add_input(section["dataset"])
    report = trainer.evaluate(ckpt, part)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "metrics.csv")
    metrics.write_metrics_csv(report, out_path)
    manifest.add_output(out_path)
    manifest.write(args.out)
    print(f"lds={report.lds:.4f} sap={report.sap:.4f} mse={report.mse:.6f} "
          f"ssim_median={report.ssim_summary.median:.4f}")
    return 0


def cmd_traverse(args) -> int:
    from . import experiments
    section = _section(load_config(args.config), "traverse")
    ckpt, part = _load_split(section)
    spec = experiments.TraversalSpec(
        latent_index=int(section.get("latent_index", "0")),
        steps=int(section.get("steps", "8")),
        base_index=int(section.get("base_index", "0")))
    manifest = Manifest("traverse", dict(section), ckpt.seed)
    manifest.add_input(section["checkpoint"])
    manifest.add_input(section["dataset"])
    result = experiments.traverse(ckpt, part, spec)
    os.makedirs(args.out, exist_ok=True)
    pgm_path = os.path.join(args.out, f"traverse_z{spec.latent_index}.pgm")
    csv_path = os.path.join(args.out, f"traverse_z{spec.latent_index}.csv")
    experiments.write_pgm_strip(result.images, pgm_path)
    experiments.write_traversal_csv(result, csv_path)
    manifest.add_output(pgm_path)
    manifest.add_output(csv_path)
    manifest.write(args.out)
    print(f"wrote {pgm_path} (sensitivity="
          f"{experiments.strip_sensitivity(result):.4f})")
    return 0


def cmd_perturb(args) -> int:
    from . import experiments
    section = _section(load_config(args.config), "perturb")
    ckpt, part = _load_split(section)
    seed = args.seed if args.seed is not None else int(section.get("seed", "0"))
    count = min(int(section.get("count", "1000")), part.n)
    manifest = Manifest("perturb", dict(section), seed)
    manifest.add_input(section["checkpoint"])
    manifest.add_input(section["dataset"])
    groups = {}
    targets = section.get("target", "none,aux,recon").split(",")
    for target in [t.strip() for t in targets]:
        spec = experiments.PerturbationSpec(
            target=target, count=count,
            noise_scale=float(section.get("noise_scale", "1.0")))
        groups[target] = experiments.perturb_study(ckpt, part, spec, seed=seed)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "perturbation_ssim.csv")
    experiments.write_distribution_csv(groups, out_path, key_label="target")
    manifest.add_output(out_path)
    manifest.write(args.out)
    import numpy as np
    for target, values in groups.items():
        print(f"{target}: median ssim {float(np.median(values)):.4f}")
    return 0


def cmd_attack(args) -> int:
    from . import experiments
    section = _section(load_config(args.config), "attack")
    ckpt, part = _load_split(section)
    eps = [float(v) for v in section.get("epsilons", "0,0.01,0.05,0.1").split(",")]
    manifest = Manifest("attack", dict(section), ckpt.seed)
    manifest.add_input(section["checkpoint"])
    manifest.add_input(section["dataset"])
    groups = experiments.robustness_curve(ckpt, part, epsilons=eps)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "fgsm_ssim.csv")
    experiments.write_distribution_csv(groups, out_path, key_label="epsilon")
    manifest.add_output(out_path)
    manifest.write(args.out)
    import numpy as np
    for e, values in groups.items():
        print(f"eps={e}: median ssim {np.median(values):.4f}")
    return 0


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "gridsearch": cmd_gridsearch,
    "evaluate": cmd_evaluate,
    "traverse": cmd_traverse,
    "perturb": cmd_perturb,
    "attack": cmd_attack,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="auxvae",
        description="Auxiliary-guided disentangled VAE laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="key=value config file")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--workers", type=int, default=1,
                       help="parallel workers for generation / grid search")
        p.add_argument("--threads-deterministic", action="store_true",
                       help="pin numeric libraries to one thread")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads_deterministic:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = "1"
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, RuntimeError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
