"""Command-line interface: gen-data, train, eval, sweep, landscape.

Runs are driven by one INI-style config file with sections [dataset],
[model], [loss], [train], [eval]. Unknown keys are rejected; missing keys
fall back to the documented defaults. Every report embeds the fully
resolved config so its numbers are reproducible from the file alone.

Exit codes: 0 success, 1 runtime failure, 2 config or usage error.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import losses as losses_mod
from . import metrics as metrics_mod
from . import training as training_mod
from .data import DatasetError, DatasetSpec
from .losses import LossConfig, LossError, MarginTable
from .metrics import MetricsError
from .model import Detector, ModelConfig
from .training import TrainingError, TrainRunConfig

META_MAGIC = "fairdetect-meta v1"
META_FILE = "model.meta"
LANDSCAPE_MAGIC = "# fairdetect loss-landscape grid"


class ConfigError(ValueError):
    """Raised for malformed run-config files or bad command usage."""


def _parse_weight_map(text: str) -> dict[str, float]:
    out: dict[str, float] = {}
    if not text.strip():
        return out
    for chunk in text.split(","):
        name, sep, value = chunk.partition(":")
        if not sep:
            raise ConfigError(f"expected name:value pairs, got {chunk!r}")
        out[name.strip()] = float(value)
    return out


def _parse_shape(text: str) -> tuple[int, int, int]:
    parts = [int(v) for v in text.split(",")]
    if len(parts) != 3:
        raise ConfigError(f"image_shape needs three extents, got {text!r}")
    return tuple(parts)  # type: ignore[return-value]


def _parse_names(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


# Section -> key -> (default string, parser). The defaults are the documented
# single-run values; tail fractions use the midpoint of the usual tuning grid.
CONFIG_SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "dataset": {
        "type": ("synthetic", str),
        "csv": ("", str),
        "subgroups": ("g0:0.8,g1:0.2", _parse_weight_map),
        "domains": ("method_a,method_b", _parse_names),
        "n_real": ("100", int),
        "n_fake": ("100", int),
        "image_shape": ("3,16,16", _parse_shape),
        "amp_background": ("0.25", float),
        "amp_demographic": ("0.2", float),
        "amp_domain_specific": ("0.2", float),
        "amp_domain_agnostic": ("0.2", float),
        "amp_noise": ("0.05", float),
        "amp_jitter": ("0.3", float),
        "subgroup_real_leak": ("", _parse_weight_map),
        "seed": ("0", int),
        "pattern_seed": ("0", int),
    },
    "model": {
        "feature_channels": ("8", int),
        "head_hidden": ("32", int),
        "adain_eps": ("1e-5", float),
    },
    "loss": {
        "domain_head_weight": ("0.1", float),
        "demographic_head_weight": ("0.1", float),
        "contrastive_weight": ("0.05", float),
        "reconstruction_weight": ("0.3", float),
        "contrastive_margin": ("3.0", float),
        "margin_scale": ("2.89", float),
        "group_tail_fraction": ("0.5", float),
        "sample_tail_fraction": ("0.5", float),
        "fairness_weight": ("1.0", float),
        "perturb_radius": ("0.05", float),
        "learning_rate": ("5e-4", float),
    },
    "train": {
        "batch_size": ("16", int),
        "epochs": ("100", int),
        "seed": ("0", int),
        "mode": ("full", str),
        "sam_variant": ("sign", str),
        "checkpoint_every": ("0", int),
    },
    "eval": {
        "threshold": ("0.5", float),
        "seed": ("1", int),
        "csv": ("", str),
    },
}


def resolve_config(path: str | None, overrides: dict[tuple[str, str], str] | None = None) -> dict:
    """Merge a config file over schema defaults, then apply CLI overrides."""
    raw: dict[str, dict[str, str]] = {}
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path!r}")
        for section in parser.sections():
            if section not in CONFIG_SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, value in parser.items(section):
                if key not in CONFIG_SCHEMA[section]:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                raw.setdefault(section, {})[key] = value
    for (section, key), value in (overrides or {}).items():
        raw.setdefault(section, {})[key] = value
    resolved: dict[str, dict[str, object]] = {}
    text: dict[str, dict[str, str]] = {}
    for section, keys in CONFIG_SCHEMA.items():
        resolved[section] = {}
        text[section] = {}
        for key, (default, parse) in keys.items():
            value = raw.get(section, {}).get(key, default)
            try:
                resolved[section][key] = parse(value)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad value for [{section}] {key}: {value!r} ({exc})") from exc
            text[section][key] = value
    resolved["_text"] = text
    return resolved


def resolved_config_lines(cfg: dict) -> list[str]:
    lines = []
    for section, keys in cfg["_text"].items():
        lines.append(f"[{section}]")
        for key, value in keys.items():
            lines.append(f"{key} = {value}")
    return lines


def dataset_spec_from_config(cfg: dict, seed: int | None = None) -> DatasetSpec:
    sec = cfg["dataset"]
    if sec["type"] != "synthetic":
        raise ConfigError("this command needs [dataset] type = synthetic")
    return DatasetSpec(
        subgroup_weights=sec["subgroups"],
        domains=sec["domains"],
        n_real=sec["n_real"],
        n_fake=sec["n_fake"],
        image_shape=sec["image_shape"],
        amp_background=sec["amp_background"],
        amp_demographic=sec["amp_demographic"],
        amp_domain_specific=sec["amp_domain_specific"],
        amp_domain_agnostic=sec["amp_domain_agnostic"],
        amp_noise=sec["amp_noise"],
        amp_jitter=sec["amp_jitter"],
        subgroup_real_leak=sec["subgroup_real_leak"],
        seed=sec["seed"] if seed is None else seed,
        pattern_seed=sec["pattern_seed"],
    )


def dataset_from_config(cfg: dict) -> data_mod.Dataset:
    sec = cfg["dataset"]
    if sec["type"] == "csv":
        if not sec["csv"]:
            raise ConfigError("[dataset] type = csv requires a csv path")
        return data_mod.load_csv(sec["csv"], sec["image_shape"])
    if sec["type"] == "synthetic":
        return data_mod.generate_synthetic(dataset_spec_from_config(cfg))
    raise ConfigError(f"[dataset] type must be synthetic or csv, got {sec['type']!r}")


def run_config_from(cfg: dict, dataset: data_mod.Dataset) -> TrainRunConfig:
    loss_cfg = LossConfig(**cfg["loss"])
    model_cfg = ModelConfig(
        image_shape=dataset.image_shape,
        feature_channels=cfg["model"]["feature_channels"],
        head_hidden=cfg["model"]["head_hidden"],
        adain_eps=cfg["model"]["adain_eps"],
        n_domains=len(dataset.domains),
        n_subgroups=len(dataset.subgroups),
    )
    train_sec = cfg["train"]
    return TrainRunConfig(
        loss=loss_cfg,
        model=model_cfg,
        batch_size=train_sec["batch_size"],
        epochs=train_sec["epochs"],
        seed=train_sec["seed"],
        mode=train_sec["mode"],
        sam_variant=train_sec["sam_variant"],
        checkpoint_every=train_sec["checkpoint_every"],
    )


# -- checkpoint metadata ---------------------------------------------------------


def write_meta(path, run_cfg: TrainRunConfig, dataset, margins: MarginTable, cfg: dict) -> None:
    m = run_cfg.model
    lines = [
        META_MAGIC,
        f"mode = {run_cfg.mode}",
        f"sam_variant = {run_cfg.sam_variant}",
        f"image_shape = {','.join(str(v) for v in m.image_shape)}",
        f"feature_channels = {m.feature_channels}",
        f"head_hidden = {m.head_hidden}",
        f"adain_eps = {m.adain_eps!r}",
        f"n_domains = {m.n_domains}",
        f"n_subgroups = {m.n_subgroups}",
        f"subgroups = {','.join(dataset.subgroups)}",
        f"domains = {','.join(dataset.domains)}",
    ]
    for g, delta in zip(margins.subgroups, margins.deltas):
        lines.append(f"margin.{g} = {float(delta)!r}")
    lines.append("[resolved-config]")
    lines.extend(resolved_config_lines(cfg))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_meta(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != META_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint meta file")
    items: dict[str, str] = {}
    margin_items: dict[str, float] = {}
    config_lines: list[str] = []
    in_config = False
    for line in lines[1:]:
        if line == "[resolved-config]":
            in_config = True
            continue
        if in_config:
            config_lines.append(line)
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key.startswith("margin."):
            margin_items[key[len("margin.") :]] = float(value)
        elif key:
            items[key] = value
    loss_cfg = LossConfig()
    if config_lines:
        parser = configparser.ConfigParser()
        parser.read_string("\n".join(config_lines))
        if parser.has_section("loss"):
            loss_cfg = LossConfig(**{k: float(v) for k, v in parser.items("loss")})
    meta = {
        "mode": items["mode"],
        "sam_variant": items["sam_variant"],
        "subgroups": _parse_names(items["subgroups"]),
        "domains": _parse_names(items["domains"]),
        "margins": MarginTable(
            subgroups=tuple(margin_items), deltas=np.array(list(margin_items.values()))
        ),
        "model": ModelConfig(
            image_shape=_parse_shape(items["image_shape"]),
            feature_channels=int(items["feature_channels"]),
            head_hidden=int(items["head_hidden"]),
            adain_eps=float(items["adain_eps"]),
            n_domains=int(items["n_domains"]),
            n_subgroups=int(items["n_subgroups"]),
        ),
        "loss": loss_cfg,
        "config_lines": config_lines,
    }
    return meta


def _load_checkpoint_dir(path: str):
    ckpt = os.path.join(path, training_mod.CHECKPOINT_FILE)
    meta = os.path.join(path, META_FILE)
    if not os.path.isfile(ckpt) or not os.path.isfile(meta):
        raise ConfigError(f"{path}: expected a run directory holding model.ckpt and model.meta")
    return ad.load_checkpoint(ckpt), read_meta(meta)


# -- commands --------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args.config)
    spec = dataset_spec_from_config(cfg, seed=args.seed)
    dataset = data_mod.generate_synthetic(spec)
    data_mod.save_csv(dataset, args.out)
    data_mod.write_stats(data_mod.subgroup_stats(dataset), args.out + ".stats.txt")
    print(f"wrote {len(dataset)} samples to {args.out}")
    return 0


def _train_once(cfg: dict, out_dir: str, resume: bool = False) -> tuple:
    dataset = dataset_from_config(cfg)
    run_cfg = run_config_from(cfg, dataset)
    margins = losses_mod.compute_margins(
        data_mod.subgroup_stats(dataset), run_cfg.loss.margin_scale
    )

    def progress(epoch: int, logs) -> None:
        last = logs[-1]
        print(
            f"epoch {epoch}: loss_dis={last.loss_dis:.6f} loss_fair={last.loss_fair:.6f}"
        )

    params, history = training_mod.train(
        dataset, run_cfg, out_dir=out_dir, resume=resume, progress=progress
    )
    write_meta(os.path.join(out_dir, META_FILE), run_cfg, dataset, margins, cfg)
    return dataset, run_cfg, params, history


def cmd_train(args) -> int:
    overrides: dict[tuple[str, str], str] = {}
    if args.seed is not None:
        overrides[("train", "seed")] = str(args.seed)
    if args.mode is not None:
        overrides[("train", "mode")] = args.mode
    cfg = resolve_config(args.config, overrides)
    os.makedirs(args.out, exist_ok=True)
    _train_once(cfg, args.out, resume=args.resume)
    print(f"run artifacts in {args.out}")
    return 0


def _write_report(report: metrics_mod.MetricsReport, out: str, dataset_name: str,
                  method: str, config_lines: list[str]) -> None:
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
        fh.write("\n[resolved-config]\n")
        fh.write("\n".join(config_lines) + "\n")
    with open(out + ".tsv", "w", encoding="utf-8") as fh:
        fh.write("dataset\tmethod\tmetric\tvalue\n")
        for dataset_id, method_id, metric, value in report.rows(dataset_name, method):
            fh.write(f"{dataset_id}\t{method_id}\t{metric}\t{value!r}\n")


def _evaluate_checkpoint(ckpt_dir: str, data_path: str, threshold: float):
    params, meta = _load_checkpoint_dir(ckpt_dir)
    dataset = data_mod.load_csv(data_path, meta["model"].image_shape)
    model = Detector(meta["model"])
    scores = training_mod.predict_scores(params, model, dataset.samples, meta["mode"])
    records = metrics_mod.make_records(
        scores, [s.y for s in dataset.samples], [s.d for s in dataset.samples], threshold
    )
    report = metrics_mod.build_report(records, threshold, expected_subgroups=meta["subgroups"])
    return report, meta, dataset


def cmd_eval(args) -> int:
    report, meta, _ = _evaluate_checkpoint(args.checkpoint, args.data, args.threshold)
    _write_report(report, args.out, os.path.basename(args.data), meta["mode"],
                  meta["config_lines"])
    print(report.to_text())
    return 0


def cmd_sweep(args) -> int:
    values = [float(v) for v in args.values.split(",") if v.strip()] if args.values else []
    if not values:
        raise ConfigError("sweep needs a nonempty --values list")
    overrides: dict[tuple[str, str], str] = {}
    if args.seed is not None:
        overrides[("train", "seed")] = str(args.seed)
    cfg = resolve_config(args.config, overrides)
    os.makedirs(args.out, exist_ok=True)

    if cfg["dataset"]["type"] == "synthetic":
        eval_spec = dataset_spec_from_config(cfg, seed=cfg["eval"]["seed"])
        eval_data = data_mod.generate_synthetic(eval_spec)
        eval_csv = os.path.join(args.out, "eval_data.csv")
        data_mod.save_csv(eval_data, eval_csv)
    elif cfg["eval"]["csv"]:
        eval_csv = cfg["eval"]["csv"]
    else:
        raise ConfigError("sweep over a csv dataset needs [eval] csv = <path>")

    rows = []
    for value in values:
        run_dir = os.path.join(args.out, f"fairness_weight_{value:g}")
        row_cfg = resolve_config(
            args.config, {**overrides, ("loss", "fairness_weight"): repr(value)}
        )
        try:
            os.makedirs(run_dir, exist_ok=True)
            _train_once(row_cfg, run_dir)
            report, _, _ = _evaluate_checkpoint(run_dir, eval_csv, row_cfg["eval"]["threshold"])
            rows.append(
                (value, report.f_fpr, report.f_meo, report.f_dp, report.f_oae, report.auc, "ok")
            )
            print(f"fairness_weight={value:g}: f_fpr={report.f_fpr:.2f} auc={report.auc:.2f}")
        except Exception as exc:  # keep sweeping; mark the failed row
            rows.append((value, float("nan"), float("nan"), float("nan"), float("nan"),
                         float("nan"), f"failed: {exc}"))
            print(f"fairness_weight={value:g}: failed ({exc})", file=sys.stderr)

    table = os.path.join(args.out, "sweep.tsv")
    with open(table, "w", encoding="utf-8") as fh:
        fh.write("fairness_weight\tf_fpr\tf_meo\tf_dp\tf_oae\tauc\tstatus\n")
        for value, ffpr, fmeo, fdp, foae, aucv, status in sorted(rows, key=lambda r: r[0]):
            fh.write(f"{value!r}\t{ffpr!r}\t{fmeo!r}\t{fdp!r}\t{foae!r}\t{aucv!r}\t{status}\n")
    print(f"sweep table in {table}")
    return 0


def cmd_landscape(args) -> int:
    params, meta = _load_checkpoint_dir(args.checkpoint)
    dataset = data_mod.load_csv(args.data, meta["model"].image_shape)
    model = Detector(meta["model"])
    margins = meta["margins"]
    run_cfg = TrainRunConfig(
        loss=meta["loss"], model=meta["model"], batch_size=16, epochs=0,
        mode=meta["mode"], sam_variant=meta["sam_variant"],
    )
    rng = np.random.default_rng(args.seed)
    batch_size = min(16, len(dataset))
    pairs = data_mod.sample_pairs(dataset, batch_size, rng)[0]
    dir1 = training_mod.filter_normalized_directions(params, rng)
    dir2 = training_mod.filter_normalized_directions(params, rng)
    grid = training_mod.loss_landscape_slice(
        params, pairs, model, margins, dataset, run_cfg, dir1, dir2,
        args.extent, args.resolution,
    )
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(LANDSCAPE_MAGIC + "\n")
        fh.write(f"# extent = {args.extent!r}\n")
        fh.write(f"# resolution = {args.resolution}\n")
        fh.write(f"# seed = {args.seed}\n")
        for row in grid:
            fh.write("\t".join(repr(float(v)) for v in row) + "\n")
    print(f"landscape grid in {args.out}")
    return 0


def read_landscape(path) -> np.ndarray:
    """Parse a landscape grid file back into a resolution x resolution matrix."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != LANDSCAPE_MAGIC:
        raise ConfigError(f"{path}: not a landscape grid file")
    rows = [
        [float(v) for v in line.split("\t")] for line in lines[1:] if not line.startswith("#")
    ]
    return np.array(rows)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fairdetect",
        description="Train and evaluate fairness-preserving forgery detectors at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset CSV plus subgroup stats")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a detector and write checkpoint + history")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--mode", choices=training_mod.MODES, default=None)
    p.add_argument("--resume", action="store_true",
                   help="continue from the run state already in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a CSV dataset")
    p.add_argument("--checkpoint", required=True, help="run directory from train")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train/evaluate across fairness-weight values")
    p.add_argument("--config", required=True)
    p.add_argument("--values", required=True, help="comma-separated fairness weights")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("landscape", help="export a loss-landscape grid around a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--extent", type=float, default=1.0)
    p.add_argument("--resolution", type=int, default=11)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_landscape)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetError, LossError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, MetricsError, ad.GraphError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
