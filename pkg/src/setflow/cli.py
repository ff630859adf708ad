"""Command-line pipeline: toy data, PCA, training, sampling, evaluation and
the downstream classifier protocol, all driven by one JSON config."""
from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import kernels
from .data import (BagDataset, ToySpec, fit_bag_shape_stats, load_dataset,
                   make_toy_dataset, save_dataset, split_dataset)
from .evaluation import fid_report, format_fid_table, format_nn_table, nn_report
from .mil import MilConfig, format_metrics_table, run_protocol
from .net import SetFlowConfig, load_checkpoint, save_checkpoint
from .pca import fit_pca, load_pca, save_pca, transform_dataset
from .sampler import SampleRequest, generate_bags
from .train import TrainConfig, train, write_fid_csv, write_loss_csv

STAGES = ("gen-toy", "fit-pca", "train", "sample", "eval-fid", "eval-nn", "classify")

# stage seeds default to the master seed plus these offsets
_SEED_OFFSETS = {"toy": 1, "split": 2, "train": 3, "sample": 4,
                 "classifier": 5, "fid_eval": 6}


def default_config():
    with resources.files("setflow.configs").joinpath("toy.json").open("r") as fh:
        return json.load(fh)


def _deep_merge(base, override):
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def resolve_config(path=None, seed=None):
    cfg = default_config()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = _deep_merge(cfg, json.load(fh))
    if seed is not None:
        cfg["seed"] = int(seed)
        for section in _SEED_OFFSETS:
            cfg.setdefault(section, {})
            cfg[section]["seed"] = None
    master = int(cfg["seed"])
    for section, offset in _SEED_OFFSETS.items():
        cfg.setdefault(section, {})
        if cfg[section].get("seed") is None:
            cfg[section]["seed"] = master + offset
    return cfg


def _say(quiet, msg):
    if not quiet:
        print(msg, flush=True)


def _load_reduced(out):
    return tuple(load_dataset(out / f"{name}_pca.jsonl")
                 for name in ("train", "val", "test"))


def stage_gen_toy(cfg, out, quiet):
    spec_fields = {k: v for k, v in cfg["toy"].items() if k != "seed"}
    ds = make_toy_dataset(ToySpec(**spec_fields), cfg["toy"]["seed"])
    save_dataset(ds, out / "toy_full.jsonl")
    fr = cfg["split"]
    parts = split_dataset(ds, (fr["train"], fr["val"], fr["test"]), fr["seed"])
    for part in parts:
        save_dataset(part, out / f"toy_{part.split}.jsonl")
    _say(quiet, f"gen-toy: {len(ds)} bags (dim {ds.dim}) -> {out}")


def stage_fit_pca(cfg, out, quiet):
    ds_train = load_dataset(out / "toy_train.jsonl")
    model = fit_pca(ds_train.instance_matrix(), cfg["pca"]["dim"],
                    standardize=cfg["pca"].get("standardize", False))
    save_pca(model, out / "pca.json")
    for name in ("train", "val", "test"):
        ds = load_dataset(out / f"toy_{name}.jsonl")
        save_dataset(transform_dataset(model, ds), out / f"{name}_pca.jsonl")
    _say(quiet, f"fit-pca: {model.source_dim} -> {model.target_dim}")


def stage_train(cfg, out, quiet):
    ds_train, ds_val, _ = _load_reduced(out)
    net_cfg = SetFlowConfig.from_dict(cfg["net"])
    train_cfg = TrainConfig(**cfg["train"])
    params, log = train(ds_train, ds_val, net_cfg, train_cfg)
    if log.status != "ok":
        raise RuntimeError(f"training stopped with status {log.status!r}")
    save_checkpoint(params, out / "checkpoint.npz")
    write_loss_csv(log, out / "loss.csv")
    write_fid_csv(log, out / "fid.csv")
    summary = {
        "status": log.status,
        "iterations": len(log.losses),
        "best_iteration": log.best_iteration,
        "fid_at_start": log.fid_at_start(),
        "fid_best": log.best_fid(),
        "final_loss": log.losses[-1] if log.losses else None,
        "first_loss": log.losses[0] if log.losses else None,
    }
    with open(out / "train_summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    _say(quiet, f"train: {summary['iterations']} iters, "
                f"fid {summary['fid_at_start']:.4g} -> {summary['fid_best']:.4g}")


def stage_sample(cfg, out, quiet):
    params = load_checkpoint(out / "checkpoint.npz")
    ds_train, _, _ = _load_reduced(out)
    stats = fit_bag_shape_stats(ds_train)
    section = cfg["sample"]
    bags = []
    for label in (0, 1):
        req = SampleRequest(label=label, count=section["count_per_class"],
                            steps=section["steps"],
                            seed=section["seed"] + label)
        bags.extend(generate_bags(req, stats, params))
    meta = {"generator": "setflow", "checkpoint": "checkpoint.npz",
            "steps": section["steps"], "seed": section["seed"]}
    ds = BagDataset(bags, dim=params.config.d_in, split="synthetic", meta=meta)
    save_dataset(ds, out / "synthetic.jsonl")
    _say(quiet, f"sample: {len(bags)} bags")


def _original_reduced_corpus(out):
    parts = _load_reduced(out)
    bags = [bag for part in parts for bag in part.bags]
    return BagDataset(bags, dim=parts[0].dim, split="full",
                      meta=dict(parts[0].meta))


def stage_eval_fid(cfg, out, quiet):
    original = _original_reduced_corpus(out)
    synthetic = load_dataset(out / "synthetic.jsonl")
    report = fid_report(original, synthetic, cfg["fid_eval"]["seed"])
    with open(out / "fid_report.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    table = format_fid_table(report)
    (out / "fid_table.txt").write_text(table + "\n", encoding="utf-8")
    _say(quiet, table)


def stage_eval_nn(cfg, out, quiet):
    original = _original_reduced_corpus(out)
    synthetic = load_dataset(out / "synthetic.jsonl")
    report = nn_report(original, synthetic)
    with open(out / "nn_report.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    table = format_nn_table(report)
    (out / "nn_table.txt").write_text(table + "\n", encoding="utf-8")
    _say(quiet, table)


def stage_classify(cfg, out, quiet):
    splits = _load_reduced(out)
    params = load_checkpoint(out / "checkpoint.npz")
    stats = fit_bag_shape_stats(splits[0])
    section = dict(cfg["classifier"])
    augment_fraction = section.pop("augment_fraction", 0.2)
    mil_cfg = MilConfig(**section)
    steps = cfg["sample"]["steps"]

    def generate_fn(label, count, seed):
        req = SampleRequest(label=label, count=count, steps=steps, seed=seed)
        return generate_bags(req, stats, params)

    arms = run_protocol(splits, generate_fn, mil_cfg,
                        augment_fraction=augment_fraction)
    with open(out / "classifier_metrics.json", "w", encoding="utf-8") as fh:
        json.dump({arm: m.to_dict() for arm, m in arms.items()}, fh, indent=2)
    table = format_metrics_table(arms)
    (out / "classifier_table.txt").write_text(table + "\n", encoding="utf-8")
    _say(quiet, table)


_STAGE_FN = {
    "gen-toy": stage_gen_toy,
    "fit-pca": stage_fit_pca,
    "train": stage_train,
    "sample": stage_sample,
    "eval-fid": stage_eval_fid,
    "eval-nn": stage_eval_nn,
    "classify": stage_classify,
}


def _run_stage(name, cfg, out, quiet):
    try:
        _STAGE_FN[name](cfg, out, quiet)
    except Exception as exc:
        (out / f"{name}.failed").touch()
        raise RuntimeError(f"{name}: {exc}") from exc


def _write_summary(cfg, out):
    def read_json(name):
        path = out / name
        if not path.exists():
            return None
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)

    summary = {
        "config": cfg,
        "kernel_backend": kernels.BACKEND,
        "train": read_json("train_summary.json"),
        "fid_report": read_json("fid_report.json"),
        "nn_report": read_json("nn_report.json"),
        "classifier_metrics": read_json("classifier_metrics.json"),
    }
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    return summary


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="setflow",
        description="Generate, train on, and evaluate bags of embedding vectors.",
    )
    parser.add_argument("command", choices=STAGES + ("full-run",))
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON config; defaults are the shipped toy setup")
    parser.add_argument("--out", type=Path, required=True,
                        help="output directory (created if missing)")
    parser.add_argument("--seed", type=int, default=None,
                        help="master seed override; stage seeds re-derive from it")
    parser.add_argument("--quiet", action="store_true")
    args = parser.parse_args(argv)

    try:
        cfg = resolve_config(args.config, args.seed)
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "config.json", "w", encoding="utf-8") as fh:
            json.dump(cfg, fh, indent=2)
        if args.command == "full-run":
            for name in STAGES:
                _run_stage(name, cfg, out, args.quiet)
            _write_summary(cfg, out)
            _say(args.quiet, f"full-run: summary at {out / 'summary.json'}")
        else:
            _run_stage(args.command, cfg, out, args.quiet)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
