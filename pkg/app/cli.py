#!/usr/bin/env python3
"""
Command-line entry point.

Usage:
    $ python -m app.cli gen-data --preset source-a --out data/source.fsds
    $ python -m app.cli pretrain --config lab.cfg --out models/desk.ftm
    $ python -m app.cli intensity --config lab.cfg --out intensity.csv
    $ python -m app.cli run --config lab.cfg --out runs/lp ft.mode=LP
    $ python -m app.cli grid --config lab.cfg --out runs/grid ft.mode=LP,FT tta.v=1,32
    $ python -m app.cli compare runs/lp/results.csv runs/ft/results.csv

Overrides are `key=value` or `--key value` tokens after the flags; they win
over the config file. Exit codes: 0 success, 1 config error, 2 runtime error.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from pydantic import ValidationError

from app.config import LOG_LEVEL, RunConfig, build_run_config, expand_grid, load_raw, parse_overrides
from app.errors import ConfigError, LabError
from app.network import load_checkpoint, save_checkpoint
from app.schemas import SynthConfig
from app.services.evaluate import compare_reports
from app.services.experiment import execute_run
from app.services.finetune import diversity, pretrain
from app.services.intensity import draw_subset, expand_policies, extractor_id, intensity
from app.utils.datasets import generate_synthetic, load_dataset, save_dataset, synth_preset
from app.utils.reporting import INTENSITY_COLUMNS, canonical_json, fmt6, write_csv, write_json
from app.utils.rng import rng_new

logger = logging.getLogger("fewshot_lab.cli")

# ─── Short flags per command ───────────────────────────────────────────────
SHORT_KEYS: Dict[str, Dict[str, str]] = {
    "pretrain": {"epochs": "pretrain.epochs", "seed": "run.seed", "data": "data.source"},
    "intensity": {"seed": "run.seed", "checkpoint": "model.checkpoint", "data": "data.source"},
    "run": {"seed": "run.seed", "workers": "run.workers", "episodes": "run.episodes"},
    "grid": {"seed": "run.seed", "workers": "run.workers", "episodes": "run.episodes"},
}


def _resolve(command: str, overrides: Dict[str, str]) -> Dict[str, str]:
    out = {}
    for key, value in overrides.items():
        if "." not in key:
            if key not in SHORT_KEYS.get(command, {}):
                raise ConfigError(f"unknown option --{key} for {command}")
            key = SHORT_KEYS[command][key]
        out[key] = value
    return out


def _raw_config(args, extra: Sequence[str]) -> Dict[str, str]:
    raw = load_raw(args.config)
    raw.update(_resolve(args.command, parse_overrides(list(extra))))
    return raw


def _run_config(args, extra: Sequence[str]) -> RunConfig:
    return build_run_config(_raw_config(args, extra))


# ─── Commands ──────────────────────────────────────────────────────────────
def cmd_gen_data(args, extra: Sequence[str]) -> int:
    cfg = synth_preset(args.preset)
    fields = {}
    for key, value in parse_overrides(list(extra)).items():
        if not key.startswith("synth."):
            raise ConfigError(f"gen-data accepts synth.<field> overrides only, got {key}")
        fields[key[len("synth.") :]] = value
    if fields:
        merged = cfg.model_dump()
        for name, value in fields.items():
            if name not in merged:
                raise ConfigError(f"unknown synth field '{name}'")
            merged[name] = value.split(",") if isinstance(merged[name], tuple) else value
        cfg = SynthConfig.model_validate(merged)
    ds = generate_synthetic(cfg, rng_new(args.seed).fork("data").fork(cfg.name))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    print(f"wrote {out}: {ds.n_classes} classes, {len(ds)} images ({cfg.image_size}x{cfg.image_size})")
    return 0


def cmd_pretrain(args, extra: Sequence[str]) -> int:
    cfg = _run_config(args, extra)
    cfg.require_files("data.source")
    source = load_dataset(cfg.data_source)
    extractor, head, trace = pretrain(
        source, cfg.pretrain_config(), cfg.network_config(), rng_new(cfg.run_seed).fork("pretrain")
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, extractor, head)
    if trace.epochs:
        print(f"wrote {out}: final loss {fmt6(trace.losses[-1])}, train accuracy {fmt6(trace.accuracies[-1])}")
    else:
        print(f"wrote {out}: untrained initialisation")
    return 0


def cmd_intensity(args, extra: Sequence[str]) -> int:
    cfg = _run_config(args, extra)
    cfg.require_files("model.checkpoint", "data.source")
    extractor, _ = load_checkpoint(cfg.model_checkpoint, input_size=cfg.model_input_size)
    ext_id = extractor_id(cfg.model_checkpoint)
    icfg = cfg.intensity_config()
    subset = draw_subset(load_dataset(cfg.data_source), icfg)
    root = rng_new(cfg.run_seed).fork("intensity")

    rows = []
    for policy in expand_policies(list(cfg.intensity_policies), cfg.intensity_preset, list(cfg.intensity_mix_modes)):
        label = f"{policy.kind.value}:{policy.preset.value}:{policy.mix_mode.value}"
        report = intensity(policy, extractor, subset, icfg, root.fork(label), ext_id=ext_id, seed=cfg.run_seed)
        row = report.model_dump()
        if cfg.intensity_diversity:
            row["diversity"] = diversity(
                policy, subset, extractor, cfg.finetune_config(), root.fork("diversity").fork(label)
            )
        rows.append(row)

    columns = INTENSITY_COLUMNS + (["diversity"] if cfg.intensity_diversity else [])
    if args.out:
        write_csv(args.out, columns, rows)
        print(f"wrote {args.out}: {len(rows)} rows")
    else:
        print(",".join(columns))
        for row in rows:
            print(",".join(fmt6(row.get(c)) for c in columns))
    return 0


def cmd_run(args, extra: Sequence[str]) -> int:
    cfg = _run_config(args, extra)
    report = execute_run(cfg, Path(args.out))
    print(f"{report.episodes} episodes: mean {fmt6(report.mean)} ± {fmt6(report.ci95)} -> {args.out}")
    return 0


def cmd_grid(args, extra: Sequence[str]) -> int:
    raw = _raw_config(args, extra)
    runs = expand_grid(raw)
    configs = [(slug, build_run_config(sub)) for slug, sub in runs]  # validate all before any work
    out = Path(args.out)
    index: List[Dict[str, object]] = []
    for i, (slug, cfg) in enumerate(configs, 1):
        logger.info(f"grid run {i}/{len(configs)}: {slug}")
        report = execute_run(cfg, out / slug)
        index.append({"run": slug, "E": report.episodes, "mean": report.mean, "ci95": report.ci95})
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "index.json", {"runs": index})
    print(f"{len(index)} runs -> {out / 'index.json'}")
    return 0


def cmd_compare(args, extra: Sequence[str]) -> int:
    result = compare_reports(args.a, args.b)
    if args.out:
        write_json(args.out, result)
    print(canonical_json(result))
    return 0


# ─── Parser ────────────────────────────────────────────────────────────────
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewshot-lab", description="Few-shot fine-tuning laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="Write a synthetic FSDS dataset")
    p.add_argument("--preset", required=True, help="source-a, target-shifted or target-near")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    for name, func, help_text, out_required in (
        ("pretrain", cmd_pretrain, "Pre-train the extractor on source data", True),
        ("intensity", cmd_intensity, "Measure augmentation intensity", False),
        ("run", cmd_run, "Run an episodic experiment", True),
        ("grid", cmd_grid, "Run one experiment per grid combination", True),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key = value run config")
        p.add_argument("--out", required=out_required)
        p.set_defaults(func=func)

    p = sub.add_parser("compare", help="Paired accuracy difference between two result CSVs")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=LOG_LEVEL, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        return args.func(args, extra)
    except (ConfigError, ValidationError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (LabError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
