"""Command-line orchestration of the full workflow.

Subcommands mirror the pipeline stages: ``synth`` writes a CSIR1 dataset
directory, ``preprocess`` turns it into a sample store, ``train`` fits
the generation-0 extractor, ``distill`` runs the born-again lineage,
``metatest``/``baseline`` evaluate a frozen extractor on a target task,
and ``report`` aggregates task reports into CSV/JSON tables.

One JSON config file can describe an entire experiment, keyed by section
(``synth``, ``preprocess``, ``train``, ``distill``, ``metatest``,
``report``) plus a global ``seed`` that fans out to any section without
its own. Command-line flags override config values. Exit code 0 on
success; 2 with a single ``ERROR: <category>: <detail>`` line on any
configuration or validation problem.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import convnet, distill, evaluation, fewshot, preprocess, synth
from .csidata import load_manifest
from .errors import ConfigError, DasecountError
from .seeding import derive_seed

log = logging.getLogger("dasecount")

KNOWN_SECTIONS = {"seed", "paths", "synth", "preprocess", "train", "distill", "metatest", "report"}


def apply_thread_cap():
    """Honor DASECOUNT_THREADS (0 or unset = torch default)."""
    raw = os.environ.get("DASECOUNT_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DASECOUNT_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError("DASECOUNT_THREADS must be >= 0")
    if n > 0:
        import torch

        torch.set_num_threads(n)


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError("file not found" if str(p) else "empty path")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{p} must contain a JSON object")
    unknown = set(doc) - KNOWN_SECTIONS
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    return doc


def build_dataclass(cls, data: dict, section: str):
    """Construct a config dataclass, rejecting unknown keys."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {sorted(unknown)}")
    return cls(**data)


def section_seed(config: dict, section: dict, name: str, flag_value=None) -> int:
    """Fan the global seed out to a section unless overridden."""
    if flag_value is not None:
        return flag_value
    if "seed" in section and section["seed"] is not None:
        return int(section["seed"])
    return derive_seed(int(config.get("seed", 0)), name)


def _generation_spec(config: dict) -> synth.GenerationSpec:
    section = dict(config.get("synth") or {})
    if not section.get("scenarios"):
        raise ConfigError("synth config needs a non-empty 'scenarios' list")
    known = {
        "scenarios", "motion", "impairments", "motion_types", "crowd_counts",
        "duration_frames", "seed",
    }
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in 'synth': {sorted(unknown)}")
    scenes = tuple(
        build_dataclass(synth.SceneConfig, s, "synth.scenarios") for s in section["scenarios"]
    )
    motion = build_dataclass(synth.CrowdMotionConfig, section.get("motion", {}), "synth.motion")
    impair = build_dataclass(
        synth.ImpairmentConfig, section.get("impairments", {}), "synth.impairments"
    )
    base_seed = section_seed(config, section, "synth")
    return synth.GenerationSpec(
        scenes=scenes,
        motion=motion,
        impairments=impair,
        motion_types=tuple(section.get("motion_types", [m.value for m in synth.MotionType])),
        crowd_counts=tuple(section.get("crowd_counts", range(9))),
        duration_frames=int(section.get("duration_frames", 3150)),
        base_seed=base_seed,
    )


def cmd_synth(args) -> int:
    config = load_config(args.config)
    spec = _generation_spec(config)
    manifest = synth.generate_dataset(spec, args.out)
    log.info("wrote %d recordings to %s", len(manifest), args.out)
    print(f"synth: {len(manifest)} recordings -> {args.out}")
    return 0


def cmd_preprocess(args) -> int:
    config = load_config(args.config)
    section = dict(config.get("preprocess") or {})
    if args.tw is not None:
        section["tw"] = args.tw
    if args.ts is not None:
        section["ts"] = args.ts
    cfg = build_dataclass(preprocess.SegmentationConfig, section, "preprocess")
    manifest = load_manifest(args.input)
    store = preprocess.preprocess_dataset(manifest, cfg)
    preprocess.save_store(store, args.out, ts=cfg.ts)
    print(f"preprocess: {len(store)} samples ({store.num_classes} classes) -> {args.out}")
    return 0


def _train_config(config: dict, args) -> convnet.TrainConfig:
    section = dict(config.get("train") or {})
    overrides = {
        "epochs": args.epochs,
        "batch_size": args.batch,
        "learning_rate": args.lr,
    }
    for key, value in overrides.items():
        if value is not None:
            section[key] = value
    section["seed"] = section_seed(config, section, "train", args.seed)
    return build_dataclass(convnet.TrainConfig, section, "train")


def cmd_train(args) -> int:
    config = load_config(args.config)
    cfg = _train_config(config, args)
    store = preprocess.load_store(args.input)
    extractor, curves = convnet.train_extractor(store, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    convnet.save_checkpoint(extractor, out / "gen0.ckpt", train_config=cfg)
    curves_doc = {
        name: {
            "train_loss": c.train_loss,
            "train_acc": c.train_acc,
            "val_acc": c.val_acc,
            "final_val_acc": c.final_val_acc,
        }
        for name, c in curves.items()
    }
    (out / "curves.json").write_text(json.dumps(curves_doc, indent=2) + "\n")
    print(
        "train: val accuracy amp={:.4f} phd={:.4f} -> {}".format(
            curves["amp"].final_val_acc, curves["phd"].final_val_acc, out / "gen0.ckpt"
        )
    )
    return 0


def cmd_distill(args) -> int:
    config = load_config(args.config)
    section = dict(config.get("distill") or {})
    overrides = {
        "generations": args.generations,
        "alpha": args.alpha,
        "epochs": args.epochs,
        "batch_size": args.batch,
        "learning_rate": args.lr,
        "weight_decay": args.weight_decay,
    }
    for key, value in overrides.items():
        if value is not None:
            section[key] = value
    section["seed"] = section_seed(config, section, "distill", args.seed)
    cfg = build_dataclass(distill.DistillConfig, section, "distill")

    extractor, meta = convnet.load_checkpoint(args.teacher)
    store = preprocess.load_store(args.input)
    # reuse the teacher's stratified split so validation never leaks
    split_seed = (meta.get("train_config") or {}).get("seed", cfg.seed)
    lineage = distill.distill_lineage(extractor, store, cfg, split_seed=split_seed)
    distill.save_lineage(lineage, args.out)
    print(
        f"distill: {len(lineage.models)} generations, chosen gen {lineage.chosen} "
        f"(combined val {lineage.val_accuracy[lineage.chosen]['combined']:.4f}) -> {args.out}"
    )
    return 0


def _parse_task(raw: str):
    if ":" not in raw:
        raise ConfigError(f"task must look like 'scenario:motion', got {raw!r}")
    scenario, motion = raw.split(":", 1)
    return scenario, motion


def _protocol(config: dict, args) -> evaluation.Protocol:
    section = dict(config.get("metatest") or {})
    clf_section = dict(section.pop("classifier", {}) or {})
    if isinstance(clf_section, str):  # allow "classifier": "lr"
        clf_section = {"kind": clf_section}
    overrides = {
        "shots": args.shots,
        "queries_per_class": getattr(args, "queries", None),
        "repeats": args.repeats,
        "tap": args.tap,
        "modality": args.modality,
    }
    for key, value in overrides.items():
        if value is not None:
            section[key] = value
    if args.classifier is not None:
        clf_section["kind"] = args.classifier
    section["seed"] = section_seed(config, section, "metatest", args.seed)
    clf = build_dataclass(fewshot.ClassifierConfig, clf_section, "metatest.classifier")
    section["classifier"] = clf
    return build_dataclass(evaluation.Protocol, section, "metatest")


def cmd_metatest(args) -> int:
    config = load_config(args.config)
    protocol = _protocol(config, args)
    extractor, _ = convnet.load_checkpoint(args.model)
    store = preprocess.load_store(args.target)
    task = _parse_task(args.task)
    report = evaluation.run_metatest(extractor, store, task, protocol)
    path = evaluation.save_task_report(report, args.out)
    print(f"metatest: {args.task} mean acc {report.mean_accuracy:.4f} -> {path}")
    return 0


def cmd_baseline(args) -> int:
    config = load_config(args.config)
    protocol = _protocol(config, args)
    extractor, _ = convnet.load_checkpoint(args.model)
    store = preprocess.load_store(args.target)
    task = _parse_task(args.task)
    report = evaluation.run_baseline(args.kind, extractor, store, task, protocol)
    path = evaluation.save_task_report(report, args.out)
    print(f"baseline[{args.kind}]: {args.task} mean acc {report.mean_accuracy:.4f} -> {path}")
    return 0


def cmd_report(args) -> int:
    config = load_config(args.config)
    section = dict(config.get("report") or {})
    formats = args.format if args.format is not None else section.get("format", "csv,json")
    formats = [f.strip() for f in formats.split(",") if f.strip()]
    unknown = set(formats) - {"csv", "json"}
    if unknown:
        raise ConfigError(f"unknown report format(s): {sorted(unknown)}")
    reports = evaluation.load_task_reports(args.input)
    written = evaluation.emit_report(reports, args.out, formats=formats)
    print(f"report: {len(reports)} task reports -> {len(written)} files in {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dasecount",
        description="Cross-domain WiFi CSI crowd counting pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic CSIR1 dataset")
    p.add_argument("--config", required=True, help="experiment JSON with a 'synth' section")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="segment and preprocess a dataset")
    p.add_argument("--in", dest="input", required=True, help="CSIR1 dataset directory")
    p.add_argument("--out", required=True, help="output sample-store directory")
    p.add_argument("--tw", type=int, help="window length in frames")
    p.add_argument("--ts", type=int, help="window stride in frames")
    p.add_argument("--config")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train the generation-0 feature extractor")
    p.add_argument("--in", dest="input", required=True, help="sample-store directory")
    p.add_argument("--out", required=True, help="output directory for gen0.ckpt")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", help="born-again distillation lineage")
    p.add_argument("--teacher", required=True, help="generation-0 checkpoint")
    p.add_argument("--in", dest="input", required=True, help="sample-store directory")
    p.add_argument("--out", required=True, help="lineage output directory")
    p.add_argument("--generations", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_distill)

    for name in ("metatest", "baseline"):
        p = sub.add_parser(name, help=f"{name} a frozen extractor on a target task")
        if name == "baseline":
            p.add_argument(
                "--kind", required=True,
                choices=[k.value for k in evaluation.BaselineKind],
            )
        p.add_argument("--model", required=True, help="extractor checkpoint")
        p.add_argument("--target", required=True, help="target sample-store directory")
        p.add_argument("--task", required=True, help="task id as 'scenario:motion'")
        p.add_argument("--shots", type=int)
        p.add_argument("--queries", type=int)
        p.add_argument("--repeats", type=int)
        p.add_argument("--tap", choices=["fc", "cnn1", "cnn2"])
        p.add_argument("--modality", choices=["amp", "phd", "both"])
        p.add_argument("--classifier", choices=["lr", "svm", "nn"])
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help="task-report output directory")
        p.add_argument("--config")
        p.set_defaults(func=cmd_metatest if name == "metatest" else cmd_baseline)

    p = sub.add_parser("report", help="aggregate task reports into tables")
    p.add_argument("--in", dest="input", required=True, help="directory of report_*.json")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", help="comma-separated: csv,json")
    p.add_argument("--config")
    p.set_defaults(func=cmd_report)
    return parser


def dispatch(argv) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        apply_thread_cap()
        return args.func(args)
    except DasecountError as exc:
        print(f"ERROR: {exc.category}: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"ERROR: io: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
