"""Command-line front end.

Every command accepts ``--config FILE`` with flat ``key = value`` lines (``#``
starts a comment; keys are option names with ``-`` or ``_``). Values given on
the command line win over the file, which wins over built-in defaults. Unknown
keys are rejected. The resolved configuration is logged and, for commands
with an output directory, written to ``<out>/<command>.config.json``.

Failures exit non-zero and print one JSON line on stderr:
``{"error": <kind>, "exit_code": <n>, "message": <text>}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, metrics, nn, pipeline, roi
from .errors import (ArchitectureChangedError, CheckpointError, ContractViolation, FemurNotFoundError,
                     FemurSegError, ManifestError, TrainingDivergenceError, VolumeIOError)
from .losses import LossWeights
from .network import LandmarkPair
from .phantom import PhantomParams, generate_dataset, load_case, load_manifest
from .train import ABLATIONS, BASELINES, TrainConfig, run, variant
from .volume import Volume, read_volume, write_volume

log = logging.getLogger("femurseg")

EXIT_CODES = {
    "usage": 2,
    "config": 3,
    "manifest": 4,
    "checkpoint_missing": 5,
    "architecture_changed": 6,
    "femur_not_found": 7,
    "training_diverged": 8,
    "volume_io": 9,
    "contract": 10,
    "internal": 1,
}


class ConfigError(FemurSegError):
    pass


class UsageError(FemurSegError):
    pass


def _error_kind(exc: BaseException) -> str:
    for cls, kind in ((UsageError, "usage"), (ConfigError, "config"), (ManifestError, "manifest"),
                      (ArchitectureChangedError, "architecture_changed"),
                      (CheckpointError, "checkpoint_missing"), (FemurNotFoundError, "femur_not_found"),
                      (TrainingDivergenceError, "training_diverged"), (VolumeIOError, "volume_io"),
                      (ContractViolation, "contract")):
        if isinstance(exc, cls):
            return kind
    return "internal"


# --- arguments and configuration --------------------------------------------

COMMON_DEFAULTS = {"seed": 0, "out": "out", "log_level": "INFO"}
DEFAULTS = {
    "gen-data": {"count": 30, "test_count": 20, "extents": 64},
    "train-roi": {"manifest": None, "checkpoint": None, "epochs": None, "roi_slices": 256, "lr": 1e-3},
    "train-branch": {"manifest": None, "checkpoint": None, "epochs": None, "ablation": "brndc-d",
                     "baseline": None, "augment_copies": 0, "batch_size": 2, "lr": 1e-3},
    "finetune-adv": {"manifest": None, "checkpoint": None, "epochs": None, "ablation": "brndc-d",
                     "baseline": None, "augment_copies": 0, "batch_size": 2, "lr": 1e-3, "lr_d": 1e-4,
                     "lambda_adv": LossWeights().lambda_adv},
    "infer": {"manifest": None, "split": "test", "roi_checkpoint": None, "checkpoint": None,
              "ablation": "brndc-d", "baseline": None, "use_gt_roi": False},
    "evaluate": {"manifest": None, "split": "test", "predictions": None},
    "report": {"report": None},
}


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(kind):
    def conv(text):
        return None if str(text).strip().lower() in ("", "none") else kind(text)
    return conv


TYPES = {"seed": int, "count": int, "test_count": int, "extents": int, "epochs": _optional(int),
         "roi_slices": int, "lr": float, "lr_d": float, "lambda_adv": float, "augment_copies": int,
         "batch_size": int, "use_gt_roi": _bool, "baseline": _optional(str),
         "checkpoint": _optional(str), "roi_checkpoint": _optional(str)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="femurseg", description="Phantom femur segmentation pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, argument_default=S)
        p.add_argument("--config", help="flat key = value file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--log-level", dest="log_level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
        return p

    p = command("gen-data", "write a phantom dataset and manifest")
    p.add_argument("--count", type=int, help="training cases")
    p.add_argument("--test-count", dest="test_count", type=int)
    p.add_argument("--extents", type=int, help="cube edge in voxels")

    def training(p):
        p.add_argument("--manifest")
        p.add_argument("--checkpoint", help="checkpoint to resume (or stage-1 input for finetune-adv)")
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)

    def variant_flags(p):
        p.add_argument("--ablation", choices=ABLATIONS)
        p.add_argument("--baseline", choices=BASELINES)

    p = command("train-roi", "train the slice-wise ROI detector")
    training(p)
    p.add_argument("--roi-slices", dest="roi_slices", type=int, help="slices sampled per epoch")

    for name, text in (("train-branch", "stage 1: branched network"),
                       ("finetune-adv", "stage 2: adversarial fine-tuning")):
        p = command(name, text)
        training(p)
        variant_flags(p)
        p.add_argument("--augment-copies", dest="augment_copies", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        if name == "finetune-adv":
            p.add_argument("--lr-d", dest="lr_d", type=float)
            p.add_argument("--lambda-adv", dest="lambda_adv", type=float)

    p = command("infer", "predict masks, heatmaps and endpoints")
    p.add_argument("--manifest")
    p.add_argument("--split")
    p.add_argument("--roi-checkpoint", dest="roi_checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--use-gt-roi", dest="use_gt_roi", action="store_const", const=True,
                   help="skip detection and use the ground-truth femur box")
    variant_flags(p)

    p = command("evaluate", "score predictions against ground truth")
    p.add_argument("--manifest")
    p.add_argument("--split")
    p.add_argument("--predictions", help="directory written by infer")

    p = command("report", "render a metrics report as a text table")
    p.add_argument("--report", help="report.json written by evaluate")
    return parser


def read_config_file(path) -> dict:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve(command: str, cli: dict) -> dict:
    """Merge defaults, config file and command-line values (in rising precedence)."""
    known = {**COMMON_DEFAULTS, **DEFAULTS[command]}
    resolved = dict(known)
    if cli.get("config"):
        for key, value in read_config_file(cli["config"]).items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r} for {command}")
            try:
                resolved[key] = TYPES.get(key, str)(value)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from exc
    for key, value in cli.items():
        if key not in ("config", "command"):
            resolved[key] = value
    if resolved.get("ablation") not in (None, *ABLATIONS):
        raise ConfigError(f"unknown ablation {resolved['ablation']!r}")
    if resolved.get("baseline") not in (None, *BASELINES):
        raise ConfigError(f"unknown baseline {resolved['baseline']!r}")
    return resolved


def _require(cfg: dict, *keys) -> None:
    for k in keys:
        if not cfg.get(k):
            raise UsageError(f"--{k.replace('_', '-')} is required")


def _require_file(path, what: str, error=CheckpointError) -> Path:
    p = Path(path)
    if not p.is_file():
        raise error(f"{what} not found: {p}")
    return p


def _check_manifest(cfg) -> Path:
    _require(cfg, "manifest")
    path = _require_file(cfg["manifest"], "manifest", ManifestError)
    load_manifest(path)
    return path


# --- commands ----------------------------------------------------------------

def cmd_gen_data(cfg, out: Path) -> dict:
    n = cfg["extents"]
    params = PhantomParams(extents=(n, n, n))
    params.validate()
    path = generate_dataset(params, cfg["count"], cfg["test_count"], out, seed=cfg["seed"])
    return {"manifest": str(path)}


def _train_config(cfg, stage: str, out: Path) -> TrainConfig:
    weights = LossWeights(lambda_adv=cfg.get("lambda_adv", LossWeights().lambda_adv))
    return TrainConfig(manifest=cfg["manifest"], stage=stage, epochs=cfg.get("epochs"),
                       batch_size=cfg.get("batch_size", 2), lr_g=cfg["lr"], lr_d=cfg.get("lr_d", 1e-4),
                       seed=cfg["seed"], checkpoint_in=cfg.get("checkpoint"),
                       checkpoint_out=str(out / f"{stage}.ck"), weights=weights,
                       ablation=cfg.get("ablation", "brndc-d"), baseline=cfg.get("baseline"),
                       augment_copies=cfg.get("augment_copies", 0),
                       roi_slices_per_epoch=cfg.get("roi_slices", 256))


def _cmd_train(stage: str):
    def cmd(cfg, out: Path) -> dict:
        _check_manifest(cfg)
        if stage == "adversarial":
            _require(cfg, "checkpoint")
        if cfg.get("checkpoint"):
            _require_file(cfg["checkpoint"], "checkpoint")
        result = run(_train_config(cfg, stage, out))
        last = result.history[-1] if result.history else {}
        return {"checkpoint": str(result.checkpoint), "epochs": len(result.history),
                "final_total": last.get("total")}
    return cmd


def _net_spec(cfg):
    probe = TrainConfig(manifest="", ablation=cfg.get("ablation", "brndc-d"), baseline=cfg.get("baseline"))
    return variant(probe)[0]


def cmd_infer(cfg, out: Path) -> dict:
    manifest = _check_manifest(cfg)
    _require(cfg, "checkpoint")
    spec = _net_spec(cfg)
    net = nn.load_checkpoint(_require_file(cfg["checkpoint"], "checkpoint"), nn.spec_hash(spec))
    roi_params, roi_spec = None, roi.UNet2DSpec()
    if not cfg["use_gt_roi"]:
        _require(cfg, "roi_checkpoint")
        roi_params = nn.load_checkpoint(_require_file(cfg["roi_checkpoint"], "ROI checkpoint"),
                                        nn.spec_hash(roi_spec))
    written = []
    for entry in load_manifest(manifest):
        if entry["split"] != cfg["split"]:
            continue
        case = load_case(entry, manifest.parent)
        if roi_params is None:
            tight = roi.mask_box(case.mask.data)
        else:
            tight, _, _ = roi.detect_roi(roi_params, roi_spec, case.image)
        pred = pipeline.predict(net, spec, case.image, tight)
        cid = entry["id"]
        write_volume(pred.mask, out / f"{cid}_mask.fnv")
        for k, h in enumerate(pred.heatmaps, 1):
            write_volume(h, out / f"{cid}_h{k}.fnv")
        doc = {"id": cid, "roi": {"tight": tight.to_dict(), "padded": pred.padded.to_dict()},
               "landmarks": pred.landmarks.to_dict() if pred.landmarks else None}
        (out / f"{cid}_endpoints.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        written.append(cid)
        log.info("infer %s: %d voxels", cid, int(pred.mask.data.sum()))
    (out / "predictions.json").write_text(json.dumps({"split": cfg["split"], "cases": written}, indent=1) + "\n")
    return {"cases": len(written)}


def _gt_marks(entry, spacing) -> LandmarkPair:
    return LandmarkPair(tuple(entry["p1"]), tuple(entry["p2"]), spacing)


def cmd_evaluate(cfg, out: Path) -> dict:
    manifest = _check_manifest(cfg)
    _require(cfg, "predictions")
    pred_dir = Path(cfg["predictions"])
    records, padded_iou = [], []
    for entry in load_manifest(manifest):
        if entry["split"] != cfg["split"]:
            continue
        cid = entry["id"]
        gt = read_volume(manifest.parent / entry["mask"])
        pred = read_volume(_require_file(pred_dir / f"{cid}_mask.fnv", "prediction", VolumeIOError))
        doc_path = pred_dir / f"{cid}_endpoints.json"
        doc = json.loads(doc_path.read_text()) if doc_path.is_file() else {}
        marks, iou = None, None
        if doc.get("landmarks"):
            lm = doc["landmarks"]
            marks = LandmarkPair(tuple(lm["p1"]), tuple(lm["p2"]), gt.spacing)
        if doc.get("roi"):
            gt_tight = roi.mask_box(gt.data)
            tight = roi.Box3(**{k: tuple(v) for k, v in doc["roi"]["tight"].items()})
            padded = roi.Box3(**{k: tuple(v) for k, v in doc["roi"]["padded"].items()})
            iou = roi.box_iou(tight, gt_tight)
            padded_iou.append(roi.box_iou(padded, gt_tight.padded(roi.ROI_PAD, gt.extents)))
        records.append(metrics.case_metrics(cid, pred.data, gt.data, gt.spacing, marks,
                                            _gt_marks(entry, gt.spacing), iou))
    if not records:
        raise ManifestError(f"{manifest}: no cases in split {cfg['split']!r}")
    extra = {"split": cfg["split"]}
    if padded_iou:
        extra["roi_padded_iou_mean"] = float(np.mean(padded_iou))
    report = metrics.MetricsReport(records, extra)
    paths = report.write(out)
    agg = report.aggregates
    return {"report": str(paths["json"]), "dsc_mean": agg["dsc"]["mean"]}


def render_report(doc: dict) -> str:
    lines = [f"cases: {len(doc['cases'])}", "", "| metric | mean | sd |", "|---|---|---|"]
    for k, v in doc["aggregates"].items():
        lines.append(f"| {k} | {v['mean']:.4f} | {v['sd']:.4f} |")
    for name, ba in doc.get("bland_altman", {}).items():
        lines.append("")
        lines.append(f"Bland-Altman {name}: mean diff {ba['mean_diff']:.4f}, sd {ba['sd_diff']:.4f}, "
                     f"limits [{ba['lower']:.4f}, {ba['upper']:.4f}], within {ba['fraction_within']:.2f}")
    return "\n".join(lines) + "\n"


def cmd_report(cfg, out: Path) -> dict:
    _require(cfg, "report")
    path = _require_file(cfg["report"], "report", ConfigError)
    text = render_report(json.loads(path.read_text()))
    (out / "report.md").write_text(text)
    sys.stdout.write(text)
    return {"table": str(out / "report.md")}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-roi": _cmd_train("roi"),
    "train-branch": _cmd_train("branch"),
    "finetune-adv": _cmd_train("adversarial"),
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    cli = vars(ns)
    command = cli.pop("command")
    try:
        cfg = resolve(command, cli)
        logging.basicConfig(level=cfg["log_level"], format="%(levelname)s %(name)s: %(message)s",
                            stream=sys.stderr, force=True)
        log.info("resolved config: %s", json.dumps(cfg, sort_keys=True))
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{command}.config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")
        summary = COMMANDS[command](cfg, out)
    except (FemurSegError, OSError) as exc:
        kind = _error_kind(exc) if isinstance(exc, FemurSegError) else "volume_io"
        code = EXIT_CODES[kind]
        msg = " ".join(str(exc).split())
        sys.stderr.write(json.dumps({"error": kind, "exit_code": code, "message": msg}) + "\n")
        return code
    log.info("done: %s", json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
