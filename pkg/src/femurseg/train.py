"""Training loops: ROI detector, branched network, adversarial fine-tuning.

Every stage writes a checkpoint after each epoch (generator parameters plus
optimizer state under ``opt/``, discriminator under ``disc/`` and progress
under ``meta/``) and a loss-history CSV next to it (``<checkpoint>.csv``).
A run started from a checkpoint of the same stage resumes at the stored
epoch and reproduces the uninterrupted run exactly.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import losses, nn, roi
from .autodiff import Tape, Tensor, backward, no_record, ops
from .errors import CheckpointError, ContractViolation, TrainingDivergenceError
from .losses import LossWeights, SoftArgmaxConfig
from .network import (BranchNetSpec, DiscriminatorSpec, discriminator_forward, forward,
                      init_discriminator, init_generator, pair_triple)
from .optim import Adam
from .phantom import AugmentRanges, augment_cases, load_split
from .pipeline import WINDOW, stack_samples, window_sample
from .seeding import stream

log = logging.getLogger(__name__)

STAGES = ("roi", "branch", "adversarial")
DEFAULT_EPOCHS = {"roi": 6, "branch": 16, "adversarial": 5}
ABLATIONS = ("brn", "brnd", "brndc", "brndc-d")
BASELINES = ("unet-s", "unet-l")
HISTORY_COLUMNS = ("epoch", "stage", "total", "wcross", "dsc", "hybrid", "reg", "cd",
                   "d_loss", "g_loss", "d_acc")
STAGE_CODE = {s: float(i) for i, s in enumerate(STAGES)}


@dataclass
class TrainConfig:
    manifest: str
    stage: str = "branch"
    epochs: Optional[int] = None
    batch_size: int = 2
    lr_g: float = 1e-3
    lr_d: float = 1e-4
    seed: int = 0
    checkpoint_in: Optional[str] = None
    checkpoint_out: Optional[str] = None
    weights: LossWeights = field(default_factory=LossWeights)
    soft_argmax: SoftArgmaxConfig = field(default_factory=SoftArgmaxConfig)
    ablation: str = "brndc-d"
    baseline: Optional[str] = None
    augment_copies: int = 0
    window: tuple = WINDOW
    train_limit: Optional[int] = None
    roi_slices_per_epoch: int = 256
    roi_batch: int = 16
    cd_warmup: int = 6

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ContractViolation(f"unknown stage {self.stage!r}")
        if self.epochs is None:
            self.epochs = DEFAULT_EPOCHS[self.stage]
        if self.epochs < 1:
            raise ContractViolation(f"epochs must be >= 1, got {self.epochs}")
        if self.cd_warmup < 0:
            raise ContractViolation(f"cd_warmup must be >= 0, got {self.cd_warmup}")
        if self.batch_size < 1 or self.roi_batch < 1:
            raise ContractViolation("batch sizes must be >= 1")
        if self.ablation not in ABLATIONS:
            raise ContractViolation(f"unknown ablation {self.ablation!r}")
        if self.baseline is not None and self.baseline not in BASELINES:
            raise ContractViolation(f"unknown baseline {self.baseline!r}")
        if self.stage == "adversarial" and not self.checkpoint_in:
            raise ContractViolation("adversarial fine-tuning needs a stage-1 checkpoint (checkpoint_in)")
        self.window = tuple(self.window)


def variant(config: TrainConfig) -> tuple:
    """``(BranchNetSpec, use_cd)`` for the configured ablation or baseline."""
    if config.baseline == "unet-s":
        return BranchNetSpec().sub_spec("seg"), False
    if config.baseline == "unet-l":
        return BranchNetSpec().sub_spec("loc"), False
    cross = config.ablation in ("brndc", "brndc-d")
    use_cd = config.ablation != "brn"
    return BranchNetSpec(cross_connections=cross), use_cd


@dataclass
class TrainResult:
    history: list
    checkpoint: Optional[Path]
    params: nn.NetworkParams
    spec: object


# --- history / checkpoint helpers ------------------------------------------

def history_path(checkpoint) -> Path:
    checkpoint = Path(checkpoint)
    return checkpoint.with_name(checkpoint.name + ".csv")


def write_history(rows: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r.get(k), float) else r.get(k, ""))
                        for k in HISTORY_COLUMNS})


def read_history(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            row = {"epoch": int(r["epoch"]), "stage": r["stage"]}
            row.update({k: float(v) for k, v in r.items() if k not in row and v != ""})
            rows.append(row)
    return rows


def _meta(stage: str, epoch: int) -> dict:
    return {"meta/stage": np.array([STAGE_CODE[stage]]), "meta/epoch": np.array([float(epoch)])}


def _save(path, params, opt, epoch, stage, disc=None, dopt=None, rows=None, meta=None) -> None:
    extra = dict(opt.state_arrays("opt/g/"))
    extra.update(_meta(stage, epoch))
    extra.update({f"meta/{k}": np.array([float(v)]) for k, v in (meta or {}).items()})
    if disc is not None:
        extra.update({f"disc/{k}": v for k, v in disc.state().items()})
        extra.update(dopt.state_arrays("opt/d/"))
    tmp = Path(str(path) + ".tmp")
    nn.save_checkpoint(params, tmp, extra)
    tmp.replace(path)
    if rows is not None:
        write_history(rows, history_path(path))


def _load_generator(path, spec):
    digest, arrays = nn.load_arrays(path, nn.spec_hash(spec))
    params = nn.params_from_arrays(digest, {k: v for k, v in arrays.items() if "/" not in k})
    return params, arrays


def _stage_of(arrays) -> Optional[str]:
    code = arrays.get("meta/stage")
    return None if code is None else STAGES[int(code[0])]


def _prior_rows(path, upto: int) -> list:
    hp = history_path(path)
    return [r for r in read_history(hp) if r["epoch"] < upto] if hp.exists() else []


def _finite(name: str, value) -> float:
    v = float(value.item() if isinstance(value, Tensor) else value)
    if not math.isfinite(v):
        raise TrainingDivergenceError(name, v)
    return v


def _check_outputs(*tensors) -> None:
    for t in tensors:
        if t is not None and not np.all(np.isfinite(t.data)):
            raise TrainingDivergenceError("network output")


def _epoch_means(stage: str, epoch: int, acc: dict, steps: int) -> dict:
    row = {"epoch": epoch, "stage": stage}
    row.update({k: v / steps for k, v in acc.items()})
    return row


# --- data -------------------------------------------------------------------

def load_training_samples(config: TrainConfig) -> list:
    cases = load_split(config.manifest, "train")
    if config.train_limit is not None:
        cases = cases[:config.train_limit]
    if not cases:
        raise ContractViolation(f"{config.manifest}: no training cases")
    if config.augment_copies:
        cases = augment_cases(cases, config.augment_copies, stream(config.seed, "augment"))
    return [window_sample(c, config.window) for c in cases]


def _batches(n: int, batch: int, seed: int, epoch: int) -> list:
    order = stream(seed, "shuffle", epoch).permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


# --- stage 1: branched network ------------------------------------------------

def epoch_weights(config: TrainConfig, epoch: int) -> LossWeights:
    """Loss weights in effect for a (global) epoch.

    The CD term is off for the first ``cd_warmup`` epochs: while both heatmaps
    are still flat their soft peaks coincide, and the 1/d^2 gradient then
    swamps the regression term and parks the peaks away from the endpoints.
    It is still computed and logged during warm-up.
    """
    if epoch < config.cd_warmup:
        return replace(config.weights, gamma=0.0)
    return config.weights


def _generator_step(params, spec, batch, use_cd, config, extra_loss=None, epoch: int = 0) -> tuple:
    image, mask, h1, h2 = batch
    weights = epoch_weights(config, epoch)
    with Tape() as tape:
        out = forward(params, spec, image, train=True)
        _check_outputs(out.seg_probs, *out.heatmaps)
        comps = losses.branch_components(out, mask, h1, h2, use_cd, config.soft_argmax, weights)
        vals = {k: _finite(k, v) for k, v in comps.items()}
        total = losses.branch_loss(comps, weights)
        if extra_loss is not None:
            adv, adv_vals = extra_loss(out)
            total = total + config.weights.lambda_adv * adv
            vals.update(adv_vals)
    vals["total"] = _finite("total", total)
    grads = backward(tape, total, params.trainable())
    return vals, grads, out


def train_branch(config: TrainConfig, samples: Optional[list] = None) -> TrainResult:
    """Stage 1: minimize the composite branch loss for ``config.epochs`` epochs."""
    if config.stage != "branch":
        config = replace(config, stage="branch")
    spec, use_cd = variant(config)
    start, rows = 0, []
    if config.checkpoint_in:
        params, arrays = _load_generator(config.checkpoint_in, spec)
        if _stage_of(arrays) != "branch":
            raise CheckpointError(f"{config.checkpoint_in}: not a stage-1 checkpoint")
        opt = Adam(params, config.lr_g)
        opt.load_state_arrays(arrays, "opt/g/")
        start = int(arrays["meta/epoch"][0])
        rows = _prior_rows(config.checkpoint_in, start)
    else:
        params = init_generator(spec, stream(config.seed, "init"))
        opt = Adam(params, config.lr_g)
    samples = samples if samples is not None else load_training_samples(config)
    out_path = Path(config.checkpoint_out) if config.checkpoint_out else None
    if out_path is not None and start == 0:
        _save(out_path, params, opt, 0, "branch", rows=rows)
    log.info("train-branch: %d samples, epochs %d..%d, spec %s", len(samples), start, config.epochs, spec)
    for epoch in range(start, config.epochs):
        acc, steps = {}, 0
        for idx in _batches(len(samples), config.batch_size, config.seed, epoch):
            vals, grads, _ = _generator_step(params, spec, stack_samples([samples[i] for i in idx]),
                                             use_cd, config, epoch=epoch)
            opt.step(grads)
            for k, v in vals.items():
                acc[k] = acc.get(k, 0.0) + v
            steps += 1
        rows.append(_epoch_means("branch", epoch, acc, steps))
        log.info("epoch %d %s", epoch, {k: round(v, 5) for k, v in rows[-1].items() if isinstance(v, float)})
        if out_path is not None:
            _save(out_path, params, opt, epoch + 1, "branch", rows=rows)
    return TrainResult(rows, out_path, params, spec)


# --- stage 2: adversarial fine-tuning -----------------------------------------

def _disc_accuracy(d_out: np.ndarray, n_real: int) -> float:
    pred = d_out.reshape(-1) > 0.5
    return float(np.mean(np.concatenate([pred[:n_real], ~pred[n_real:]])))


def finetune_adversarial(config: TrainConfig, samples: Optional[list] = None) -> TrainResult:
    """Stage 2: alternate one discriminator step and one generator step per batch.

    Starting from a stage-1 checkpoint the generator keeps its optimizer state
    and the epoch count continues, so ``lambda_adv = 0`` is exactly continued
    stage-1 training. ``config.epochs`` counts fine-tuning epochs.
    """
    if config.stage != "adversarial":
        config = replace(config, stage="adversarial")
    spec, use_cd = variant(config)
    dspec = DiscriminatorSpec()
    params, arrays = _load_generator(config.checkpoint_in, spec)
    opt = Adam(params, config.lr_g)
    opt.load_state_arrays(arrays, "opt/g/")
    stage = _stage_of(arrays)
    ckpt_epoch = int(arrays["meta/epoch"][0])
    if stage == "branch":
        base, done = ckpt_epoch, 0
        disc = init_discriminator(dspec, stream(config.seed, "init", 1))
        dopt = Adam(disc, config.lr_d)
        rows = _prior_rows(config.checkpoint_in, base)
    elif stage == "adversarial":
        base = int(arrays["meta/base_epoch"][0])
        done = ckpt_epoch - base
        disc = nn.params_from_arrays(nn.spec_hash(dspec), arrays, "disc/")
        dopt = Adam(disc, config.lr_d)
        dopt.load_state_arrays(arrays, "opt/d/")
        rows = _prior_rows(config.checkpoint_in, ckpt_epoch)
    else:
        raise CheckpointError(f"{config.checkpoint_in}: checkpoint has no training stage")
    samples = samples if samples is not None else load_training_samples(config)
    out_path = Path(config.checkpoint_out) if config.checkpoint_out else None

    def save(epoch):
        if out_path is None:
            return
        _save(out_path, params, opt, epoch, "adversarial", disc, dopt, rows, {"base_epoch": base})

    log.info("finetune-adv: %d samples, epochs %d..%d", len(samples), base + done, base + config.epochs)
    for epoch in range(base + done, base + config.epochs):
        acc, steps = {}, 0
        for idx in _batches(len(samples), config.batch_size, config.seed, epoch):
            batch = stack_samples([samples[i] for i in idx])
            image, mask, h1, h2 = batch
            n = len(idx)
            # discriminator step on [real; fake] so both halves share batch statistics
            with no_record():
                fake_out = forward(params, spec, image, train=False)
            real = np.concatenate([mask[:, None], h1, h2], axis=1).astype(np.float32)
            fake = pair_triple(fake_out.foreground(), fake_out.h1, fake_out.h2).data
            with Tape() as tape:
                d_out = discriminator_forward(disc, dspec, np.concatenate([real, fake]), train=True)
                d_loss, _ = losses.adversarial_losses(d_out[:n], d_out[n:])
            d_val = _finite("d_loss", d_loss)
            d_acc = _disc_accuracy(d_out.data, n)
            dopt.step(backward(tape, d_loss, disc.trainable()))

            def adv_term(out):
                triple = pair_triple(out.foreground(), out.h1, out.h2)
                both = ops.concat([Tensor(real), triple], axis=0)
                d_g = discriminator_forward(disc, dspec, both, train=True)
                _, g_loss = losses.adversarial_losses(d_g[:n], d_g[n:])
                return g_loss, {"g_loss": _finite("g_loss", g_loss)}

            vals, grads, _ = _generator_step(params, spec, batch, use_cd, config, adv_term, epoch)
            opt.step(grads)
            vals.update(d_loss=d_val, d_acc=d_acc)
            for k, v in vals.items():
                acc[k] = acc.get(k, 0.0) + v
            steps += 1
        rows.append(_epoch_means("adversarial", epoch, acc, steps))
        log.info("epoch %d %s", epoch, {k: round(v, 5) for k, v in rows[-1].items() if isinstance(v, float)})
        save(epoch + 1)
    return TrainResult(rows, out_path, params, spec)


# --- ROI detector -----------------------------------------------------------------

def roi_slices(cases) -> tuple:
    """All z-slices ``(S, 1, X, Y)`` of the given cases with their binary masks ``(S, X, Y)``."""
    images = np.concatenate([np.moveaxis(c.image.data, 2, 0) for c in cases])[:, None]
    masks = np.concatenate([np.moveaxis(c.mask.data, 2, 0) for c in cases])
    return images.astype(np.float32), (masks > 0.5).astype(np.float32)


def _two_class(prob: Tensor) -> Tensor:
    return ops.concat_channels([1.0 - prob, prob])


def train_roi(config: TrainConfig, cases: Optional[list] = None) -> TrainResult:
    """Train the slice-wise 2D U-net on a fresh random subset of slices each epoch."""
    if config.stage != "roi":
        config = replace(config, stage="roi")
    spec = roi.UNet2DSpec()
    start, rows = 0, []
    if config.checkpoint_in:
        digest, arrays = nn.load_arrays(config.checkpoint_in, nn.spec_hash(spec))
        if _stage_of(arrays) != "roi":
            raise CheckpointError(f"{config.checkpoint_in}: not a ROI checkpoint")
        params = nn.params_from_arrays(digest, {k: v for k, v in arrays.items() if "/" not in k})
        opt = Adam(params, config.lr_g)
        opt.load_state_arrays(arrays, "opt/g/")
        start = int(arrays["meta/epoch"][0])
        rows = _prior_rows(config.checkpoint_in, start)
    else:
        params = roi.init_unet2d(spec, stream(config.seed, "init"))
        opt = Adam(params, config.lr_g)
    if cases is None:
        cases = load_split(config.manifest, "train")
        if config.train_limit is not None:
            cases = cases[:config.train_limit]
    images, masks = roi_slices(cases)
    out_path = Path(config.checkpoint_out) if config.checkpoint_out else None
    if out_path is not None and start == 0:
        _save(out_path, params, opt, 0, "roi", rows=rows)
    per_epoch = min(config.roi_slices_per_epoch, len(images))
    log.info("train-roi: %d slices, %d per epoch, epochs %d..%d", len(images), per_epoch, start, config.epochs)
    for epoch in range(start, config.epochs):
        pick = stream(config.seed, "shuffle", epoch).permutation(len(images))[:per_epoch]
        acc, steps = {}, 0
        for lo in range(0, per_epoch, config.roi_batch):
            idx = pick[lo:lo + config.roi_batch]
            with Tape() as tape:
                prob = roi.unet2d_forward(params, spec, images[idx], train=True)
                _check_outputs(prob)
                wcross, dsc = losses.hybrid_components(_two_class(prob), masks[idx])
                total = wcross + config.weights.theta * dsc
            vals = {"wcross": _finite("wcross", wcross), "dsc": _finite("dsc", dsc)}
            vals["hybrid"] = vals["total"] = _finite("total", total)
            opt.step(backward(tape, total, params.trainable()))
            for k, v in vals.items():
                acc[k] = acc.get(k, 0.0) + v
            steps += 1
        rows.append(_epoch_means("roi", epoch, acc, steps))
        log.info("epoch %d %s", epoch, {k: round(v, 5) for k, v in rows[-1].items() if isinstance(v, float)})
        if out_path is not None:
            _save(out_path, params, opt, epoch + 1, "roi", rows=rows)
    return TrainResult(rows, out_path, params, spec)


def run(config: TrainConfig) -> TrainResult:
    stage_fn = {"roi": train_roi, "branch": train_branch, "adversarial": finetune_adversarial}
    return stage_fn[config.stage](config)
