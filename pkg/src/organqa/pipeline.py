"""Training, inaccuracy scoring, labeling, explanation maps and evaluation."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
from scipy import ndimage

from .config import UseCaseConfig
from .corrupt import corrupt_mask, derive_seed
from .geomstats import GaussianModel, extract_features, fit_gaussian, mahalanobis_score
from .metrics import (
    METRICS,
    ScoredCase,
    UndefinedMetricError,
    bootstrap_ci,
    dice,
    mean_dice_loss,
)
from .nets import VarAutoEncoder, vae_loss
from .neural import Adam, save_checkpoint, soft_dice_loss
from .voxelgrid import (
    BoundingBox,
    MultiChannelVolume,
    VoxelMask,
    crop_about_foreground_com,
    flip_axis,
    pad_or_crop_center,
    resample_nearest,
)

log = logging.getLogger(__name__)

RawCase = Union[Mapping[str, VoxelMask], MultiChannelVolume]


# ---------------------------------------------------------------------------
# preprocessing and training pairs


def _as_organ_dict(raw: RawCase) -> dict:
    if isinstance(raw, MultiChannelVolume):
        return {name: raw.channel(i) for i, name in enumerate(raw.channels)}
    return dict(raw)


def preprocess_case(raw: RawCase, cfg: UseCaseConfig) -> MultiChannelVolume:
    """Resample, center-pad/crop, optionally crop about the foreground, stack.

    Organs missing from ``raw`` become empty channels (logged as warnings).
    """
    organs = _as_organ_dict(raw)
    channels = []
    for organ in cfg.organs:
        mask = organs.get(organ)
        if mask is None:
            log.warning("organ %s missing from case; using an empty channel", organ)
            channels.append(VoxelMask.zeros(cfg.size, cfg.spacing))
            continue
        if mask.spacing != cfg.spacing:
            mask = resample_nearest(mask, cfg.spacing)
        if mask.dims != cfg.size:
            mask = pad_or_crop_center(mask, cfg.size)
        channels.append(mask)
    vol = MultiChannelVolume.from_masks(cfg.organs, channels)
    if cfg.crop_size is not None:
        vol = crop_about_foreground_com(vol, cfg.crop_size)
    return vol


def make_training_pair(gt: MultiChannelVolume, cfg: UseCaseConfig, seed: int):
    """Corrupt every channel with its organ's noise spec; empty channels stay empty."""
    if not gt.is_binary():
        raise ValueError("training targets must be binary")
    noisy = []
    for c, organ in enumerate(gt.channels):
        mask = gt.channel(c)
        if mask.is_empty():
            noisy.append(mask)
        else:
            noisy.append(corrupt_mask(mask, cfg.noise[organ], derive_seed(seed, c)))
    return MultiChannelVolume.from_masks(gt.channels, noisy), gt


def augment_with_flips(cases: Sequence[MultiChannelVolume], cfg: UseCaseConfig) -> list[MultiChannelVolume]:
    """Append each case mirrored across the mid-sagittal plane with paired organs swapped."""
    pairs = [p for p in cfg.flip_pairs if p[0] in cases[0].channels] if cases else []
    return list(cases) + [flip_axis(c, cfg.flip_axis, pairs) for c in cases]


def _to_tensor(vols: Sequence[MultiChannelVolume]) -> torch.Tensor:
    return torch.from_numpy(np.stack([v.values for v in vols]).astype(np.float32))


# ---------------------------------------------------------------------------
# training


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    checkpointed: bool


@dataclass
class TrainResult:
    log: list
    best_val: float
    best_epoch: int
    best_state: "OrderedDict[str, torch.Tensor]"
    checkpoints_written: int = 0


def _batch_loss(model, x, y, generator=None, noise=None):
    if isinstance(model, VarAutoEncoder):
        logits, mean, logvar = model(x, noise=noise, generator=generator)
        return vae_loss(logits, y, mean, logvar, model.spec.kl_weight)
    return soft_dice_loss(model(x), y)


def _uses_noise(model) -> bool:
    # Autoencoders reconstruct clean masks; only the denoiser sees corrupted inputs.
    return not isinstance(model, VarAutoEncoder)


def validation_loss(model, pairs, batch_size: int) -> float:
    model.eval()
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start:start + batch_size]
            x = _to_tensor([p[0] for p in chunk])
            y = _to_tensor([p[1] for p in chunk])
            total += float(_batch_loss(model, x, y)) * len(chunk)
    return total / len(pairs)


def write_training_log(records: Sequence[EpochRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "checkpointed"])
        for r in records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), int(r.checkpointed)])


def train(model: nn.Module, train_set: Sequence[MultiChannelVolume], val_set: Sequence[MultiChannelVolume],
          cfg: UseCaseConfig, out_dir=None, name: str = "model", progress=None) -> TrainResult:
    """Adam on the soft Dice loss with lowest-validation-loss checkpointing.

    Training inputs are re-corrupted every epoch; validation inputs are
    corrupted once with fixed seeds. Training stops at ``max_epochs`` or once
    ``patience`` consecutive epochs fail to improve the validation loss.
    Writes ``<name>.daew`` and ``<name>_log.csv`` under ``out_dir`` if given.
    """
    tc = cfg.train
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be nonempty")
    if tc.flip_augment:
        train_set = augment_with_flips(train_set, cfg)
    noisy = _uses_noise(model)
    val_pairs = [
        make_training_pair(v, cfg, derive_seed(tc.seed, 1, i)) if noisy else (v, v)
        for i, v in enumerate(val_set)
    ]
    params = list(model.parameters())
    opt = Adam(params, lr=tc.lr)
    ckpt_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_path = os.path.join(out_dir, f"{name}.daew")
    records = []
    best_val, best_epoch, best_state = math.inf, -1, None
    written, stale = 0, 0
    for epoch in range(tc.max_epochs):
        model.train()
        order = np.random.default_rng(derive_seed(tc.seed, 0, epoch)).permutation(len(train_set))
        total = 0.0
        for b, start in enumerate(range(0, len(order), tc.batch_size)):
            idx = order[start:start + tc.batch_size]
            pairs = [
                make_training_pair(train_set[i], cfg, derive_seed(tc.seed, 2, epoch, int(i))) if noisy
                else (train_set[i], train_set[i])
                for i in idx
            ]
            x = _to_tensor([p[0] for p in pairs])
            y = _to_tensor([p[1] for p in pairs])
            gen = torch.Generator().manual_seed(derive_seed(tc.seed, 3, epoch, b) % (1 << 63))
            loss = _batch_loss(model, x, y, generator=gen)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}, batch {b}")
            opt.step(loss)
            total += loss.item() * len(idx)
        train_loss = total / len(order)
        val = validation_loss(model, val_pairs, tc.batch_size)
        if not math.isfinite(val):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        improved = val < best_val
        if improved:
            best_val, best_epoch, stale = val, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
            if ckpt_path is not None:
                save_checkpoint(best_state, ckpt_path)
            written += 1
        else:
            stale += 1
        records.append(EpochRecord(epoch, train_loss, val, improved))
        if progress is not None:
            progress(records[-1])
        if not improved and stale >= tc.patience:
            break
    if out_dir is not None:
        write_training_log(records, os.path.join(out_dir, f"{name}_log.csv"))
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(records, best_val, best_epoch, best_state, written)


# ---------------------------------------------------------------------------
# scoring


@dataclass
class CaseScore:
    scores: dict
    reconstruction: MultiChannelVolume
    preprocessed: MultiChannelVolume


def _binarize(probs: np.ndarray) -> np.ndarray:
    return (probs >= 0.5).astype(np.uint8)


def _reconstruction_scores(pre: MultiChannelVolume, recon: np.ndarray, probs: Optional[np.ndarray] = None) -> dict:
    if probs is not None:
        # soft variant: Dice loss against the sigmoid probabilities, per channel
        return {organ: mean_dice_loss(probs[c:c + 1], pre.values[c:c + 1]) for c, organ in enumerate(pre.channels)}
    return {organ: 1.0 - dice(pre.values[c], recon[c]) for c, organ in enumerate(pre.channels)}


def _check_model_dims(model, pre: MultiChannelVolume):
    spec = model.spec
    expected = spec.in_channels
    if pre.n_channels != expected:
        raise ValueError(f"model expects {expected} channels, case has {pre.n_channels}")
    if any(d % spec.downsampling for d in pre.dims):
        raise ValueError(f"case dims {pre.dims} do not fit the model's total stride {spec.downsampling}")


def reconstruct(model: nn.Module, vol: MultiChannelVolume, mode: str = "mean", seed: int = 0) -> np.ndarray:
    """Sigmoid probabilities of the model's reconstruction, shape ``(C, nx, ny, nz)``."""
    _check_model_dims(model, vol)
    model.eval()
    x = _to_tensor([vol])
    with torch.no_grad():
        if isinstance(model, VarAutoEncoder):
            noise = None
            if mode == "sample":
                g = torch.Generator().manual_seed(int(seed) % (1 << 63))
                noise = torch.randn((1, model.spec.latent_size), generator=g)
            elif mode != "mean":
                raise ValueError(f"unknown VAE scoring mode {mode!r}")
            logits = model(x, noise=noise)[0]
        else:
            logits = model(x)
    return torch.sigmoid(logits)[0].numpy()


def score_dae(model: nn.Module, case: RawCase, cfg: UseCaseConfig, soft: bool = False) -> CaseScore:
    """Per-organ ``1 - dice(auto-seg, binarized reconstruction)``.

    With ``soft=True`` the score is the soft Dice loss against the sigmoid
    probabilities instead. The returned reconstruction is binarized either way.
    """
    pre = preprocess_case(case, cfg)
    probs = reconstruct(model, pre)
    recon = _binarize(probs)
    scores = _reconstruction_scores(pre, recon, probs if soft else None)
    return CaseScore(scores, MultiChannelVolume(pre.channels, recon, pre.spacing), pre)


def score_vae(models, case: RawCase, cfg: UseCaseConfig, mode: str = "mean", seed: int = 0) -> CaseScore:
    """Score through a multi-organ VAE, or a dict of single-organ VAEs keyed by organ."""
    pre = preprocess_case(case, cfg)
    if isinstance(models, Mapping):
        recon = np.empty_like(pre.values)
        for c, organ in enumerate(pre.channels):
            single = MultiChannelVolume((organ,), pre.values[c:c + 1], pre.spacing)
            recon[c] = _binarize(reconstruct(models[organ], single, mode, derive_seed(seed, c)))[0]
    else:
        recon = _binarize(reconstruct(models, pre, mode, seed))
    return CaseScore(_reconstruction_scores(pre, recon), MultiChannelVolume(pre.channels, recon, pre.spacing), pre)


def fit_statistical(cases: Sequence[MultiChannelVolume], cfg: UseCaseConfig) -> dict:
    """One Gaussian per organ over preprocessed ground-truth cases."""
    models = {}
    for organ in cfg.organs:
        feats = [extract_features(c, organ) for c in cases if not c.channel(organ).is_empty()]
        models[organ] = fit_gaussian(feats, organ)
    return models


def score_statistical(models: Mapping[str, GaussianModel], case: RawCase, cfg: UseCaseConfig) -> dict:
    """Mahalanobis distance per organ; an empty organ scores +inf."""
    pre = preprocess_case(case, cfg)
    scores = {}
    for organ in cfg.organs:
        if pre.channel(organ).is_empty():
            log.warning("organ %s is empty; scoring it as maximally inaccurate", organ)
            scores[organ] = math.inf
        else:
            scores[organ] = mahalanobis_score(models[organ], extract_features(pre, organ))
    return scores


def save_gaussian_models(models: Mapping[str, GaussianModel], path) -> None:
    with open(path, "w") as fh:
        fh.write("\n\n".join(m.to_text() for m in models.values()) + "\n")


def load_gaussian_models(path) -> dict:
    with open(path) as fh:
        blocks = [b for b in fh.read().split("\n\n") if b.strip()]
    models = [GaussianModel.from_text(b) for b in blocks]
    return {m.organ: m for m in models}


# ---------------------------------------------------------------------------
# labels and reports


class UnknownOrganError(KeyError):
    pass


def label_cases(cases: Sequence[ScoredCase], thresholds: Mapping[str, float]) -> list[ScoredCase]:
    """Label 1 (inaccurate) iff ``true_dice`` is strictly below the organ threshold."""
    out = []
    for c in cases:
        if c.organ not in thresholds:
            raise UnknownOrganError(c.organ)
        if c.true_dice is None:
            raise ValueError(f"case {c.case_id}/{c.organ} has no true Dice")
        out.append(ScoredCase(c.case_id, c.organ, c.score, int(c.true_dice < thresholds[c.organ]), c.true_dice))
    return out


@dataclass
class InaccuracyReport:
    method: str
    cases: list = field(default_factory=list)

    def add(self, case_id: str, scores: Mapping[str, float], true_dice: Optional[Mapping[str, float]] = None):
        for organ, s in scores.items():
            if not s >= 0:
                raise ValueError(f"inaccuracy score must be >= 0, got {s} for {organ}")
            td = None if true_dice is None else true_dice.get(organ)
            self.cases.append(ScoredCase(case_id, organ, float(s), None, td))


# ---------------------------------------------------------------------------
# explanation


class Explanation:
    """Four-way voxel labels: 0 neither, 1 both, 2 auto only, 3 reconstruction only."""

    BOTH_BACKGROUND, BOTH_FOREGROUND, AUTO_ONLY, RECON_ONLY = 0, 1, 2, 3

    def __init__(self, labels: np.ndarray, components: list):
        self.labels = labels
        self.components = components

    @property
    def counts(self) -> dict:
        return {k: int(np.count_nonzero(self.labels == k)) for k in range(4)}

    def component_count(self, kind: Optional[int] = None) -> int:
        return sum(1 for c in self.components if kind is None or c.kind == kind)

    def summary(self) -> dict:
        return {
            "counts": {name: self.counts[k] for k, name in enumerate(
                ("both_background", "both_foreground", "auto_only", "recon_only"))},
            "components": [
                {"kind": "auto_only" if c.kind == 2 else "recon_only", "voxels": c.size,
                 "lo": list(c.bbox.lo), "hi": list(c.bbox.hi)}
                for c in self.components
            ],
        }


@dataclass
class Component:
    kind: int
    bbox: BoundingBox
    size: int


_FACE_NEIGHBORS = ndimage.generate_binary_structure(3, 1)


def explain(auto: VoxelMask, recon: VoxelMask) -> Explanation:
    """Disagreement map between an auto-segmentation and its reconstruction.

    Connected components (6-connectivity) are found separately for the
    auto-only and reconstruction-only regions.
    """
    a, r = auto.data.astype(bool), recon.data.astype(bool)
    if a.shape != r.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {r.shape}")
    labels = np.zeros(a.shape, np.uint8)
    labels[a & r] = 1
    labels[a & ~r] = 2
    labels[~a & r] = 3
    components = []
    for kind in (2, 3):
        lab, n = ndimage.label(labels == kind, structure=_FACE_NEIGHBORS)
        for i, sl in enumerate(ndimage.find_objects(lab), start=1):
            size = int(np.count_nonzero(lab[sl] == i))
            box = BoundingBox(tuple(s.start for s in sl), tuple(s.stop - 1 for s in sl))
            components.append(Component(kind, box, size))
    return Explanation(labels, components)


def explanation_volume(explanations: Mapping[str, Explanation], spacing) -> MultiChannelVolume:
    names = tuple(f"explain:{organ}" for organ in explanations)
    return MultiChannelVolume(names, np.stack([e.labels for e in explanations.values()]), spacing)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalRow:
    organ: str
    method: str
    metric: str
    point: float
    lo: float
    hi: float
    n_cases: int
    pct_inaccurate: float
    status: str = "ok"


EVAL_FIELDS = ("organ", "method", "metric", "point", "lo", "hi", "n_cases", "pct_inaccurate", "status")


def evaluate(reports: Sequence[InaccuracyReport], resamples: int = 1000, seed: int = 0) -> list[EvalRow]:
    """AUROC and AUPR with bootstrap intervals per (organ, method).

    Cases must already carry labels. Organs with a single class get rows with
    status ``undefined`` and NaN values.
    """
    rows = []
    for report in reports:
        organs = list(OrderedDict.fromkeys(c.organ for c in report.cases))
        for organ in organs:
            cases = [c for c in report.cases if c.organ == organ]
            if any(c.label is None for c in cases):
                raise ValueError(f"unlabeled cases for {organ} in {report.method}")
            pct = 100.0 * sum(c.label for c in cases) / len(cases)
            for metric in METRICS:
                try:
                    r = bootstrap_ci(cases, metric, resamples, derive_seed(seed))
                    rows.append(EvalRow(organ, report.method, metric, r.point, r.lo, r.hi, len(cases), pct))
                except UndefinedMetricError:
                    nan = float("nan")
                    rows.append(EvalRow(organ, report.method, metric, nan, nan, nan, len(cases), pct, "undefined"))
    return rows


def write_eval_csv(rows: Sequence[EvalRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_FIELDS)
        for r in rows:
            w.writerow([r.organ, r.method, r.metric, repr(r.point), repr(r.lo), repr(r.hi),
                        r.n_cases, repr(r.pct_inaccurate), r.status])


def eval_summary(rows: Sequence[EvalRow]) -> dict:
    """JSON-ready summary: per-organ inaccurate percentage and per-method metrics."""
    out: dict = {"organs": {}, "undefined": []}
    for r in rows:
        organ = out["organs"].setdefault(r.organ, {"pct_inaccurate": r.pct_inaccurate, "n_cases": r.n_cases,
                                                   "methods": {}})
        entry = organ["methods"].setdefault(r.method, {})
        if r.status == "ok":
            entry[r.metric] = {"point": r.point, "lo": r.lo, "hi": r.hi}
        else:
            entry[r.metric] = None
            out["undefined"].append({"organ": r.organ, "method": r.method, "metric": r.metric})
    return out


def write_eval_json(rows: Sequence[EvalRow], path) -> None:
    with open(path, "w") as fh:
        json.dump(eval_summary(rows), fh, indent=2, sort_keys=True)
        fh.write("\n")
