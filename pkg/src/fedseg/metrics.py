"""Dice similarity, the mirrored training loss, and case evaluation.

The overlap measure is 2*||a (.) b||_1 / (||a||_1 + ||b||_1) over nonnegative
tensors, with the 0/0 case defined as perfect agreement (1.0). Training uses
the floating-point form on sigmoid probabilities; evaluation binarizes at 0.5
first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidMaskError, PatchError, ShapeMismatchError
from .phantom import PhantomVolume, RegionMasks
from .pipeline import prepare_case

__all__ = [
    "REGIONS",
    "DscReport",
    "Prediction",
    "dsc",
    "mirrored_dice_loss",
    "predict_volume",
    "evaluate_case",
    "CASE_CSV_HEADER",
]

REGIONS = ("et", "tc", "wt")

CASE_CSV_HEADER = ("run_id", "round", "site_id", "case_id", "dsc_et", "dsc_tc", "dsc_wt", "dsc_avg")


def dsc(rl, pm) -> float:
    """Spatial overlap of a reference and a prediction (binary or floating)."""
    a = np.asarray(rl, dtype=np.float64)
    b = np.asarray(pm, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(a.shape, b.shape, "dsc")
    if a.size and (a.min() < 0 or b.min() < 0):
        raise InvalidMaskError("dsc inputs must be nonnegative")
    den = float(a.sum() + b.sum())
    if den == 0.0:
        return 1.0
    return 2.0 * float((a * b).sum()) / den


@dataclass(frozen=True)
class DscReport:
    """Per-region overlap scores plus their plain mean."""

    et: float
    tc: float
    wt: float
    average: float

    def __post_init__(self):
        if self.average != (self.et + self.tc + self.wt) / 3:
            raise ValueError("average must equal (et + tc + wt) / 3")

    @classmethod
    def from_regions(cls, et: float, tc: float, wt: float) -> "DscReport":
        et, tc, wt = float(et), float(tc), float(wt)
        return cls(et=et, tc=tc, wt=wt, average=(et + tc + wt) / 3)

    def region(self, name: str) -> float:
        return getattr(self, name)

    def as_dict(self) -> dict:
        return {"et": self.et, "tc": self.tc, "wt": self.wt, "average": self.average}


def mean_report(reports) -> DscReport:
    reports = list(reports)
    if not reports:
        raise ValueError("mean_report of zero reports")
    return DscReport.from_regions(
        et=float(np.mean([r.et for r in reports])),
        tc=float(np.mean([r.tc for r in reports])),
        wt=float(np.mean([r.wt for r in reports])),
    )


@dataclass(frozen=True)
class Prediction:
    """Floating per-region probabilities and their 0.5-threshold binarization.

    The thresholded channels are independent and need not nest, unlike
    reference RegionMasks.
    """

    probs: np.ndarray  # [3, D, H, W] in (0, 1)
    binarized: np.ndarray  # bool [3, D, H, W]; 1 iff probs >= 0.5

    @classmethod
    def from_probs(cls, probs: np.ndarray) -> "Prediction":
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 4 or probs.shape[0] != 3:
            raise ShapeMismatchError("(3, D, H, W)", probs.shape, "Prediction")
        return cls(probs=probs, binarized=probs >= 0.5)

    def region(self, name: str) -> np.ndarray:
        return self.binarized[REGIONS.index(name)]


def _region_stack(masks: RegionMasks) -> np.ndarray:
    return np.stack([masks.et, masks.tc, masks.wt]).astype(np.float64)


def mirrored_dice_loss(
    rl_masks: RegionMasks, probs: np.ndarray, mode: str = "mirrored"
) -> tuple[float, np.ndarray]:
    """Overlap loss on each region and (by default) its complement.

    Per region r the loss is 1 - (dsc(m_r, p_r) + dsc(1-m_r, 1-p_r)) / 2 in
    ``mirrored`` mode, or 1 - dsc(1-m_r, 1-p_r) in ``complement`` mode; the
    total is the mean over the three regions. Returns the loss and its exact
    gradient with respect to the probabilities.
    """
    if mode not in ("mirrored", "complement"):
        raise ValueError(f"unknown loss mode {mode!r}")
    p = np.asarray(probs, dtype=np.float64)
    m = _region_stack(rl_masks)
    if p.shape != m.shape:
        raise ShapeMismatchError(m.shape, p.shape, "mirrored_dice_loss")
    if p.min() <= 0.0 or p.max() >= 1.0:
        raise InvalidMaskError("probabilities must lie strictly inside (0, 1)")

    grad = np.empty_like(p)
    losses = []
    for r in range(3):
        mr, pr = m[r], p[r]
        num_f = 2.0 * float((mr * pr).sum())
        den_f = float(mr.sum() + pr.sum())
        d_f = num_f / den_f
        mc, pc = 1.0 - mr, 1.0 - pr
        num_b = 2.0 * float((mc * pc).sum())
        den_b = float(mc.sum() + pc.sum())
        d_b = num_b / den_b
        # d(d_f)/dp = (2 m - d_f) / den_f ; d(d_b)/dp = (d_b - 2 (1-m)) / den_b
        if mode == "mirrored":
            losses.append(1.0 - 0.5 * (d_f + d_b))
            grad[r] = -0.5 * ((2.0 * mr - d_f) / den_f + (d_b - 2.0 * mc) / den_b)
        else:
            losses.append(1.0 - d_b)
            grad[r] = -(d_b - 2.0 * mc) / den_b
    grad /= 3.0
    return float(np.mean(losses)), grad


def predict_volume(net, vol: PhantomVolume, patch_size: int) -> Prediction:
    """Full-volume inference by tiling cubic windows and averaging overlaps."""
    from . import model  # local import; model depends on this module for the loss

    dims = vol.dims
    p = int(patch_size)
    if any(p > d for d in dims):
        raise PatchError(f"inference window {p} exceeds volume dims {dims}")

    def corners(extent: int) -> list[int]:
        cs = list(range(0, extent - p + 1, p))
        if cs[-1] != extent - p:
            cs.append(extent - p)
        return cs

    prob_sum = np.zeros((3,) + tuple(dims))
    counts = np.zeros(dims)
    for cd in corners(dims[0]):
        for ch in corners(dims[1]):
            for cw in corners(dims[2]):
                sl = (slice(cd, cd + p), slice(ch, ch + p), slice(cw, cw + p))
                window = vol.channels[(slice(None),) + sl]
                out = model.forward(net, window)
                prob_sum[(slice(None),) + sl] += out
                counts[sl] += 1.0
    return Prediction.from_probs(prob_sum / counts)


def evaluate_case(
    net, vol: PhantomVolume, masks: RegionMasks, patch_size: int, preprocess: bool = True
) -> DscReport:
    """Binary per-region overlap of a model against one case's reference masks."""
    if preprocess:
        vol, masks = prepare_case(vol, masks)
    pred = predict_volume(net, vol, patch_size)
    scores = [
        dsc(masks.region(name).astype(np.float64), pred.region(name).astype(np.float64))
        for name in REGIONS
    ]
    return DscReport.from_regions(*scores)
