"""Per-case preprocessing and training-time augmentation.

Preprocessing crops exactly-zero border planes and z-scores the nonzero
intensities per channel. Training augmentation applies, in fixed order:
additive Gaussian noise (channels only), a 90-degree rotation, a 180-degree
rotation, and an axis flip, each gated by its own probability and applied
identically to masks where geometric.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyVolumeError, PatchError, ZeroVarianceError
from .phantom import PhantomVolume, RegionMasks

__all__ = [
    "AugmentConfig",
    "PatchSpec",
    "PipelineConfig",
    "crop_zero_planes",
    "zscore_nonzero",
    "prepare_case",
    "sample_patch",
    "augment",
]


@dataclass(frozen=True)
class AugmentConfig:
    noise_mu: float = 0.0
    noise_sigma: float = 0.1
    noise_p: float = 0.2
    rotate_p: float = 0.5  # applied independently for the 90 and 180 degree turns
    flip_p: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("noise_p", "rotate_p", "flip_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")


@dataclass(frozen=True)
class PatchSpec:
    """Cubic training patch extent."""

    size: int = 32

    def __post_init__(self):
        if self.size < 8:
            raise ValueError("patch size must be >= 8")


@dataclass(frozen=True)
class PipelineConfig:
    patch: PatchSpec = field(default_factory=PatchSpec)
    augment: AugmentConfig = field(default_factory=AugmentConfig)


def _zero_plane_bounds(nonzero: np.ndarray) -> list[slice]:
    slices = []
    for ax in range(3):
        others = tuple(a for a in range(3) if a != ax)
        idx = np.where(nonzero.any(axis=others))[0]
        slices.append(slice(int(idx[0]), int(idx[-1]) + 1))
    return slices


def crop_zero_planes(vol: PhantomVolume, masks: RegionMasks) -> tuple[PhantomVolume, RegionMasks]:
    """Drop leading/trailing planes that are zero across all channels.

    The same window is applied to the masks. Idempotent.
    """
    nonzero = np.any(vol.channels != 0, axis=0)
    if not nonzero.any():
        raise EmptyVolumeError(f"case {vol.case_id}: volume is entirely zero")
    sl = _zero_plane_bounds(nonzero)
    window = (slice(None), sl[0], sl[1], sl[2])
    cropped = PhantomVolume(vol.channels[window], vol.case_id, vol.site_id)
    mask_window = (sl[0], sl[1], sl[2])
    return cropped, RegionMasks(
        et=masks.et[mask_window], tc=masks.tc[mask_window], wt=masks.wt[mask_window]
    )


def zscore_nonzero(vol: PhantomVolume) -> PhantomVolume:
    """Per channel: standardize nonzero voxels to mean 0, population std 1.

    Zero voxels stay exactly zero.
    """
    out = np.zeros_like(vol.channels)
    for c in range(vol.channels.shape[0]):
        ch = vol.channels[c]
        mask = ch != 0
        vals = ch[mask]
        if vals.size < 2:
            raise ZeroVarianceError(f"case {vol.case_id} channel {c}: fewer than 2 nonzero voxels")
        mu = vals.mean()
        sd = vals.std()
        if sd == 0.0:
            raise ZeroVarianceError(f"case {vol.case_id} channel {c}: zero variance")
        out[c][mask] = (vals - mu) / sd
    return PhantomVolume(out, vol.case_id, vol.site_id)


def prepare_case(vol: PhantomVolume, masks: RegionMasks) -> tuple[PhantomVolume, RegionMasks]:
    """crop_zero_planes followed by zscore_nonzero."""
    vol, masks = crop_zero_planes(vol, masks)
    return zscore_nonzero(vol), masks


def sample_patch(
    vol: PhantomVolume,
    masks: RegionMasks,
    spec: PatchSpec,
    rng: np.random.Generator,
) -> tuple[PhantomVolume, RegionMasks]:
    """Cut one uniformly random cubic patch, identically from channels and masks."""
    p = spec.size
    dims = vol.dims
    if any(p > d for d in dims):
        raise PatchError(f"patch {p} does not fit inside dims {dims}")
    corner = [int(rng.integers(0, d - p + 1)) for d in dims]
    sl = tuple(slice(c, c + p) for c in corner)
    window = (slice(None),) + sl
    return (
        PhantomVolume(vol.channels[window], vol.case_id, vol.site_id),
        RegionMasks(et=masks.et[sl], tc=masks.tc[sl], wt=masks.wt[sl]),
    )


def augment(
    vol: PhantomVolume,
    masks: RegionMasks,
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> tuple[PhantomVolume, RegionMasks]:
    """Noise then rot90 then rot180 then flip, each gated by its probability.

    Random draws happen in that fixed order; a step's parameters are drawn
    only when the step fires. Noise touches channels only; all geometric ops
    hit channels and masks identically. Requires a cubic patch.
    """
    dims = vol.dims
    if not (dims[0] == dims[1] == dims[2]):
        raise PatchError(f"augmentation requires a cubic patch, got {dims}")
    channels = vol.channels
    region_arrays = [masks.et, masks.tc, masks.wt]

    if rng.random() < cfg.noise_p:
        channels = channels + rng.normal(cfg.noise_mu, cfg.noise_sigma, size=channels.shape)

    planes = [(0, 1), (0, 2), (1, 2)]
    for k, gate in ((1, cfg.rotate_p), (2, cfg.rotate_p)):
        if rng.random() < gate:
            plane = planes[int(rng.integers(0, 3))]
            ch_plane = (plane[0] + 1, plane[1] + 1)
            channels = np.rot90(channels, k=k, axes=ch_plane)
            region_arrays = [np.rot90(m, k=k, axes=plane) for m in region_arrays]

    if rng.random() < cfg.flip_p:
        ax = int(rng.integers(0, 3))
        channels = np.flip(channels, axis=ax + 1)
        region_arrays = [np.flip(m, axis=ax) for m in region_arrays]

    out_vol = PhantomVolume(np.ascontiguousarray(channels), vol.case_id, vol.site_id)
    out_masks = RegionMasks(
        et=np.ascontiguousarray(region_arrays[0]),
        tc=np.ascontiguousarray(region_arrays[1]),
        wt=np.ascontiguousarray(region_arrays[2]),
    )
    return out_vol, out_masks
