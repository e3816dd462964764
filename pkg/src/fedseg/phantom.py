"""Synthetic multi-channel 3D cases with nested tumor sub-compartments.

Each case is a 4-channel intensity volume (T1/T1Gd/T2/FLAIR stand-ins) plus
three nested binary region masks: enhancing core (et), tumor core (tc) and
whole lesion (wt). Sites differ by an affine per-channel intensity transform
and a noise level, mimicking acquisition heterogeneity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyDatasetError, ShapeMismatchError
from .seeding import derive_rng

__all__ = [
    "CHANNEL_NAMES",
    "SiteProfile",
    "PhantomVolume",
    "RegionMasks",
    "generate_case",
    "split_site",
]

CHANNEL_NAMES = ("t1", "t1gd", "t2", "flair")

# Tissue intensity per channel: columns are (brain, edema, necrosis, enhancing).
# Channel 1 (T1Gd stand-in) lights up the enhancing core; channel 3 (FLAIR
# stand-in) lights up the whole lesion envelope.
_BASE_LEVELS = np.array(
    [
        [1.00, 0.90, 0.70, 0.80],
        [1.00, 0.90, 0.60, 1.80],
        [1.00, 1.30, 1.50, 1.20],
        [1.00, 1.70, 1.40, 1.30],
    ]
)

_BRAIN_MARGIN = 2.0  # zero border planes around the tissue ellipsoid


@dataclass(frozen=True)
class SiteProfile:
    """Acquisition profile of one collaborating site."""

    site_id: str
    n_cases: int
    intensity_shift: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    intensity_gain: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_cases < 1:
            raise ValueError("n_cases must be >= 1")
        if len(self.intensity_shift) != 4 or len(self.intensity_gain) != 4:
            raise ValueError("intensity_shift/intensity_gain need one entry per channel")
        if any(g <= 0 for g in self.intensity_gain):
            raise ValueError("intensity_gain must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")


@dataclass(frozen=True)
class PhantomVolume:
    """4-channel intensity volume standing in for one mpMRI case."""

    channels: np.ndarray  # [4, D, H, W] float64
    case_id: str
    site_id: str

    def __post_init__(self):
        ch = np.ascontiguousarray(np.asarray(self.channels, dtype=np.float64))
        if ch.ndim != 4 or ch.shape[0] != 4:
            raise ShapeMismatchError("(4, D, H, W)", ch.shape, "PhantomVolume")
        if min(ch.shape[1:]) < 8:
            raise ValueError(f"spatial dims must be >= 8, got {ch.shape[1:]}")
        ch.setflags(write=False)
        object.__setattr__(self, "channels", ch)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.channels.shape[1:]


@dataclass(frozen=True)
class RegionMasks:
    """Nested binary masks: et (enhancing) <= tc (core) <= wt (whole lesion)."""

    et: np.ndarray
    tc: np.ndarray
    wt: np.ndarray

    def __post_init__(self):
        arrs = {}
        for name in ("et", "tc", "wt"):
            m = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=bool))
            m.setflags(write=False)
            arrs[name] = m
            object.__setattr__(self, name, m)
        if not (arrs["et"].shape == arrs["tc"].shape == arrs["wt"].shape):
            raise ShapeMismatchError(arrs["et"].shape, arrs["tc"].shape, "RegionMasks")
        if np.any(arrs["et"] & ~arrs["tc"]) or np.any(arrs["tc"] & ~arrs["wt"]):
            raise ValueError("mask nesting violated: need et <= tc <= wt")

    @classmethod
    def from_label_map(cls, labels) -> "RegionMasks":
        """Build nested masks from codes {0 bg, 1 necrosis, 2 edema, 4 enhancing}."""
        lab = np.asarray(labels)
        return cls(
            et=lab == 4,
            tc=(lab == 1) | (lab == 4),
            wt=(lab == 1) | (lab == 2) | (lab == 4),
        )

    def voxel_counts(self) -> tuple[int, int, int]:
        return int(self.et.sum()), int(self.tc.sum()), int(self.wt.sum())

    def region(self, name: str) -> np.ndarray:
        return getattr(self, name)


def _ellipsoid(coords, center, semi_axes) -> np.ndarray:
    parts = [((coords[ax] - center[ax]) / semi_axes[ax]) ** 2 for ax in range(3)]
    return (parts[0] + parts[1] + parts[2]) <= 1.0


def generate_case(profile: SiteProfile, case_index: int, dims) -> tuple[PhantomVolume, RegionMasks]:
    """Generate one deterministic case for a site.

    Three concentric ellipsoids form the lesion (enhancing core, necrotic
    shell, edema envelope) inside a tissue ellipsoid surrounded by exactly-zero
    border planes. Channel intensities are region base levels passed through
    the site's gain/shift, plus Gaussian noise on tissue voxels. The same
    (profile, case_index, dims) always yields bitwise-identical output.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 8:
        raise ValueError(f"dims must be three extents >= 8, got {dims}")
    rng = derive_rng(profile.seed, "case", case_index)
    d = np.asarray(dims, dtype=float)
    coords = [np.arange(dims[ax], dtype=float).reshape([-1 if a == ax else 1 for a in range(3)]) for ax in range(3)]

    center = (d - 1.0) / 2.0
    brain_semi = d / 2.0 - _BRAIN_MARGIN
    brain = _ellipsoid(coords, center, np.maximum(brain_semi, 1.0))

    # Lesion geometry: shared per-axis jitter keeps the three regions concentric.
    t_center = center + rng.uniform(-0.08, 0.08, size=3) * d
    jitter = rng.uniform(0.85, 1.18, size=3)
    wt_r = rng.uniform(0.16, 0.26) * float(d.min())
    tc_r = wt_r * rng.uniform(0.55, 0.75)
    et_r = tc_r * rng.uniform(0.50, 0.70)
    et_r = max(et_r, 2.2)
    tc_r = max(tc_r, et_r + 1.2)
    wt_r = max(wt_r, tc_r + 1.2)

    et = _ellipsoid(coords, t_center, jitter * et_r) & brain
    tc = _ellipsoid(coords, t_center, jitter * tc_r) & brain
    wt = _ellipsoid(coords, t_center, jitter * wt_r) & brain
    masks = RegionMasks(et=et, tc=tc, wt=wt)

    # 0 brain tissue, 1 edema, 2 necrosis, 3 enhancing (indices into _BASE_LEVELS rows)
    region_idx = np.zeros(dims, dtype=np.intp)
    region_idx[wt] = 1
    region_idx[tc] = 2
    region_idx[et] = 3

    n_tissue = int(brain.sum())
    noise = None
    if profile.noise_sigma > 0:
        noise = rng.normal(0.0, profile.noise_sigma, size=(4, n_tissue))

    channels = np.zeros((4,) + dims)
    for c in range(4):
        levels = _BASE_LEVELS[c][region_idx]
        vals = profile.intensity_gain[c] * levels[brain] + profile.intensity_shift[c]
        if noise is not None:
            vals = vals + noise[c]
        channels[c][brain] = vals

    vol = PhantomVolume(channels=channels, case_id=f"{profile.site_id}-{case_index:04d}", site_id=profile.site_id)
    return vol, masks


def generate_site(profile: SiteProfile, dims) -> list[tuple[PhantomVolume, RegionMasks]]:
    return [generate_case(profile, i, dims) for i in range(profile.n_cases)]


def split_site(cases, ratio=(4, 1), seed: int = 0):
    """Seeded shuffle-then-split with a validation floor of one case.

    Train count is round(n * train/(train+val)) with round-half-up, clamped so
    both sides keep at least one case. The split is a pure function of
    (cases order, ratio, seed), so it stays fixed for a whole run.
    """
    cases = list(cases)
    n = len(cases)
    if n < 2:
        raise EmptyDatasetError(f"need at least 2 cases to split, got {n}")
    rt, rv = ratio
    if rt <= 0 or rv <= 0:
        raise ValueError("split ratio parts must be positive")
    perm = derive_rng(seed, "split").permutation(n)
    n_train = int(np.floor(n * rt / (rt + rv) + 0.5))
    n_train = max(1, min(n_train, n - 1))
    train = [cases[i] for i in perm[:n_train]]
    val = [cases[i] for i in perm[n_train:]]
    return train, val
