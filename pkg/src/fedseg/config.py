"""Experiment configuration: JSON schema, validation, and presets."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .errors import ConfigError
from .pipeline import AugmentConfig, PatchSpec, PipelineConfig
from .model import SegNetConfig
from .seeding import derive_rng, derive_seed
from .phantom import SiteProfile

__all__ = [
    "SiteSettings",
    "QuantizeSettings",
    "SelectionSettings",
    "ExperimentConfig",
    "load_config",
    "desk_scale_config",
    "paper_mirror_config",
]

ROLES = ("train", "public", "holdout")


@dataclass(frozen=True)
class SiteSettings:
    site_id: str
    role: str
    n_cases: int
    dims: tuple[int, int, int]
    noise_sigma: float = 0.1
    gain: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    shift: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)

    def profile(self, run_seed: int) -> SiteProfile:
        return SiteProfile(
            site_id=self.site_id,
            n_cases=self.n_cases,
            intensity_shift=tuple(self.shift),
            intensity_gain=tuple(self.gain),
            noise_sigma=self.noise_sigma,
            seed=derive_seed(run_seed, "site", self.site_id),
        )


@dataclass(frozen=True)
class QuantizeSettings:
    max_drop: float = 0.01
    calibration_cases: int = 8


@dataclass(frozen=True)
class SelectionSettings:
    # Optional early stop: halt when the round-mean validation score has not
    # improved for this many rounds. None keeps the fixed round budget.
    plateau_rounds: int | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    rounds: int
    sites: tuple[SiteSettings, ...]
    dropout_p: float = 0.0
    weighting: str = "samples"
    loss_mode: str = "mirrored"
    pretrain_epochs: int = 2
    single_site_epochs: int | None = None  # None -> rounds
    train_single_site: bool = True
    evaluate_round_curves: bool = True
    patch_size: int = 32
    noise_mu: float = 0.0
    noise_sigma: float = 0.1
    noise_p: float = 0.2
    rotate_p: float = 0.5
    flip_p: float = 1.0
    base_filters: int = 8
    lr: float = 5e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    quantize: QuantizeSettings = field(default_factory=QuantizeSettings)
    selection: SelectionSettings = field(default_factory=SelectionSettings)
    output_dir: str = "runs/run"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ConfigError("dropout_p must be in [0, 1]")
        if self.weighting not in ("samples", "uniform"):
            raise ConfigError(f"weighting must be 'samples' or 'uniform', got {self.weighting!r}")
        if self.loss_mode not in ("mirrored", "complement"):
            raise ConfigError(f"loss_mode must be 'mirrored' or 'complement', got {self.loss_mode!r}")
        if self.pretrain_epochs < 0:
            raise ConfigError("pretrain_epochs must be >= 0")
        if not self.sites:
            raise ConfigError("at least one site is required")
        seen = set()
        roles = {r: 0 for r in ROLES}
        for site in self.sites:
            if site.role not in ROLES:
                raise ConfigError(f"site {site.site_id}: unknown role {site.role!r}")
            if site.site_id in seen:
                raise ConfigError(f"duplicate site_id {site.site_id!r}")
            seen.add(site.site_id)
            roles[site.role] += 1
            if site.n_cases < 2 and site.role != "holdout":
                raise ConfigError(f"site {site.site_id}: needs >= 2 cases to split")
            if min(site.dims) < 8:
                raise ConfigError(f"site {site.site_id}: dims must be >= 8")
        if roles["train"] < 1:
            raise ConfigError("at least one training site is required")
        if self.patch_size < 8:
            raise ConfigError("patch_size must be >= 8")

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(
            patch=PatchSpec(self.patch_size),
            augment=AugmentConfig(
                noise_mu=self.noise_mu,
                noise_sigma=self.noise_sigma,
                noise_p=self.noise_p,
                rotate_p=self.rotate_p,
                flip_p=self.flip_p,
                seed=self.seed,
            ),
        )

    def model_config(self) -> SegNetConfig:
        return SegNetConfig(
            base_filters=self.base_filters,
            lr=self.lr,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps,
        )

    def sites_by_role(self, role: str) -> tuple[SiteSettings, ...]:
        return tuple(s for s in self.sites if s.role == role)

    def effective_single_site_epochs(self) -> int:
        return self.rounds if self.single_site_epochs is None else self.single_site_epochs

    def to_json(self) -> str:
        payload = asdict(self)
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        payload = dict(payload)
        try:
            sites = tuple(
                SiteSettings(
                    site_id=s["site_id"],
                    role=s["role"],
                    n_cases=s["n_cases"],
                    dims=tuple(s["dims"]),
                    noise_sigma=s.get("noise_sigma", 0.1),
                    gain=tuple(s.get("gain", (1.0, 1.0, 1.0, 1.0))),
                    shift=tuple(s.get("shift", (0.0, 0.0, 0.0, 0.0))),
                )
                for s in payload.pop("sites")
            )
            quant = QuantizeSettings(**payload.pop("quantize", {}))
            selection = SelectionSettings(**payload.pop("selection", {}))
            return cls(sites=sites, quantize=quant, selection=selection, **payload)
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid experiment config: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(payload)


def _heterogeneous_sites(seed: int, prefix: str, role: str, count: int, case_range, dims_choices, rng):
    sites = []
    for i in range(count):
        gain = tuple(float(g) for g in rng.uniform(0.7, 1.4, size=4))
        shift = tuple(float(s) for s in rng.uniform(-0.3, 0.3, size=4))
        sites.append(
            SiteSettings(
                site_id=f"{prefix}{i + 1:02d}",
                role=role,
                n_cases=int(rng.integers(case_range[0], case_range[1] + 1)),
                dims=tuple(dims_choices[int(rng.integers(0, len(dims_choices)))]),
                noise_sigma=float(rng.uniform(0.08, 0.3)),
                gain=gain,
                shift=shift,
            )
        )
    return sites


def desk_scale_config(seed: int, output_dir: str = "runs/desk", **overrides) -> ExperimentConfig:
    """Ten heterogeneous training sites, two public, two out-of-sample.

    Sized so one full simulation (federation, single-site baselines, and
    evaluation) finishes in minutes on a laptop CPU.
    """
    rng = derive_rng(seed, "desk-preset")
    dims_choices = [(24, 24, 24), (28, 28, 28), (32, 32, 32)]
    sites = []
    sites += _heterogeneous_sites(seed, "pub", "public", 2, (14, 20), dims_choices, rng)
    sites += _heterogeneous_sites(seed, "site", "train", 10, (20, 36), dims_choices, rng)
    sites += _heterogeneous_sites(seed, "oos", "holdout", 2, (16, 24), dims_choices, rng)
    defaults = dict(
        seed=seed,
        rounds=30,
        sites=tuple(sites),
        patch_size=16,
        base_filters=8,
        pretrain_epochs=2,
        output_dir=output_dir,
    )
    defaults.update(overrides)
    return ExperimentConfig(**defaults)


def paper_mirror_config(seed: int, output_dir: str = "runs/paper_mirror", **overrides) -> ExperimentConfig:
    """Overnight-scale preset: 49 training sites with a long-tail size skew,
    one pooled public node, six out-of-sample sites, 73 rounds."""
    rng = derive_rng(seed, "paper-preset")
    dims_choices = [(32, 32, 32)]
    sites = []
    sites += _heterogeneous_sites(seed, "pub", "public", 1, (180, 240), dims_choices, rng)
    # long tail: a few large contributors, many small ones
    counts = sorted((int(x) for x in rng.pareto(1.5, size=49) * 30 + 10), reverse=True)
    counts = [min(c, 400) for c in counts]
    for i, n in enumerate(counts):
        gain = tuple(float(g) for g in rng.uniform(0.7, 1.4, size=4))
        shift = tuple(float(s) for s in rng.uniform(-0.3, 0.3, size=4))
        sites.append(
            SiteSettings(
                site_id=f"site{i + 1:02d}",
                role="train",
                n_cases=max(10, n),
                dims=dims_choices[0],
                noise_sigma=float(rng.uniform(0.08, 0.3)),
                gain=gain,
                shift=shift,
            )
        )
    sites += _heterogeneous_sites(seed, "oos", "holdout", 6, (40, 120), dims_choices, rng)
    defaults = dict(
        seed=seed,
        rounds=73,
        sites=tuple(sites),
        patch_size=16,
        base_filters=8,
        pretrain_epochs=3,
        output_dir=output_dir,
    )
    defaults.update(overrides)
    return ExperimentConfig(**defaults)
