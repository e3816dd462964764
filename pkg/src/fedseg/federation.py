"""Aggregator and collaborator machinery for server-averaged federated rounds.

One round: the aggregator broadcasts the consensus parameters, every
non-dropped collaborator trains them for one local epoch and scores the
received consensus on its local validation split, and the aggregator
averages the returned updates (weighted by training-case count by default)
into the next consensus. After the final round, per-site validation series
are gap-filled by linear interpolation and the best rounds are selected.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DuplicateSubmissionError,
    EmptyDatasetError,
    IllegalTransitionError,
    NoScoresError,
    StaleRoundError,
)
from .metrics import DscReport, REGIONS, evaluate_case, mean_report
from .model import SegNet, SegNetConfig, init_net, train_one_epoch
from .pipeline import PipelineConfig
from .seeding import bernoulli, derive_rng
from .tensors import ParamVector, weighted_mean, wire_roundtrip

__all__ = [
    "Phase",
    "CollaboratorState",
    "Collaborator",
    "RoundSubmission",
    "RoundLedger",
    "Aggregator",
    "DropSchedule",
    "SelectionResult",
    "pretrain_public_initial",
    "run_round",
    "run_federation",
    "interpolate_scores",
    "curve_stability",
    "select_consensus",
]


class Phase(enum.Enum):
    IDLE = "idle"
    TRAINING = "training"
    VALIDATING = "validating"
    SUBMITTED = "submitted"
    DROPPED = "dropped"


_LEGAL_TRANSITIONS = {
    (Phase.IDLE, Phase.TRAINING),
    (Phase.TRAINING, Phase.VALIDATING),
    (Phase.VALIDATING, Phase.SUBMITTED),
    (Phase.SUBMITTED, Phase.IDLE),
    (Phase.IDLE, Phase.DROPPED),
    (Phase.TRAINING, Phase.DROPPED),
    (Phase.VALIDATING, Phase.DROPPED),
    (Phase.SUBMITTED, Phase.DROPPED),
    (Phase.DROPPED, Phase.IDLE),
}


@dataclass
class CollaboratorState:
    site_id: str
    phase: Phase
    train_count: int
    val_count: int

    def transition(self, to: Phase) -> None:
        if (self.phase, to) not in _LEGAL_TRANSITIONS:
            raise IllegalTransitionError(f"{self.site_id}: {self.phase.value} -> {to.value}")
        self.phase = to


@dataclass(frozen=True)
class RoundSubmission:
    site_id: str
    round: int
    update: ParamVector
    train_count: int
    report: DscReport
    val_count: int
    per_case: tuple[tuple[str, DscReport], ...] = ()
    train_loss: float = 0.0


class Collaborator:
    """One site's training worker; keeps its data and local Adam state."""

    def __init__(
        self,
        site_id: str,
        train_cases,
        val_cases,
        model_cfg: SegNetConfig,
        pipeline_cfg: PipelineConfig,
        run_seed: int,
        loss_mode: str = "mirrored",
    ):
        if not train_cases or not val_cases:
            raise EmptyDatasetError(f"site {site_id} needs nonempty train and val splits")
        self.site_id = site_id
        self.train_cases = list(train_cases)
        self.val_cases = list(val_cases)
        self.model_cfg = model_cfg
        self.pipeline_cfg = pipeline_cfg
        self.run_seed = run_seed
        self.loss_mode = loss_mode
        self.state = CollaboratorState(site_id, Phase.IDLE, len(self.train_cases), len(self.val_cases))
        self._adam = None  # persists across rounds

    def local_round(self, round_idx: int, consensus: ParamVector) -> RoundSubmission:
        """Train the received consensus one epoch, then score that consensus."""
        from .model import AdamState

        if self.state.phase is Phase.DROPPED:
            self.state.transition(Phase.IDLE)
        self.state.transition(Phase.TRAINING)
        adam = self._adam or AdamState.zeros(consensus.data.size)
        net = SegNet(params=consensus, config=self.model_cfg, adam=adam)
        rng = derive_rng(self.run_seed, "train", self.site_id, round_idx)
        trained, loss = train_one_epoch(net, self.train_cases, self.pipeline_cfg, rng, self.loss_mode)
        self._adam = trained.adam

        self.state.transition(Phase.VALIDATING)
        received = SegNet(params=consensus, config=self.model_cfg, adam=adam)
        per_case = []
        for vol, masks in self.val_cases:
            rep = evaluate_case(received, vol, masks, self.pipeline_cfg.patch.size)
            per_case.append((vol.case_id, rep))

        self.state.transition(Phase.SUBMITTED)
        return RoundSubmission(
            site_id=self.site_id,
            round=round_idx,
            update=trained.params,
            train_count=len(self.train_cases),
            report=mean_report([r for _, r in per_case]),
            val_count=len(self.val_cases),
            per_case=tuple(per_case),
            train_loss=loss,
        )

    def finish_round(self) -> None:
        self.state.transition(Phase.IDLE)

    def mark_dropped(self) -> None:
        if self.state.phase is not Phase.DROPPED:
            self.state.transition(Phase.DROPPED)

    def rejoin(self) -> None:
        if self.state.phase is Phase.DROPPED:
            self.state.transition(Phase.IDLE)


@dataclass(frozen=True)
class RoundLedger:
    """Everything the aggregator recorded for one federated round."""

    round: int
    updates: dict  # site_id -> (ParamVector, train_count)
    val_scores: dict  # site_id -> DscReport; absent sites are gaps, never zeros
    val_counts: dict  # site_id -> int
    dropped: frozenset
    consensus: ParamVector
    skipped: bool = False
    per_case: dict = field(default_factory=dict)  # site_id -> tuple[(case_id, DscReport)]
    train_losses: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DropSchedule:
    """Seeded per-(site, round) Bernoulli dropout decisions."""

    seed: int
    dropout_p: float

    def dropped(self, site_id: str, round_idx: int) -> bool:
        return bernoulli(self.dropout_p, self.seed, "drop", site_id, round_idx)


class Aggregator:
    """Single logical state machine collecting one round's submissions."""

    def __init__(self, initial: ParamVector, weighting: str = "samples"):
        if weighting not in ("samples", "uniform"):
            raise ValueError(f"unknown weighting {weighting!r}")
        self.consensus = initial
        self.weighting = weighting
        self.round = 0
        self.ledgers: list[RoundLedger] = []
        self._open = False
        self._updates: dict = {}
        self._val_scores: dict = {}
        self._val_counts: dict = {}
        self._per_case: dict = {}
        self._losses: dict = {}
        self._dropped: set = set()

    def start_round(self) -> int:
        self.round += 1
        self._open = True
        self._updates.clear()
        self._val_scores.clear()
        self._val_counts.clear()
        self._per_case.clear()
        self._losses.clear()
        self._dropped.clear()
        return self.round

    def _check(self, site_id: str, round_idx: int, store: dict) -> None:
        if not self._open or round_idx != self.round:
            raise StaleRoundError(f"{site_id} submitted for round {round_idx}, open round is {self.round}")
        if site_id in store:
            raise DuplicateSubmissionError(f"{site_id} already submitted in round {round_idx}")

    def submit_update(self, site_id: str, round_idx: int, update: ParamVector, train_count: int) -> None:
        self._check(site_id, round_idx, self._updates)
        self._updates[site_id] = (update, int(train_count))

    def submit_validation(
        self, site_id: str, round_idx: int, report: DscReport, val_count: int, per_case=()
    ) -> None:
        self._check(site_id, round_idx, self._val_scores)
        self._val_scores[site_id] = report
        self._val_counts[site_id] = int(val_count)
        if per_case:
            self._per_case[site_id] = tuple(per_case)

    def record_loss(self, site_id: str, loss: float) -> None:
        self._losses[site_id] = float(loss)

    def mark_dropped(self, site_id: str, round_idx: int) -> None:
        if not self._open or round_idx != self.round:
            raise StaleRoundError(f"{site_id} dropped for round {round_idx}, open round is {self.round}")
        self._dropped.add(site_id)

    def close_round(self) -> RoundLedger:
        """Average collected updates (sorted by site id) into the new consensus."""
        skipped = not self._updates
        if not skipped:
            sites = sorted(self._updates)
            vectors = [self._updates[s][0] for s in sites]
            if self.weighting == "samples":
                weights = [float(self._updates[s][1]) for s in sites]
            else:
                weights = [1.0] * len(sites)
            self.consensus = weighted_mean(vectors, weights)
        ledger = RoundLedger(
            round=self.round,
            updates=dict(self._updates),
            val_scores=dict(self._val_scores),
            val_counts=dict(self._val_counts),
            dropped=frozenset(self._dropped),
            consensus=self.consensus,
            skipped=skipped,
            per_case=dict(self._per_case),
            train_losses=dict(self._losses),
        )
        self.ledgers.append(ledger)
        self._open = False
        return ledger


def pretrain_public_initial(
    public_cases,
    epochs: int,
    model_cfg: SegNetConfig,
    pipeline_cfg: PipelineConfig,
    seed: int,
    loss_mode: str = "mirrored",
) -> SegNet:
    """Central warm-start training on the pooled public cases.

    epochs=0 returns the seeded random initialization unchanged.
    """
    public_cases = list(public_cases)
    if not public_cases:
        raise EmptyDatasetError("public pretraining pool is empty")
    net = init_net(model_cfg, seed)
    for epoch in range(int(epochs)):
        rng = derive_rng(seed, "pretrain", epoch)
        net, _ = train_one_epoch(net, public_cases, pipeline_cfg, rng, loss_mode)
    return net


def run_round(
    aggregator: Aggregator,
    collaborators,
    dropout_p: float = 0.0,
    drop_schedule: DropSchedule | None = None,
) -> RoundLedger:
    """Drive one full round in-process.

    Broadcast and update parameters are rounded through the 32-bit wire
    representation so the direct driver matches the transport fabrics bit
    for bit.
    """
    if drop_schedule is None:
        drop_schedule = DropSchedule(seed=0, dropout_p=dropout_p)
    round_idx = aggregator.start_round()
    broadcast = wire_roundtrip(aggregator.consensus)
    active = []
    for collab in sorted(collaborators, key=lambda c: c.site_id):
        if drop_schedule.dropped(collab.site_id, round_idx):
            collab.mark_dropped()
            aggregator.mark_dropped(collab.site_id, round_idx)
            continue
        sub = collab.local_round(round_idx, broadcast)
        aggregator.submit_validation(sub.site_id, round_idx, sub.report, sub.val_count, sub.per_case)
        aggregator.submit_update(sub.site_id, round_idx, wire_roundtrip(sub.update), sub.train_count)
        aggregator.record_loss(sub.site_id, sub.train_loss)
        active.append(collab)
    ledger = aggregator.close_round()
    for collab in active:
        collab.finish_round()
    for collab in collaborators:
        collab.rejoin()
    return ledger


def run_federation(
    initial: ParamVector,
    collaborators,
    total_rounds: int,
    weighting: str = "samples",
    drop_schedule: DropSchedule | None = None,
    on_round=None,
) -> tuple[list[RoundLedger], "SelectionResult"]:
    """Run the configured number of rounds, then select consensus checkpoints."""
    if total_rounds < 1:
        raise ValueError("total_rounds must be >= 1")
    aggregator = Aggregator(initial, weighting=weighting)
    if drop_schedule is None:
        drop_schedule = DropSchedule(seed=0, dropout_p=0.0)
    for _ in range(total_rounds):
        ledger = run_round(aggregator, collaborators, drop_schedule=drop_schedule)
        if on_round is not None:
            on_round(ledger)
    return aggregator.ledgers, select_consensus(aggregator.ledgers)


def interpolate_scores(series: dict, rounds) -> dict:
    """Fill gaps by linear interpolation over the round index.

    Leading/trailing gaps take the nearest present value.
    """
    rounds = list(rounds)
    present = sorted(r for r in rounds if series.get(r) is not None)
    if not present:
        raise NoScoresError("cannot interpolate an empty series")
    out = {}
    for r in rounds:
        if series.get(r) is not None:
            out[r] = float(series[r])
        elif r < present[0]:
            out[r] = float(series[present[0]])
        elif r > present[-1]:
            out[r] = float(series[present[-1]])
        else:
            lo = max(p for p in present if p < r)
            hi = min(p for p in present if p > r)
            frac = (r - lo) / (hi - lo)
            out[r] = float(series[lo]) + (float(series[hi]) - float(series[lo])) * frac
    return out


def curve_stability(y) -> float:
    """Total variation of a score series: sum of |y_i - y_{i-1}|."""
    y = np.asarray(list(y), dtype=np.float64)
    if y.size < 2:
        raise ValueError("curve_stability needs at least 2 points")
    return float(np.abs(np.diff(y)).sum())


@dataclass(frozen=True)
class SelectionResult:
    singlet: int
    triplet: tuple[int, int, int]  # best round per (et, tc, wt)

    def triplet_map(self) -> dict:
        return dict(zip(REGIONS, self.triplet))


def _interpolated_site_series(ledgers) -> tuple[list[int], dict, dict]:
    rounds = [led.round for led in ledgers]
    sites = sorted({s for led in ledgers for s in led.val_scores})
    if not sites:
        raise NoScoresError("no validation scores in any round")
    val_counts = {}
    series = {}
    for site in sites:
        val_counts[site] = max(led.val_counts.get(site, 0) for led in ledgers)
        series[site] = {
            region: interpolate_scores(
                {led.round: (led.val_scores[site].region(region) if site in led.val_scores else None) for led in ledgers},
                rounds,
            )
            for region in REGIONS
        }
    return rounds, series, val_counts


def global_validation_curves(ledgers) -> dict:
    """Per-region series of the val_count-weighted mean score across sites."""
    rounds, series, val_counts = _interpolated_site_series(ledgers)
    total = float(sum(val_counts.values()))
    curves = {region: {} for region in REGIONS}
    for region in REGIONS:
        for r in rounds:
            curves[region][r] = (
                sum(val_counts[s] * series[s][region][r] for s in sorted(series)) / total
            )
    return curves


def select_consensus(ledgers) -> SelectionResult:
    """Pick the rounds maximizing interpolated mean validation overlap.

    The singlet maximizes the mean over the three regions; the triplet holds
    the per-region argmax rounds. Ties break toward the earlier round.
    """
    curves = global_validation_curves(ledgers)
    rounds = sorted(curves[REGIONS[0]])

    def argmax(values: dict) -> int:
        best_round, best = None, -np.inf
        for r in rounds:
            if values[r] > best:
                best_round, best = r, values[r]
        return best_round

    mean3 = {r: sum(curves[region][r] for region in REGIONS) / 3.0 for r in rounds}
    return SelectionResult(
        singlet=argmax(mean3),
        triplet=tuple(argmax(curves[region]) for region in REGIONS),
    )
