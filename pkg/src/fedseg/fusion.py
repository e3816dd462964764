"""Multi-rater label fusion: voting, STAPLE, and SIMPLE.

STAPLE runs binary expectation-maximization per region: the E-step weighs
each voxel by the likelihood ratio of the rater decisions under current
sensitivities/specificities, the M-step re-estimates those performance
levels from the weights. SIMPLE iteratively drops raters that score poorly
against the evolving voted consensus.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError
from .metrics import dsc

__all__ = [
    "RaterSet",
    "StapleEstimate",
    "SimpleTrace",
    "vote_fuse",
    "staple_fuse",
    "simple_fuse",
    "simple_fuse_trace",
]

_EPS = 1e-12


@dataclass(frozen=True)
class RaterSet:
    """Two or more equal-shape binary masks, one per rater."""

    raters: tuple[tuple[str, np.ndarray], ...]

    def __post_init__(self):
        raters = []
        for rater_id, mask in self.raters:
            m = np.ascontiguousarray(np.asarray(mask, dtype=bool))
            m.setflags(write=False)
            raters.append((str(rater_id), m))
        if len(raters) < 2:
            raise ValueError("a RaterSet needs at least 2 raters")
        shape = raters[0][1].shape
        for rater_id, m in raters[1:]:
            if m.shape != shape:
                raise ShapeMismatchError(shape, m.shape, f"rater {rater_id}")
        object.__setattr__(self, "raters", tuple(raters))

    @classmethod
    def from_masks(cls, masks, ids=None) -> "RaterSet":
        masks = list(masks)
        if ids is None:
            ids = [f"rater{i}" for i in range(len(masks))]
        return cls(tuple(zip(ids, masks)))

    @property
    def shape(self):
        return self.raters[0][1].shape

    def stacked(self) -> np.ndarray:
        return np.stack([m for _, m in self.raters])

    def ids(self) -> tuple[str, ...]:
        return tuple(r for r, _ in self.raters)


def vote_fuse(rs: RaterSet, mode: str = "mean_threshold") -> np.ndarray:
    """Voxelwise vote.

    mean_threshold: 1 iff the mean vote is >= 0.5 (ties resolve to 1).
    strict_majority: 1 iff strictly more than half the raters vote 1.
    """
    votes = rs.stacked()
    n = votes.shape[0]
    count = votes.sum(axis=0)
    if mode == "mean_threshold":
        return 2 * count >= n
    if mode == "strict_majority":
        return 2 * count > n
    raise ValueError(f"unknown vote mode {mode!r}")


@dataclass(frozen=True)
class StapleEstimate:
    consensus: np.ndarray  # posterior foreground probability per voxel
    sensitivities: tuple[float, ...]
    specificities: tuple[float, ...]
    iterations: int
    log_likelihoods: tuple[float, ...]
    prior: float


def staple_fuse(rs: RaterSet, prior="auto", tol: float = 1e-6, max_iter: int = 100) -> StapleEstimate:
    """Binary EM consensus with per-rater sensitivity p and specificity q.

    E-step: W_v = a_v / (a_v + b_v) with
      a_v = pi   * prod_j p_j^d  (1-p_j)^(1-d)
      b_v = (1-pi) * prod_j (1-q_j)^d q_j^(1-d)
    M-step: p_j = sum(W d_j)/sum(W), q_j = sum((1-W)(1-d_j))/sum(1-W).
    Iterates until max |delta p|, |delta q| < tol or max_iter. The recorded
    log-likelihood sequence (one entry per E-step) is non-decreasing.
    """
    d = rs.stacked().reshape(len(rs.raters), -1).astype(np.float64)
    n_raters, _ = d.shape
    pi = float(d.mean()) if prior == "auto" else float(prior)
    pi = min(max(pi, _EPS), 1.0 - _EPS)
    p = np.full(n_raters, 0.99999)
    q = np.full(n_raters, 0.99999)
    logliks = []
    iterations = 0
    for _ in range(max_iter):
        iterations += 1
        w, ll = _staple_estep(d, p, q, pi)
        logliks.append(ll)
        sw = w.sum()
        swc = (1.0 - w).sum()
        p_new = (d @ w) / sw if sw > 0 else p
        q_new = ((1.0 - d) @ (1.0 - w)) / swc if swc > 0 else q
        delta = max(np.abs(p_new - p).max(), np.abs(q_new - q).max())
        p, q = p_new, q_new
        if delta < tol:
            break
    w, ll = _staple_estep(d, p, q, pi)
    logliks.append(ll)
    return StapleEstimate(
        consensus=w.reshape(rs.shape),
        sensitivities=tuple(float(x) for x in p),
        specificities=tuple(float(x) for x in q),
        iterations=iterations,
        log_likelihoods=tuple(logliks),
        prior=pi,
    )


def _staple_estep(d, p, q, pi):
    pc = np.clip(p, _EPS, 1.0 - _EPS)
    qc = np.clip(q, _EPS, 1.0 - _EPS)
    log_a = np.log(pi) + np.log(pc) @ d + np.log1p(-pc) @ (1.0 - d)
    log_b = np.log1p(-pi) + np.log1p(-qc) @ d + np.log(qc) @ (1.0 - d)
    diff = np.clip(log_b - log_a, -700.0, 700.0)
    w = 1.0 / (1.0 + np.exp(diff))
    ll = float(np.logaddexp(log_a, log_b).sum())
    return w, ll


@dataclass(frozen=True)
class SimpleTrace:
    fused: np.ndarray
    kept_ids: tuple[str, ...]
    iterations: int
    scores: tuple[dict, ...]  # per iteration: rater_id -> overlap vs fusion


def simple_fuse_trace(rs: RaterSet, theta: float = 0.7, max_iter: int = 10) -> SimpleTrace:
    """Iterative selective fusion.

    Each iteration votes the active subset, scores every active rater by
    overlap against that fusion, and drops raters scoring below
    theta * mean(active scores). The subset never shrinks below two raters;
    iteration stops when the subset is stable or max_iter is hit.
    """
    raters = list(rs.raters)
    active = list(range(len(raters)))
    history = []
    iterations = 0
    for _ in range(max_iter):
        iterations += 1
        fused = vote_fuse(RaterSet.from_masks([raters[i][1] for i in active]), "mean_threshold")
        scores = {i: dsc(raters[i][1].astype(float), fused.astype(float)) for i in active}
        history.append({raters[i][0]: scores[i] for i in active})
        mean_score = float(np.mean([scores[i] for i in active]))
        keep = [i for i in active if scores[i] >= theta * mean_score]
        if len(keep) < 2:
            keep = sorted(active, key=lambda i: (-scores[i], i))[:2]
            keep.sort()
        if keep == active:
            break
        active = keep
    fused = vote_fuse(RaterSet.from_masks([raters[i][1] for i in active]), "mean_threshold")
    return SimpleTrace(
        fused=fused,
        kept_ids=tuple(raters[i][0] for i in active),
        iterations=iterations,
        scores=tuple(history),
    )


def simple_fuse(rs: RaterSet, theta: float = 0.7, max_iter: int = 10) -> np.ndarray:
    return simple_fuse_trace(rs, theta=theta, max_iter=max_iter).fused
