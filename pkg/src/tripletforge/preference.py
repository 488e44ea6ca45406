"""Preference-pair construction and the diffusion preference loss.

Pairing follows strict dominance: a winner must beat the loser on both
instruction adherence and aesthetics at once, so ties on either criterion
veto the pair. The loss is -log sigmoid(beta * (d_w - d_l)) over implicit
rewards d = |eps - eps_ref|^2 - |eps - eps_theta|^2, with analytic
gradients w.r.t. the trained model's predictions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .records import AssessorScore

DEFAULT_BETA = 0.1

CANDIDATE_SOURCES = ("on-policy", "teacher")
PAIR_ORIGINS = ("self-generated", "symmetric", "distilled")


@dataclass(frozen=True)
class ScoredCandidate:
    triplet_id: str
    scores: AssessorScore
    source: str = "on-policy"

    def __post_init__(self):
        if self.source not in CANDIDATE_SOURCES:
            raise ValueError(f"unknown candidate source {self.source!r}")


@dataclass(frozen=True)
class PreferencePair:
    winner_id: str
    loser_id: str
    context_id: str
    origin: str = "self-generated"

    def __post_init__(self):
        if self.winner_id == self.loser_id:
            raise ValueError("winner and loser must differ")
        if self.origin not in PAIR_ORIGINS:
            raise ValueError(f"unknown pair origin {self.origin!r}")


def dominates(winner: AssessorScore, loser: AssessorScore) -> bool:
    """Strict dominance on both criteria; any tie vetoes."""
    return (
        winner.instruction_adherence > loser.instruction_adherence
        and winner.aesthetic > loser.aesthetic
    )


def strict_dominance_pairs(candidates, context_id: str = "") -> list[PreferencePair]:
    """All ordered pairs (w, l) where w strictly dominates l, sorted by id."""
    pairs = []
    for w in candidates:
        for l in candidates:
            if w.triplet_id == l.triplet_id:
                continue
            if dominates(w.scores, l.scores):
                pairs.append(
                    PreferencePair(w.triplet_id, l.triplet_id, context_id, "self-generated")
                )
    pairs.sort(key=lambda p: (p.winner_id, p.loser_id))
    return pairs


def symmetric_pairs(instruction_ids, generation_ids, verdicts):
    """Cross-conditioned hard negatives from an m x m instruction/generation grid.

    verdicts[i][j] is the adherence verdict of generation j under
    instruction i; only the diagonal decides survival. For each surviving
    instruction c_i the own generation y_i wins against every other
    surviving y_j, in both directions across the grid. Returns
    (pairs, skipped) with skipped as (instruction_id, reason).
    """
    m = len(instruction_ids)
    if len(generation_ids) != m:
        raise ValueError("instruction and generation lists differ in length")
    verdicts = np.asarray(verdicts, dtype=bool)
    if verdicts.shape != (m, m):
        raise ValueError(f"verdict matrix must be {m}x{m}, got {verdicts.shape}")
    survived = [bool(verdicts[i, i]) for i in range(m)]
    skipped = [
        (instruction_ids[i], "assessor-failed") for i in range(m) if not survived[i]
    ]
    pairs = []
    for i in range(m):
        if not survived[i]:
            continue
        for j in range(m):
            if i == j or not survived[j]:
                continue
            pairs.append(
                PreferencePair(generation_ids[i], generation_ids[j], instruction_ids[i], "symmetric")
            )
    return pairs, skipped


def distilled_pairs(teacher, student, context_id: str = "") -> list[PreferencePair]:
    """Teacher output beats each student output that does not strictly
    dominate it (the guard keeps inverted pairs out of the data)."""
    for t in teacher:
        if t.source != "teacher":
            raise ValueError(f"candidate {t.triplet_id} is not tagged as teacher")
    pairs = []
    for t in teacher:
        for s in student:
            if s.triplet_id == t.triplet_id:
                continue
            if dominates(s.scores, t.scores):
                continue
            pairs.append(PreferencePair(t.triplet_id, s.triplet_id, context_id, "distilled"))
    pairs.sort(key=lambda p: (p.winner_id, p.loser_id))
    return pairs


# --- loss numerics -----------------------------------------------------------

@dataclass(frozen=True)
class DpoSample:
    """Noise plus reference/trained predictions for one preference pair."""

    eps: np.ndarray
    eps_ref_w: np.ndarray
    eps_theta_w: np.ndarray
    eps_ref_l: np.ndarray
    eps_theta_l: np.ndarray
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        arrays = {}
        for name in ("eps", "eps_ref_w", "eps_theta_w", "eps_ref_l", "eps_theta_l"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 1:
                arr = arr.ravel()
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
            arrays[name] = arr
            object.__setattr__(self, name, arr)
        lengths = {a.shape[0] for a in arrays.values()}
        if len(lengths) != 1:
            raise ValueError(f"prediction vectors differ in length: {lengths}")
        if not (np.isfinite(self.beta) and self.beta > 0):
            raise ValueError(f"beta must be positive, got {self.beta}")


def dpo_implicit_reward(eps, eps_ref, eps_theta) -> float:
    """|eps - eps_ref|^2 - |eps - eps_theta|^2."""
    eps = np.asarray(eps, dtype=np.float64)
    eps_ref = np.asarray(eps_ref, dtype=np.float64)
    eps_theta = np.asarray(eps_theta, dtype=np.float64)
    if not (eps.shape == eps_ref.shape == eps_theta.shape):
        raise ValueError("vector length mismatch")
    return float(np.sum((eps - eps_ref) ** 2) - np.sum((eps - eps_theta) ** 2))


def _log_sigmoid(z: float) -> float:
    # -softplus(-z), safe for |z| up to ~1e308
    if z >= 0:
        return -np.log1p(np.exp(-z))
    return z - np.log1p(np.exp(z))


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + np.exp(-z))
    e = np.exp(z)
    return e / (1.0 + e)


def dpo_loss(sample: DpoSample):
    """Loss and analytic gradients w.r.t. the trained model's predictions.

    loss = -log sigmoid(z), z = beta * (d_w - d_l)
    d/d eps_theta_w = -(1 - sigmoid(z)) * beta * 2 (eps - eps_theta_w)
    d/d eps_theta_l = +(1 - sigmoid(z)) * beta * 2 (eps - eps_theta_l)
    """
    d_w = dpo_implicit_reward(sample.eps, sample.eps_ref_w, sample.eps_theta_w)
    d_l = dpo_implicit_reward(sample.eps, sample.eps_ref_l, sample.eps_theta_l)
    z = sample.beta * (d_w - d_l)
    loss = -_log_sigmoid(z)
    coeff = (1.0 - _sigmoid(z)) * sample.beta * 2.0
    grad_w = -coeff * (sample.eps - sample.eps_theta_w)
    grad_l = coeff * (sample.eps - sample.eps_theta_l)
    return float(loss), grad_w, grad_l


def _tree_sum(values: list):
    """Pairwise tree reduction: bit-stable regardless of chunking."""
    items = list(values)
    if not items:
        raise ValueError("empty reduction")
    while len(items) > 1:
        items = [
            items[i] + items[i + 1] if i + 1 < len(items) else items[i]
            for i in range(0, len(items), 2)
        ]
    return items[0]


def dpo_batch_loss(samples):
    """Mean loss and consistently averaged gradients over a batch.

    Reduction is a pairwise tree sum so the result does not depend on how
    the batch was partitioned across workers.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("empty batch")
    losses, grads_w, grads_l = [], [], []
    for s in samples:
        loss, gw, gl = dpo_loss(s)
        losses.append(loss)
        grads_w.append(gw)
        grads_l.append(gl)
    n = len(samples)
    lengths = {g.shape[0] for g in grads_w}
    if len(lengths) != 1:
        raise ValueError("samples in a batch must share the prediction length")
    return (
        _tree_sum(losses) / n,
        _tree_sum(grads_w) / n,
        _tree_sum(grads_l) / n,
    )


# --- assessor metrics -----------------------------------------------------------

def mae(predictions, labels) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape or p.size == 0:
        raise ValueError("predictions and labels must be equal-length and non-empty")
    return float(np.mean(np.abs(p - y)))


def _fractional_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rho(predictions, labels) -> float:
    """Pearson correlation of fractionally ranked data, in [-1, 1]."""
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError("length mismatch")
    if p.size < 2:
        raise ValueError("need at least 2 points for a correlation")
    rp = _fractional_ranks(p)
    ry = _fractional_ranks(y)
    rp = rp - rp.mean()
    ry = ry - ry.mean()
    denom = np.sqrt((rp**2).sum() * (ry**2).sum())
    if denom == 0.0:
        return 0.0
    return float(np.clip((rp * ry).sum() / denom, -1.0, 1.0))


def overall_score(per_task_scores: dict) -> float:
    """Unweighted mean across tasks."""
    if not per_task_scores:
        raise ValueError("no task scores")
    return float(np.mean(list(per_task_scores.values())))
