import numpy as np
import pytest
from scipy import stats

from tripletforge.preference import (
    DpoSample,
    PreferencePair,
    ScoredCandidate,
    distilled_pairs,
    dominates,
    dpo_batch_loss,
    dpo_implicit_reward,
    dpo_loss,
    mae,
    overall_score,
    spearman_rho,
    strict_dominance_pairs,
    symmetric_pairs,
)
from tripletforge.records import AssessorScore


def cand(i, adherence, aesthetic, source="on-policy"):
    return ScoredCandidate(f"c{i}", AssessorScore(adherence, aesthetic), source)


def brute_force_pairs(candidates):
    pairs = set()
    for w in candidates:
        for l in candidates:
            if w.triplet_id == l.triplet_id:
                continue
            if (
                w.scores.instruction_adherence > l.scores.instruction_adherence
                and w.scores.aesthetic > l.scores.aesthetic
            ):
                pairs.add((w.triplet_id, l.triplet_id))
    return pairs


# --- strict dominance --------------------------------------------------------------

def test_dominance_example_from_three_candidates():
    candidates = [cand(0, 4, 4), cand(1, 3, 5), cand(2, 2, 2)]
    pairs = strict_dominance_pairs(candidates, "ctx")
    got = {(p.winner_id, p.loser_id) for p in pairs}
    assert got == {("c0", "c2"), ("c1", "c2")}


def test_dominance_all_equal_scores():
    candidates = [cand(i, 3.3, 3.3) for i in range(4)]
    assert strict_dominance_pairs(candidates) == []


def test_dominance_single_criterion_tie_vetoes():
    assert strict_dominance_pairs([cand(0, 5, 5), cand(1, 5, 4)]) == []
    assert strict_dominance_pairs([cand(0, 4, 5), cand(1, 3, 5)]) == []


def test_dominance_matches_brute_force_oracle(rng):
    for _ in range(100):
        n = int(rng.integers(2, 50))
        candidates = [
            cand(i, float(rng.uniform(0, 5)), float(rng.uniform(0, 5))) for i in range(n)
        ]
        got = {(p.winner_id, p.loser_id) for p in strict_dominance_pairs(candidates)}
        assert got == brute_force_pairs(candidates)


def test_dominance_irreflexive_asymmetric(rng):
    candidates = [cand(i, float(rng.uniform(0, 5)), float(rng.uniform(0, 5))) for i in range(30)]
    got = {(p.winner_id, p.loser_id) for p in strict_dominance_pairs(candidates)}
    for w, l in got:
        assert w != l
        assert (l, w) not in got


def test_dominance_translation_invariant(rng):
    base = [(float(rng.uniform(0, 3)), float(rng.uniform(0, 3))) for _ in range(20)]
    before = strict_dominance_pairs([cand(i, a, s) for i, (a, s) in enumerate(base)])
    shifted = strict_dominance_pairs([cand(i, a + 1.5, s + 1.5) for i, (a, s) in enumerate(base)])
    assert [(p.winner_id, p.loser_id) for p in before] == [
        (p.winner_id, p.loser_id) for p in shifted
    ]


def test_pair_type_invariants():
    with pytest.raises(ValueError):
        PreferencePair("same", "same", "ctx")
    with pytest.raises(ValueError):
        PreferencePair("a", "b", "ctx", origin="bogus")


# --- symmetric pairs ------------------------------------------------------------------

def test_symmetric_two_instructions():
    pairs, skipped = symmetric_pairs(["c1", "c2"], ["y1", "y2"], np.ones((2, 2), bool))
    assert skipped == []
    got = {(p.context_id, p.winner_id, p.loser_id) for p in pairs}
    assert got == {("c1", "y1", "y2"), ("c2", "y2", "y1")}


def test_symmetric_m3_gives_6():
    pairs, _ = symmetric_pairs(
        ["c1", "c2", "c3"], ["y1", "y2", "y3"], np.ones((3, 3), bool)
    )
    assert len(pairs) == 6  # m(m-1) enumeration oracle
    assert all(p.origin == "symmetric" for p in pairs)


def test_symmetric_single_instruction_no_pairs():
    pairs, _ = symmetric_pairs(["c1"], ["y1"], [[True]])
    assert pairs == []


def test_symmetric_failed_diagonal_skips_context():
    verdicts = np.ones((3, 3), bool)
    verdicts[1, 1] = False
    pairs, skipped = symmetric_pairs(["c1", "c2", "c3"], ["y1", "y2", "y3"], verdicts)
    assert skipped == [("c2", "assessor-failed")]
    got = {(p.context_id, p.winner_id, p.loser_id) for p in pairs}
    assert got == {("c1", "y1", "y3"), ("c3", "y3", "y1")}


def test_symmetric_counts_survivors(rng):
    for m in range(1, 11):
        pairs, _ = symmetric_pairs(
            [f"c{i}" for i in range(m)], [f"y{i}" for i in range(m)], np.ones((m, m), bool)
        )
        assert len(pairs) == m * (m - 1)


def test_symmetric_shape_validation():
    with pytest.raises(ValueError):
        symmetric_pairs(["c1"], ["y1", "y2"], np.ones((2, 2), bool))
    with pytest.raises(ValueError):
        symmetric_pairs(["c1", "c2"], ["y1", "y2"], np.ones((2, 3), bool))


# --- distilled pairs ---------------------------------------------------------------------

def test_distilled_teacher_wins():
    pairs = distilled_pairs([cand(0, 4.5, 4.5, "teacher")], [cand(1, 3, 3)], "ctx")
    assert len(pairs) == 1
    assert pairs[0].winner_id == "c0" and pairs[0].origin == "distilled"


def test_distilled_guard_against_dominating_student():
    pairs = distilled_pairs([cand(0, 4, 4, "teacher")], [cand(1, 5, 5)], "ctx")
    assert pairs == []


def test_distilled_no_students():
    assert distilled_pairs([cand(0, 4, 4, "teacher")], [], "ctx") == []


def test_distilled_requires_teacher_tag():
    with pytest.raises(ValueError):
        distilled_pairs([cand(0, 4, 4, "on-policy")], [cand(1, 3, 3)])


def test_distilled_tie_is_not_dominance():
    # student ties one criterion: guard only fires on strict dominance
    pairs = distilled_pairs([cand(0, 4, 4, "teacher")], [cand(1, 4, 5)], "ctx")
    assert len(pairs) == 1


# --- implicit reward ---------------------------------------------------------------------

def test_reward_zero_when_predictions_match():
    eps = np.array([1.0, 2.0])
    assert dpo_implicit_reward(eps, eps + 0.5, eps + 0.5) == 0.0


def test_reward_positive_for_perfect_model():
    eps = np.array([1.0, 0.0])
    ref = np.array([0.0, 0.0])
    assert dpo_implicit_reward(eps, ref, eps) == pytest.approx(1.0)


def test_reward_hand_arithmetic():
    # |e - ref|^2 - |e - theta|^2 = 1 - 0.25 = 0.75, verified by brute force
    eps = np.array([1.0, 0.0])
    ref = np.array([0.0, 0.0])
    theta = np.array([0.5, 0.0])
    brute = sum((e - r) ** 2 for e, r in zip(eps, ref)) - sum(
        (e - t) ** 2 for e, t in zip(eps, theta)
    )
    assert brute == 0.75
    assert dpo_implicit_reward(eps, ref, theta) == pytest.approx(0.75)


def test_reward_length_mismatch():
    with pytest.raises(ValueError):
        dpo_implicit_reward(np.ones(3), np.ones(2), np.ones(3))


# --- loss ---------------------------------------------------------------------------------

def sample_with_gap(gap: float, beta: float = 1.0, dim: int = 4, seed: int = 0) -> DpoSample:
    """Sample whose reward difference d_w - d_l equals `gap` exactly.

    With theta = eps, d = |eps - ref|^2, so shifting one reference
    coordinate by sqrt(|gap|) puts the whole gap on the chosen side.
    """
    rng = np.random.default_rng(seed)
    eps = rng.normal(size=dim)
    theta_w = eps.copy()
    theta_l = eps.copy()
    ref_w = eps.copy()
    ref_l = eps.copy()
    if gap >= 0:
        ref_w[0] += np.sqrt(gap)
    else:
        ref_l[0] += np.sqrt(-gap)
    return DpoSample(eps, ref_w, theta_w, ref_l, theta_l, beta)


def test_loss_ln2_at_equal_rewards():
    sample = sample_with_gap(0.0)
    loss, _, _ = dpo_loss(sample)
    assert loss == pytest.approx(np.log(2.0), abs=1e-9)


def test_loss_known_value_high_precision():
    # beta = 0.5, d_w - d_l = 2 -> -log sigmoid(1), 50-digit oracle
    from mpmath import mp, log, exp

    mp.dps = 50
    expected = float(-log(1 / (1 + exp(-1))))
    sample = sample_with_gap(2.0, beta=0.5)
    loss, _, _ = dpo_loss(sample)
    assert loss == pytest.approx(expected, abs=1e-6)
    assert loss == pytest.approx(0.313262, abs=1e-6)


def test_loss_extreme_z_stable():
    big = sample_with_gap(1e4, beta=1.0)
    loss, gw, gl = dpo_loss(big)
    assert loss == 0.0 or loss < 1e-300
    assert np.isfinite(loss) and np.isfinite(gw).all() and np.isfinite(gl).all()
    small = sample_with_gap(-1e4, beta=1.0)
    loss, gw, gl = dpo_loss(small)
    assert loss == pytest.approx(1e4, rel=1e-9)
    assert np.isfinite(loss) and np.isfinite(gw).all() and np.isfinite(gl).all()


def test_loss_strictly_decreasing_in_gap():
    gaps = (-3.0, -1.0, 0.0, 1.0, 3.0)
    losses = [dpo_loss(sample_with_gap(g, beta=0.7))[0] for g in gaps]
    assert all(losses[i] > losses[i + 1] for i in range(len(losses) - 1))
    assert all(v >= 0 for v in losses)


def test_loss_rejects_non_finite():
    with pytest.raises(ValueError):
        DpoSample(np.array([np.nan]), np.ones(1), np.ones(1), np.ones(1), np.ones(1), 0.1)


def random_sample(rng, dim=6) -> DpoSample:
    return DpoSample(
        rng.normal(size=dim),
        rng.normal(size=dim),
        rng.normal(size=dim),
        rng.normal(size=dim),
        rng.normal(size=dim),
        beta=float(rng.uniform(0.05, 2.0)),
    )


def test_gradients_match_central_finite_differences(rng):
    step = 1e-5
    for _ in range(100):
        sample = random_sample(rng)
        _, grad_w, grad_l = dpo_loss(sample)
        for attr, grad in (("eps_theta_w", grad_w), ("eps_theta_l", grad_l)):
            base = getattr(sample, attr)
            for k in range(len(base)):
                bumped_plus = base.copy()
                bumped_plus[k] += step
                bumped_minus = base.copy()
                bumped_minus[k] -= step
                kwargs = {
                    name: getattr(sample, name)
                    for name in ("eps", "eps_ref_w", "eps_theta_w", "eps_ref_l", "eps_theta_l")
                }
                kwargs["beta"] = sample.beta
                kwargs[attr] = bumped_plus
                up = dpo_loss(DpoSample(**kwargs))[0]
                kwargs[attr] = bumped_minus
                down = dpo_loss(DpoSample(**kwargs))[0]
                fd = (up - down) / (2 * step)
                scale = max(abs(fd), abs(grad[k]), 1e-8)
                assert abs(fd - grad[k]) / scale <= 1e-6


def test_batch_of_identical_samples(rng):
    sample = random_sample(rng)
    single = dpo_loss(sample)
    mean_loss, gw, gl = dpo_batch_loss([sample] * 5)
    assert mean_loss == pytest.approx(single[0], rel=1e-12)
    assert np.allclose(gw, single[1]) and np.allclose(gl, single[2])


def test_batch_matches_per_sample_average(rng):
    samples = [random_sample(rng) for _ in range(7)]
    mean_loss, gw, gl = dpo_batch_loss(samples)
    per = [dpo_loss(s) for s in samples]
    assert mean_loss == pytest.approx(np.mean([p[0] for p in per]), rel=1e-12)
    assert np.allclose(gw, np.mean([p[1] for p in per], axis=0))
    assert np.allclose(gl, np.mean([p[2] for p in per], axis=0))


def test_batch_rejects_empty():
    with pytest.raises(ValueError):
        dpo_batch_loss([])


# --- metrics -------------------------------------------------------------------------------

def test_mae_and_rho_perfect():
    predictions = [1.0, 2.0, 3.0, 4.0]
    assert mae(predictions, predictions) == 0.0
    assert spearman_rho(predictions, predictions) == pytest.approx(1.0)


def test_rho_reversed_is_minus_one():
    assert spearman_rho([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)


def test_mae_two_terms():
    assert mae([1, 2], [2, 4]) == pytest.approx(1.5)


def test_rho_matches_scipy_with_ties(rng):
    for _ in range(50):
        n = int(rng.integers(3, 40))
        p = rng.integers(0, 6, size=n).astype(float)  # plenty of ties
        y = rng.integers(0, 6, size=n).astype(float)
        if len(set(p)) < 2 or len(set(y)) < 2:
            continue
        expected = stats.spearmanr(p, y).statistic
        assert spearman_rho(p, y) == pytest.approx(expected, abs=1e-12)


def test_rho_invariant_under_monotone_transform(rng):
    p = rng.normal(size=30)
    y = rng.normal(size=30)
    base = spearman_rho(p, y)
    assert spearman_rho(np.exp(p), y) == pytest.approx(base, abs=1e-12)
    assert spearman_rho(p, 3 * y + 7) == pytest.approx(base, abs=1e-12)


def test_metric_input_validation():
    with pytest.raises(ValueError):
        mae([1, 2], [1])
    with pytest.raises(ValueError):
        spearman_rho([1], [1])


# --- overall score ---------------------------------------------------------------------------

def test_overall_single_task():
    assert overall_score({"add": 4.2}) == pytest.approx(4.2)


def test_overall_reported_editor_row():
    scores = {
        "add": 3.89, "adjust": 4.22, "extract": 2.90, "replace": 4.34, "remove": 4.42,
        "background": 4.22, "style": 4.40, "hybrid": 3.52, "action": 2.75,
    }
    assert overall_score(scores) == pytest.approx(3.85, abs=0.01)


def test_overall_two_tasks():
    assert overall_score({"a": 1.0, "b": 5.0}) == pytest.approx(3.0)


def test_overall_empty_errors():
    with pytest.raises(ValueError):
        overall_score({})
