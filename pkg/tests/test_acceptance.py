"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line."""

import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conftest import enumerate_auc, grid_project
from robust_aucfair import scorer
from robust_aucfair.aucfair import exact_auc, group_auc_report
from robust_aucfair.cli import SYNTHETIC_PRESETS, load_config, run_once
from robust_aucfair.dataset import Dataset, inject_group_noise, make_synthetic, split, stratified_sample
from robust_aucfair.dro import (GammaRecord, PairDistribution, empirical_pair_weights, estimate_gamma,
                                greedy_tv_max, project_tv_ball, tv_distance)
from robust_aucfair.scorer import MlpParams
from robust_aucfair.trainer import TrainConfig, init_state, lagrangian_value, select_best_iterate, sgda_iteration, train

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture
def verdict(capsys):
    """Print ``[PASS]``/``[FAIL]`` for the criterion, then assert."""
    def emit(label, ok, detail, elapsed=None, limit=None):
        in_time = limit is None or elapsed <= limit
        line = f"[{'PASS' if ok and in_time else 'FAIL'}] {label}: {detail}"
        if elapsed is not None:
            line += f" ({elapsed:.1f}s" + (f" / limit {limit:.0f}s)" if limit else ")")
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
        assert in_time, line
    return emit


def test_c01_auc_oracle_equivalence(verdict):
    g = np.random.default_rng(1)
    t = time.perf_counter()
    mismatches = 0
    for _ in range(1000):
        n_pos, n_neg = g.integers(1, 26, size=2)
        # a small value range forces ties within and across the two sides
        pos = g.integers(0, int(g.integers(2, 8)), size=n_pos).astype(float)
        neg = g.integers(0, int(g.integers(2, 8)), size=n_neg).astype(float)
        for ties in ("strict", "half"):
            mismatches += exact_auc(pos, neg, ties=ties) != enumerate_auc(pos, neg, ties)
    verdict("C1 AUC oracle equivalence", mismatches == 0,
            f"{mismatches} mismatches over 1000 instances x 2 tie rules", time.perf_counter() - t, 5)


def _random_state_and_batch(g):
    d = int(g.integers(2, 5))
    n = int(g.integers(12, 30))
    x = g.normal(size=(n, d))
    labels = np.where(np.arange(n) % 2 == 0, 1, -1)
    groups = 1 + (np.arange(n) // 2) % 2
    ds = Dataset(x, labels, groups, 2, groups.copy())
    batch = stratified_sample(ds, int(g.integers(6, n + 1)), g)
    cfg = TrainConfig(mode="non_robust", sam=False, eta_theta=1.0, gamma=1.0, hidden=(int(g.integers(2, 6)), int(g.integers(2, 5))))
    state = init_state(d, 2, replace(cfg, seed=int(g.integers(1 << 30))))
    state.lambdas = g.exponential(size=(2, 2))
    # the key marks the batch as already seen, so the random p_tilde is kept
    state.batch_key = (batch.pos_idx.tobytes(), batch.neg_idx.tobytes())
    for z in (1, 2):
        for zp in (1, 2):
            ref = empirical_pair_weights(batch.pos_groups, batch.neg_groups, z, zp)
            state.references[(z, zp)] = PairDistribution(ref, (z, zp), reference=True)
            noisy = ref + g.exponential(size=ref.shape) * (g.random(ref.shape) < 0.5)
            state.pair_dists[(z, zp)] = PairDistribution(noisy / noisy.sum(), (z, zp))
    return state, batch, ds.features, cfg


def test_c02_gradient_correctness(verdict):
    g = np.random.default_rng(2)
    t = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        state, batch, features, cfg = _random_state_and_batch(g)
        x = features[np.concatenate([batch.pos_idx, batch.neg_idx])]
        p0 = state.params
        base = p0.flat()
        probe = replace(state, pair_dists=dict(state.pair_dists), lambdas=state.lambdas.copy())

        def value(flat):
            return lagrangian_value(probe, batch, scorer.forward(MlpParams.from_flat(flat, p0.sizes), x))

        fd = np.empty_like(base)
        h = 1e-6
        for i in range(base.size):
            e = np.zeros_like(base)
            e[i] = h
            fd[i] = (value(base + e) - value(base - e)) / (2 * h)
        # with eta_theta = 1 and no perturbation the step is exactly minus the gradient
        stepped = sgda_iteration(state, batch, features, cfg).params.flat()
        analytic = base - stepped
        worst = max(worst, np.linalg.norm(analytic - fd) / max(np.linalg.norm(fd), 1e-12))
    verdict("C2 gradient correctness", worst <= 1e-4, f"max relative error {worst:.2e} over 50 instances",
            time.perf_counter() - t, 30)


def test_c03_projection_correctness(verdict):
    g = np.random.default_rng(3)
    t = time.perf_counter()
    failures = []
    worst_dist = 0.0
    for d in (2, 3, 4):
        for k in range(200):
            p_hat = g.dirichlet(np.ones(d))
            if k % 4 == 0:
                p_hat[g.integers(d)] = 0.0
                p_hat /= p_hat.sum()
            p_tilde = p_hat + g.normal(scale=g.choice([0.05, 0.3, 1.0]), size=d)
            gamma = float(g.uniform(0.0, 0.6))
            q = project_tv_ball(p_tilde, p_hat, gamma)
            feasible = (abs(q.sum() - 1) <= 1e-8 and q.min() >= 0
                        and np.abs(q - p_hat).sum() <= 2 * gamma + 1e-8)
            idempotent = np.max(np.abs(project_tv_ball(q, p_hat, gamma) - q)) <= 1e-9
            dist = float(np.max(np.abs(q - grid_project(p_tilde, p_hat, gamma))))
            worst_dist = max(worst_dist, dist)
            if not (feasible and idempotent and dist <= 2e-3):
                failures.append((d, k))
    verdict("C3 projection correctness", not failures,
            f"{len(failures)} failures over 600 instances, max L-inf to grid optimum {worst_dist:.1e}",
            time.perf_counter() - t, 120)


def test_c04_inner_maximisation_consistency(verdict):
    g = np.random.default_rng(4)
    t = time.perf_counter()
    worst = 0.0
    for k in range(50):
        d = int(g.integers(2, 10))
        p_hat = g.dirichlet(np.ones(d))
        if k % 3 == 0:
            p_hat[g.integers(d)] = 0.0
            p_hat /= p_hat.sum()
        values = g.random(d)
        gamma = float(g.uniform(0.01, 0.6))
        q = p_hat.copy()
        for _ in range(500):
            nxt = project_tv_ball(q + 0.5 * values, p_hat, gamma)
            done = np.max(np.abs(nxt - q)) <= 1e-15
            q = nxt
            if done:
                break
        best, _ = greedy_tv_max(p_hat, values, gamma)
        worst = max(worst, abs(float(q @ values) - best))
    verdict("C4 inner maximisation consistency", worst <= 1e-4,
            f"max |ascent - closed form| {worst:.2e} over 50 instances", time.perf_counter() - t, 60)


def _flip_joint(pi, g):
    """Joint of (clean, noisy) labels with both marginals equal to ``pi``.

    Mass is moved off the diagonal along random cycles, which keeps every row
    and column sum fixed.
    """
    m = pi.size
    joint = np.diag(pi).astype(float)
    for _ in range(int(g.integers(1, 4))):
        cycle = g.permutation(m)[: int(g.integers(2, m + 1))]
        room = min(joint[c, c] for c in cycle)
        amount = g.uniform(0, 0.9) * room
        for a, b in zip(cycle, np.roll(cycle, -1)):
            joint[a, a] -= amount
            joint[a, b] += amount
    return joint


def test_c05_noise_bound_on_pair_distributions(verdict):
    g = np.random.default_rng(5)
    t = time.perf_counter()
    worst_margin = -np.inf
    for _ in range(200):
        m = int(g.integers(2, 4))
        j_pos = _flip_joint(g.dirichlet(np.ones(m)), g)
        j_neg = _flip_joint(g.dirichlet(np.ones(m)), g)
        # pair-level joint over ((z, z'), (z_hat, z'_hat)), indexed [z, z', z_hat, z'_hat]
        joint = np.einsum("ac,bd->abcd", j_pos, j_neg)
        cells = int(g.integers(2, 7))
        # distribution of a pair's features given clean and noisy pair groups
        cond = g.dirichlet(np.ones(cells), size=(m, m, m, m))
        for z in range(m):
            for zp in range(m):
                clean_mass = joint[z, zp].sum()
                noisy_mass = joint[:, :, z, zp].sum()
                p = np.einsum("cd,cdx->x", joint[z, zp], cond[z, zp]) / clean_mass
                p_hat = np.einsum("ab,abx->x", joint[:, :, z, zp], cond[:, :, z, zp]) / noisy_mass
                flip = 1.0 - joint[z, zp, z, zp] / noisy_mass
                worst_margin = max(worst_margin, tv_distance(p, p_hat) - flip)
    verdict("C5 TV bounded by conditional flip rate", worst_margin <= 1e-12,
            f"max TV - flip rate {worst_margin:.2e} over 200 joints", time.perf_counter() - t, 60)


def test_c06_noisy_feasibility_bounds_clean_gap(verdict):
    rho, tau = 0.1, 0.02
    bound = rho + tau + 0.02
    t = time.perf_counter()
    worst, infeasible = -np.inf, []
    for seed in range(10):
        ds = make_synthetic(**{**SYNTHETIC_PRESETS["default"], "n": 4000}, seed=seed)
        tr, va, _ = split(ds, seed=seed)
        tr = inject_group_noise(tr, rho, [seed, 0])
        va = inject_group_noise(va, rho, [seed, 1])
        res = train(tr, va, TrainConfig(mode="non_robust", epochs=100, batch_size=400, seed=seed, tau=tau))
        best = select_best_iterate(res.history)
        if not best.feasible:
            infeasible.append(seed)
            continue
        scores = scorer.forward(res.state.snapshots[best.epoch], va.features)
        clean = group_auc_report(scores, va.labels, va.clean_groups, 2)
        worst = max(worst, clean.max_gap())
    ok = not infeasible and worst <= bound
    verdict("C6 clean gap within noise slack", ok,
            f"max clean gap {worst:.4f} <= {bound:.2f}, seeds never feasible: {infeasible or 'none'}",
            time.perf_counter() - t, 600)


def test_c07_reduction_identities(verdict):
    ds = make_synthetic(600, gap=1.0, seed=0)
    tr, va, _ = split(ds, seed=0)
    base = dict(epochs=8, batch_size=120, seed=3)
    t = time.perf_counter()
    robust0 = train(tr, va, TrainConfig(mode="robust", gamma=0.0, **base)).history
    plain = train(tr, va, TrainConfig(mode="non_robust", gamma=0.0, **base)).history
    metric_diff = max(abs(getattr(a, k) - getattr(b, k)) for a, b in zip(robust0, plain)
                      for k in ("auc", "violation", "min_max", "objective"))
    nu0 = train(tr, va, TrainConfig(mode="robust", nu=0.0, **base)).history
    no_sam = train(tr, va, TrainConfig(mode="robust", nu=0.0, sam=False, **base)).history
    bitwise = [a.to_json() for a in nu0] == [b.to_json() for b in no_sam]
    auc_max = train(tr, va, TrainConfig(mode="auc_max", **base)).history
    lam_zero = all(not np.any(h.lambdas) for h in auc_max)
    ok = len(robust0) == len(plain) and metric_diff <= 1e-9 and bitwise and lam_zero
    verdict("C7 reduction identities", ok,
            f"gamma=0 metric diff {metric_diff:.1e}, nu=0 history bitwise {bitwise}, auc_max lambda==0 {lam_zero}",
            time.perf_counter() - t, 120)


def _enumerate_gamma(records, m):
    out = np.full((m, m), np.nan)
    for z in range(1, m + 1):
        for zp in range(1, m + 1):
            pos = [r for r in records if r.label == 1 and r.group == z]
            neg = [r for r in records if r.label == -1 and r.group == zp]
            if pos and neg:
                flagged = sum(not (a.clean and b.clean) for a in pos for b in neg)
                out[z - 1, zp - 1] = flagged / (len(pos) * len(neg))
    return out


def test_c08_gamma_estimator(verdict):
    g = np.random.default_rng(8)
    t = time.perf_counter()
    worst = 0.0
    for k in range(100):
        m = int(g.integers(1, 4))
        n = int(g.integers(1, 40))
        records = [GammaRecord(str(i), int(g.choice([1, -1])), int(g.integers(1, m + 1)),
                               float(g.integers(0, 4)), float(g.integers(0, 4))) for i in range(n)]
        got = estimate_gamma(records, m).values
        want = _enumerate_gamma(records, m)
        assert np.array_equal(np.isnan(got), np.isnan(want))
        mask = ~np.isnan(want)
        if mask.any():
            worst = max(worst, float(np.max(np.abs(got[mask] - want[mask]))))
    hand = [GammaRecord("0", 1, 1, 0.8, 0.5), GammaRecord("1", 1, 1, 0.2, 0.5),
            GammaRecord("2", -1, 2, 0.8, 0.5), GammaRecord("3", -1, 2, 0.2, 0.5)]
    hand_value = estimate_gamma(hand, 2).values[0, 1]
    ok = worst <= 1e-12 and hand_value == 0.75
    verdict("C8 gamma estimator", ok, f"max |closed form - enumeration| {worst:.1e}, hand example {hand_value}",
            time.perf_counter() - t, 5)


def _violations(cfg, mode, noise, seeds):
    reports = [run_once(cfg, mode, noise, s, None).report for s in seeds]
    return np.array([r["violation"] for r in reports]), np.array([r["overall_auc"] for r in reports])


@pytest.mark.slow
def test_c09_adult_reproduction(verdict):
    cfg = load_config(CONFIGS / "adult.yaml")
    seeds = [cfg.seed + r for r in range(cfg.repetitions)]
    t = time.perf_counter()
    rob_v, rob_auc = _violations(cfg, "robust", 0.1, seeds)
    max_v, max_auc = _violations(cfg, "auc_max", 0.1, seeds)
    ok = rob_v.mean() <= 0.06 and rob_auc.mean() >= 0.86 and bool(np.all(rob_v < max_v))
    verdict("C9 Adult noise 0.1", ok,
            f"robust violation {rob_v.mean():.4f} auc {rob_auc.mean():.4f}; per seed robust "
            f"{np.round(rob_v, 4).tolist()} vs auc_max {np.round(max_v, 4).tolist()} (auc {max_auc.mean():.4f})",
            time.perf_counter() - t, 1800)


@pytest.mark.slow
def test_c10_noise_robustness_trend(verdict):
    cfg = load_config(CONFIGS / "default_synthetic.yaml")
    seeds = [cfg.seed + r for r in range(cfg.repetitions)]
    levels = cfg.noise.levels
    assert levels == [0.1, 0.3, 0.5]
    t = time.perf_counter()
    robust = np.array([_violations(cfg, "robust", lv, seeds)[0].mean() for lv in levels])
    auc_max = np.array([_violations(cfg, "auc_max", lv, seeds)[0].mean() for lv in levels])
    rise = max(robust[j] - robust[i] for i in range(len(levels)) for j in range(i + 1, len(levels)))
    ok = bool(np.all(robust < auc_max)) and rise <= 0.03
    verdict("C10 noise robustness trend", ok,
            f"robust {np.round(robust, 4).tolist()} vs auc_max {np.round(auc_max, 4).tolist()}, "
            f"max increase {max(rise, 0.0):.4f}", time.perf_counter() - t, 2700)
