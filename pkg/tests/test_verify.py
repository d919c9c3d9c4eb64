import math
from fractions import Fraction

import numpy as np
import pytest
from scipy import stats

from encloop import verify
from encloop.backend import BackendConfig, context_create, pad_slots
from encloop.control import (
    TANK_X0,
    quadruple_tank,
    run_closed_loop,
    tank_controller,
)
from encloop.attack import AttackPlan, GuessingAttacker
from encloop.linalg import enc_matvec, encrypt_matrix
from encloop.verify import (
    attacker_guess_and_inject,
    block_mask,
    dcd,
    ecd,
    guess_blocks,
    lift_affine,
    lifted_input,
    p_succ_cumulative,
    p_succ_instant,
    run_detection_experiment,
    setup,
)


def doubler(x):
    return 2.0 * np.asarray(x, dtype=float)


def make_vctx(expansion=4, block_dim=2, slot_count=16, seed=0, **kw):
    return setup(slot_count, block_dim, doubler, expansion,
                 num_challenges=5, seed=seed, **kw)


class TestSetup:
    def test_odd_expansion_rejected(self):
        with pytest.raises(ValueError):
            make_vctx(expansion=3)

    def test_capacity_check(self):
        with pytest.raises(ValueError):
            setup(8, 4, doubler, 4, num_challenges=2)

    def test_challenges_precomputed(self):
        vctx = make_vctx()
        assert len(vctx.challenges) == 5
        for c, out in zip(vctx.challenges, vctx.challenge_outputs):
            assert np.allclose(out, 2 * c, atol=1e-15)


class TestEncodeDecode:
    def test_round_trip_honest_server(self):
        vctx = make_vctx()
        w = np.array([1.5, -2.5])
        encoded, tag = ecd(vctx, w)
        assert len(encoded) == 8
        outcome = dcd(vctx, tag, doubler(encoded))
        assert outcome.ok
        assert np.allclose(outcome.payload, 2 * w, atol=1e-12)

    def test_forced_permutation_layout(self):
        vctx = make_vctx()
        w = np.array([1.0, 2.0])
        encoded, tag = ecd(vctx, w, perm=[2, 0, 3, 1], challenge_indices=[0, 1])
        # encoded block j carries pre-shuffle block perm[j]
        assert np.array_equal(encoded[0:2], vctx.challenges[0])
        assert np.array_equal(encoded[2:4], w)
        assert np.array_equal(encoded[4:6], vctx.challenges[1])
        assert np.array_equal(encoded[6:8], w)
        assert tag.payload_positions() == {1, 3}

    def test_challenges_drawn_with_replacement(self):
        vctx = make_vctx(expansion=16, block_dim=1, slot_count=16, seed=1)
        seen_repeat = False
        for _ in range(50):
            _, tag = ecd(vctx, np.zeros(1))
            if len(set(tag.challenge_indices)) < len(tag.challenge_indices):
                seen_repeat = True
                break
        assert seen_repeat

    def test_permutation_fresh_each_step(self):
        vctx = make_vctx(expansion=8, block_dim=2)
        perms = {tuple(ecd(vctx, np.zeros(2))[1].perm) for _ in range(30)}
        assert len(perms) > 1

    def test_tampered_challenge_rejected(self):
        vctx = make_vctx()
        encoded, tag = ecd(vctx, np.array([1.0, 2.0]))
        z = doubler(encoded)
        victim = next(j for j in range(4) if j not in tag.payload_positions())
        z[victim * 2] += 1.0
        outcome = dcd(vctx, tag, z)
        assert outcome.bottom
        assert not outcome.ok
        assert outcome.failed_challenges

    def test_payload_only_tampering_accepted_but_corrupt(self):
        # hitting exactly the replica blocks evades the check by design
        vctx = make_vctx(seed=3)
        w = np.array([1.0, 2.0])
        encoded, tag = ecd(vctx, w)
        z = doubler(encoded)
        for j in tag.payload_positions():
            z[j * 2: j * 2 + 2] += 5.0
        outcome = dcd(vctx, tag, z)
        assert outcome.ok
        assert np.allclose(outcome.payload, 2 * w + 5.0, atol=1e-12)

    def test_threshold_tolerates_small_noise(self):
        vctx = make_vctx(threshold=1e-3)
        encoded, tag = ecd(vctx, np.zeros(2))
        z = doubler(encoded) + 1e-4
        assert dcd(vctx, tag, z).ok

    def test_length_checks(self):
        vctx = make_vctx()
        with pytest.raises(ValueError):
            ecd(vctx, np.zeros(3))
        _, tag = ecd(vctx, np.zeros(2))
        with pytest.raises(ValueError):
            dcd(vctx, tag, np.zeros(7))


class TestAffineLift:
    def test_tank_controller_lift(self):
        ctrl = tank_controller()
        K_aug, K_lifted, band = lift_affine(-ctrl.K, ctrl.u0, expansion=4)
        assert K_aug.shape == (4, 4)
        assert band == 3
        assert K_lifted.shape == (16, 16)
        y = np.array([0.7, -0.3])
        w = lifted_input(y, ctrl.u0, 4)
        assert np.allclose((K_aug @ w)[:2], -ctrl.K @ y + ctrl.u0, atol=1e-12)

    def test_lift_replicates_blockwise(self):
        rng = np.random.default_rng(5)
        K = rng.uniform(-2, 2, (2, 2))
        off = rng.uniform(-1, 1, 2)
        K_aug, K_lifted, _ = lift_affine(K, off, expansion=2)
        w1 = lifted_input(rng.uniform(-1, 1, 2), off, 4)
        w2 = lifted_input(rng.uniform(-1, 1, 2), off, 4)
        stacked = np.concatenate([w1, w2])
        out = K_lifted @ stacked
        assert np.allclose(out[:4], K_aug @ w1, atol=1e-12)
        assert np.allclose(out[4:], K_aug @ w2, atol=1e-12)

    def test_encrypted_lifted_evaluation(self):
        # full pipeline: encode -> encrypt -> banded lifted matvec -> decode
        ctrl = tank_controller()
        K_aug, K_lifted, band = lift_affine(-ctrl.K, ctrl.u0, expansion=4)
        vctx = setup(16, 4, lambda w: K_aug @ w, 4, num_challenges=3, seed=7)
        ctx = context_create(BackendConfig(slot_count=16, max_depth=4, seed=7))
        enc_K = encrypt_matrix(ctx, K_lifted, band=band)
        y = np.array([0.9, 1.1])
        encoded, tag = ecd(vctx, lifted_input(y, ctrl.u0, 4))
        z = ctx.decrypt(enc_matvec(enc_K, ctx.encrypt(encoded)))
        outcome = dcd(vctx, tag, z)
        assert outcome.ok
        assert np.allclose(outcome.payload[:2], -ctrl.K @ y + ctrl.u0, atol=1e-9)


class TestSuccessProbabilities:
    def test_instant_values(self):
        assert p_succ_instant(2) == 0.5
        assert p_succ_instant(4) == 1 / 6
        assert p_succ_instant(8) == 1 / 70
        assert p_succ_instant(16) == 1 / 12870

    def test_cumulative_is_geometric(self):
        for lam in (2, 4, 8):
            for L in (1, 3, 10):
                assert p_succ_cumulative(lam, L) == pytest.approx(
                    p_succ_instant(lam) ** L, rel=1e-15)

    def test_security_bound_exact(self):
        # 1/C(lam, lam/2) <= 2^{-lam/2}, equality only at lam = 2
        for lam in range(2, 66, 2):
            p = Fraction(1, math.comb(lam, lam // 2))
            bound = Fraction(1, 2 ** (lam // 2))
            assert p <= bound
            assert (p == bound) == (lam == 2)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            p_succ_instant(3)
        with pytest.raises(ValueError):
            p_succ_cumulative(4, 0)


class TestGuessing:
    def test_guess_is_half_subset(self):
        rng = np.random.default_rng(0)
        for lam in (2, 4, 8):
            g = guess_blocks(lam, rng)
            assert len(g) == lam // 2
            assert all(0 <= b < lam for b in g)

    def test_guess_uniformity(self):
        rng = np.random.default_rng(1)
        counts = {}
        n = 60_000
        for _ in range(n):
            g = guess_blocks(4, rng)
            counts[g] = counts.get(g, 0) + 1
        assert len(counts) == 6
        obs = np.array(list(counts.values()))
        assert stats.chisquare(obs).pvalue > 0.001

    def test_block_mask(self):
        mask = block_mask(4, 2, 16, {1, 3}, [5.0, 6.0])
        expected = np.zeros(16)
        expected[2:4] = [5, 6]
        expected[6:8] = [5, 6]
        assert np.array_equal(mask, expected)

    def test_inject_uses_public_capability(self):
        ctx = context_create(BackendConfig(slot_count=8, max_depth=4, seed=9))
        pub = ctx.public_context()
        c = ctx.encrypt(np.zeros(8))
        # re-encrypt through the public context so the attacker path is honest
        blob_ctx_c = pub.encrypt(ctx.decrypt(c) * 0)  # fresh zeros via pub
        out, guess = attacker_guess_and_inject(4, 2, blob_ctx_c, [1.0, 1.0],
                                               np.random.default_rng(2))
        dec = ctx.decrypt(out)
        hit = {b for b in range(4) if np.any(dec[b * 2:(b + 1) * 2] != 0)}
        assert hit == guess


class TestDetectionExperiment:
    def test_fast_matches_instant_probability(self):
        res = run_detection_experiment(4, 1, 200_000, mode="fast", seed=0)
        undetected = res["undetected_fraction"]
        assert abs(undetected - p_succ_instant(4)) < 0.01
        assert abs(res["fractions"][1] - (1 - p_succ_instant(4))) < 0.01

    def test_fast_geometric_law(self):
        lam, L, trials = 2, 10, 200_000
        res = run_detection_experiment(lam, L, trials, mode="fast", seed=1)
        p = p_succ_instant(lam)
        expected = np.array([trials * p ** (k - 1) * (1 - p) for k in range(1, L + 1)]
                            + [trials * p ** L])
        observed = np.array([res["counts"][k] for k in range(1, L + 1)]
                            + [res["undetected"]])
        assert stats.chisquare(observed, expected).pvalue > 0.01

    def test_full_mode_agrees_with_fast(self):
        fast = run_detection_experiment(4, 3, 4000, mode="fast", seed=2)
        full = run_detection_experiment(4, 3, 4000, mode="full", seed=2)
        for k in (1, 2, 3):
            assert abs(fast["fractions"][k] - full["fractions"][k]) < 0.04

    def test_counts_conserve_trials(self):
        res = run_detection_experiment(8, 5, 10_000, mode="fast", seed=3)
        assert sum(res["counts"].values()) + res["undetected"] == 10_000

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            run_detection_experiment(4, 2, 10, mode="medium")


class TestVerifiedClosedLoop:
    def test_honest_loop_never_trips(self):
        model, ctrl = quadruple_tank(), tank_controller()
        ctx = context_create(BackendConfig(slot_count=64, max_depth=4, seed=11))
        K_aug, K_lifted, band = lift_affine(-ctrl.K, ctrl.u0, expansion=4)
        vctx = setup(64, 4, lambda w: K_aug @ w, 4, num_challenges=8, seed=11)
        trace = run_closed_loop(model, ctrl, TANK_X0, 100, pre_roll=20,
                                mode="encrypted", ctx=ctx, verifier=vctx)
        assert all(v != "bottom" for v in trace.verdict)
        plain = run_closed_loop(model, ctrl, TANK_X0, 100, pre_roll=20)
        assert np.max(np.abs(np.array(trace.x) - np.array(plain.x))) < 1e-8

    def test_guessing_attacker_detected_quickly(self):
        model, ctrl = quadruple_tank(), tank_controller()
        ctx = context_create(BackendConfig(slot_count=64, max_depth=4, seed=12))
        K_aug, K_lifted, band = lift_affine(-ctrl.K, ctrl.u0, expansion=8)
        vctx = setup(64, 4, lambda w: K_aug @ w, 8, num_challenges=8, seed=12)
        plan = AttackPlan(schedule={k: np.array([2.0, 2.0]) for k in range(5)},
                          length=10, cooldown_len=4)
        attacker = GuessingAttacker(model, plan, ctx.public_context(), 8, 4,
                                    np.random.default_rng(12))
        trace = run_closed_loop(model, ctrl, TANK_X0, 40, pre_roll=20,
                                mode="encrypted", ctx=ctx, verifier=vctx,
                                attacker=attacker)
        # p_succ(8) = 1/70 per step: detection at the very first tampered step
        # is overwhelmingly likely, and the loop halts on bottom
        assert trace.verdict[-1] == "bottom"
        assert trace.k[-1] < 10
