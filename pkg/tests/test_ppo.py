"""Surrogate-loss arithmetic, joint design updates, and evaluation protocol."""

import math

import numpy as np
import pytest

from ccdtwin import dynamics as dyn
from ccdtwin import envsim as sim
from ccdtwin import ppo
from ccdtwin import tensorgrad as tg


def illustrative_design(p=1.0):
    return dyn.DesignParams(names=("p",), lower=np.array([0.5]),
                            upper=np.array([2.0]), values=np.array([p]))


def make_agent(seed=0, p=1.0):
    return ppo.build_agent(illustrative_design(p), state_dim=2,
                           hidden=[32, 32, 16, 16],
                           tanh_flags=[True, False, False, False, False],
                           action_scale=1.0, u_low=-1.0, u_high=1.0,
                           rng=np.random.default_rng(seed))


def make_env(design, noise=False):
    plant = dyn.illustrative_plant(design.values[0])
    spec = sim.RewardSpec(Q=np.eye(2), r_u=0.1)
    sampler = sim.gaussian_state_noise(np.array([0.01, 0.01])) if noise else None
    return sim.NominalEnv(plant, spec, u_low=-1.0, u_high=1.0,
                          w_sampler=sampler)


def frozen_minibatch(agent, n=64, seed=3):
    rng = np.random.default_rng(seed)
    env = make_env(agent.design)
    X0 = sim.sample_box(rng, np.array([-2.0, -2.0]), np.array([2.0, 2.0]), 8)
    eps = sim.rollout_batch(env, agent, X0, 8, rng)
    batch = sim.TransitionBatch.build(eps, agent.design_norm, 0.99, 0.95)
    sel = np.arange(min(n, len(batch)))
    return ppo.Minibatch(states=batch.states[sel], actions=batch.actions[sel],
                         log_probs_old=batch.log_probs_old[sel],
                         advantages=batch.advantages[sel],
                         returns_to_go=batch.returns_to_go[sel])


def loss_value(agent, mb, cfg, pnorm=None, plant=None, spec=None):
    tape = tg.Tape()
    bm = agent.policy.mean_net.bind(tape)
    bs = agent.policy.std_net.bind(tape)
    bv = agent.value.net.bind(tape)
    pvar = tape.leaf(np.array(agent.design.normalized() if pnorm is None
                              else pnorm, dtype=np.float64))
    loss = ppo.ppo_loss(tape, agent, bm, bs, bv, pvar, mb, cfg,
                        plant=plant, reward_spec=spec)
    return tape, loss, pvar


class TestLossArithmetic:
    def test_sigma_starts_constant(self):
        agent = make_agent()
        X = np.random.default_rng(1).normal(size=(40, 2))
        mu, sigma = agent.mean_std(X)
        want = math.log1p(math.exp(0.01))
        assert np.allclose(sigma, want, rtol=0, atol=1e-15)
        assert np.isfinite(mu).all()

    def test_policy_term_clip_active_positive_adv(self):
        # ratio 1.5, advantage 1, eps 0.2: min(1.5, 1.2) = 1.2, loss -1.2
        agent = make_agent()
        mb = frozen_minibatch(agent, n=32)
        logp_now = agent.log_prob_np(mb.states, mb.actions)
        mb.log_probs_old = logp_now - math.log(1.5)
        mb.advantages = np.ones(len(mb.states))
        mb.returns_to_go = agent.value_batch(mb.states)  # zero value residual
        cfg = ppo.PpoConfig(epochs=1, x0_low=[-1, -1], x0_high=[1, 1])
        _, loss, _ = loss_value(agent, mb, cfg)
        assert abs(float(loss.value) - (-1.2)) < 1e-12

    def test_policy_term_clip_active_negative_adv(self):
        # ratio 1.5, advantage -1: min(-1.5, -1.2) = -1.5, loss +1.5
        agent = make_agent()
        mb = frozen_minibatch(agent, n=32)
        mb.log_probs_old = agent.log_prob_np(mb.states, mb.actions) - math.log(1.5)
        mb.advantages = -np.ones(len(mb.states))
        mb.returns_to_go = agent.value_batch(mb.states)
        cfg = ppo.PpoConfig(epochs=1, x0_low=[-1, -1], x0_high=[1, 1])
        _, loss, _ = loss_value(agent, mb, cfg)
        assert abs(float(loss.value) - 1.5) < 1e-12

    def test_unit_ratio_recovers_mean_advantage(self):
        agent = make_agent()
        mb = frozen_minibatch(agent, n=48)
        mb.log_probs_old = agent.log_prob_np(mb.states, mb.actions)
        mb.returns_to_go = agent.value_batch(mb.states)
        cfg = ppo.PpoConfig(epochs=1, x0_low=[-1, -1], x0_high=[1, 1])
        _, loss, _ = loss_value(agent, mb, cfg)
        assert abs(float(loss.value) + np.mean(mb.advantages)) < 1e-12

    def test_value_term_uses_huber_and_coefficient(self):
        agent = make_agent()
        mb = frozen_minibatch(agent, n=32)
        mb.log_probs_old = agent.log_prob_np(mb.states, mb.actions)
        mb.advantages = np.zeros(len(mb.states))
        v = agent.value_batch(mb.states)
        mb.returns_to_go = v + 0.5  # inside the quadratic zone
        cfg = ppo.PpoConfig(epochs=1, x0_low=[-1, -1], x0_high=[1, 1])
        _, loss, _ = loss_value(agent, mb, cfg)
        assert abs(float(loss.value) - 0.5 * (0.5 * 0.25)) < 1e-12
        mb.returns_to_go = v + 3.0  # linear zone: |d| - 0.5 = 2.5
        _, loss, _ = loss_value(agent, mb, cfg)
        assert abs(float(loss.value) - 0.5 * 2.5) < 1e-12

    def test_matches_vanilla_pg_gradient_when_unclipped(self):
        # at the collection parameters every ratio is exactly 1 (interior of
        # the clip band, ties resolve to the unclipped branch), so the
        # gradient must equal that of -mean(ratio * advantage)
        agent = make_agent(seed=5)
        mb = frozen_minibatch(agent, n=64, seed=7)
        mb.log_probs_old = agent.log_prob_np(mb.states, mb.actions)
        cfg = ppo.PpoConfig(epochs=1, x0_low=[-1, -1], x0_high=[1, 1],
                            value_coef=0.0)
        tape, loss, pvar = loss_value(agent, mb, cfg)
        bm_vars = [v for v in tape.leaves if v is not pvar]
        tape.backward(loss)
        got = [np.array(v.grad) for v in tape.leaves]

        tape2 = tg.Tape()
        bm = agent.policy.mean_net.bind(tape2)
        bs = agent.policy.std_net.bind(tape2)
        bv = agent.value.net.bind(tape2)
        pvar2 = tape2.leaf(agent.design.normalized())
        nb = mb.states.shape[0]
        X = tg.concat_cols([mb.states, tg.tile_rows(pvar2, nb)])
        mu = tg.mul(tg.reshape(bm.forward(X), (nb,)), agent.policy.action_scale)
        sg = tg.mul(tg.softplus(tg.reshape(bs.forward(X), (nb,))),
                    agent.policy.action_scale)
        ratio = tg.exp(tg.sub(tg.gaussian_log_prob(mb.actions, mu, sg),
                              mb.log_probs_old))
        vanilla = tg.neg(tg.mean(tg.mul(ratio, mb.advantages)))
        tape2.backward(vanilla)
        want = [np.array(v.grad) for v in tape2.leaves]
        assert len(got) == len(want)
        for g, w in zip(got, want):
            assert np.allclose(g, w, rtol=0, atol=1e-10)

    def test_design_gradient_matches_finite_differences(self):
        agent = make_agent(seed=11)
        # give the zero-weight std branch structure so dL/dp is generic
        rng = np.random.default_rng(2)
        for w in agent.policy.std_net.weights:
            w += 0.05 * rng.standard_normal(w.shape)
        mb = frozen_minibatch(agent, n=96, seed=13)
        cfg = ppo.PpoConfig(epochs=1, x0_low=[-1, -1], x0_high=[1, 1])
        tape, loss, pvar = loss_value(agent, mb, cfg)
        tape.backward(loss)
        grad = float(pvar.grad[0])

        h = 1e-6
        z = agent.design.normalized()
        _, lp, _ = loss_value(agent, mb, cfg, pnorm=z + h)
        _, lm, _ = loss_value(agent, mb, cfg, pnorm=z - h)
        fd = (float(lp.value) - float(lm.value)) / (2 * h)
        assert abs(grad - fd) <= 1e-4 * max(1.0, abs(fd))

    def test_nonfinite_ratio_rows_detected(self):
        agent = make_agent()
        env = make_env(agent.design)
        rng = np.random.default_rng(0)
        X0 = sim.sample_box(rng, np.array([-1.0, -1.0]), np.array([1.0, 1.0]), 4)
        eps = sim.rollout_batch(env, agent, X0, 5, rng)
        batch = sim.TransitionBatch.build(eps, agent.design_norm, 0.99, 0.95)
        batch.log_probs_old[3] = 1e4   # ratio overflows exp
        batch.log_probs_old[7] = np.nan
        keep = ppo._finite_rows(batch, agent)
        assert keep.sum() == len(batch) - 2
        assert not keep[3] and not keep[7]


class TestPathwiseTerm:
    def test_loss_value_adds_mean_state_cost(self):
        agent = make_agent()
        plant = dyn.illustrative_plant(agent.design.values[0])
        spec = sim.RewardSpec(Q=np.eye(2), r_u=0.1)
        mb = frozen_minibatch(agent, n=32)
        base_cfg = ppo.PpoConfig(epochs=1, x0_low=[-1, -1], x0_high=[1, 1])
        path_cfg = ppo.PpoConfig(epochs=1, x0_low=[-1, -1], x0_high=[1, 1],
                                 pathwise_env_grad=True)
        _, l0, _ = loss_value(agent, mb, base_cfg)
        _, l1, _ = loss_value(agent, mb, path_cfg, plant=plant, spec=spec)
        x_next = mb.states @ plant.A.T + mb.actions[:, None] * plant.B[:, 0]
        cost = np.einsum("ni,ij,nj->n", x_next, np.eye(2), x_next)
        assert abs((float(l1.value) - float(l0.value)) - np.mean(cost)) < 1e-12

    def test_design_gradient_gains_dynamics_route(self):
        agent = make_agent(seed=21)
        plant = dyn.illustrative_plant(agent.design.values[0])
        spec = sim.RewardSpec(Q=np.eye(2), r_u=0.1)
        mb = frozen_minibatch(agent, n=64, seed=23)
        cfg = ppo.PpoConfig(epochs=1, x0_low=[-1, -1], x0_high=[1, 1],
                            pathwise_env_grad=True)
        tape, loss, pvar = loss_value(agent, mb, cfg, plant=plant, spec=spec)
        tape.backward(loss)
        grad = float(pvar.grad[0])
        h = 1e-6
        z = agent.design.normalized()

        def at(zz):
            a2 = agent.copy()
            a2.design = agent.design.with_normalized(zz)
            plant2 = dyn.illustrative_plant(a2.design.values[0])
            _, l, _ = loss_value(agent, mb, cfg, pnorm=zz, plant=plant2,
                                 spec=spec)
            return float(l.value)

        fd = (at(z + h) - at(z - h)) / (2 * h)
        assert abs(grad - fd) <= 1e-4 * max(1.0, abs(fd))

    def test_requires_plant_and_spec(self):
        agent = make_agent()
        mb = frozen_minibatch(agent, n=8)
        cfg = ppo.PpoConfig(epochs=1, x0_low=[-1, -1], x0_high=[1, 1],
                            pathwise_env_grad=True)
        with pytest.raises(ValueError):
            loss_value(agent, mb, cfg)


class TestConfig:
    def test_rejects_bad_clip_and_lr(self):
        for eps in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                ppo.PpoConfig(epochs=1, x0_low=[0], x0_high=[1], clip_eps=eps)
        with pytest.raises(ValueError):
            ppo.PpoConfig(epochs=1, x0_low=[0], x0_high=[1], lr=-1e-5)
        with pytest.raises(ValueError):
            ppo.PpoConfig(epochs=1, x0_low=[0], x0_high=[1], minibatch=0)

    def test_defaults_match_training_protocol(self):
        cfg = ppo.PpoConfig(epochs=10, x0_low=[0], x0_high=[1])
        assert (cfg.clip_eps, cfg.value_coef, cfg.lr) == (0.2, 0.5, 1e-5)
        assert (cfg.episodes_per_epoch, cfg.minibatch, cfg.update_passes) == (16, 256, 4)
        assert (cfg.gamma, cfg.lam, cfg.horizon) == (0.99, 0.95, 100)


class TestTraining:
    def test_zero_learning_rate_changes_nothing(self):
        agent = make_agent(seed=31)
        before = agent.to_dict()
        cfg = ppo.PpoConfig(epochs=2, x0_low=[-2, -2], x0_high=[2, 2],
                            lr=0.0, episodes_per_epoch=4, horizon=10,
                            minibatch=16, seed=1)
        hist = ppo.train(agent, lambda d: make_env(d, noise=True), cfg)
        assert agent.to_dict() == before
        assert len(hist.avg_return) == 2 and not hist.aborted
        assert np.isfinite(hist.loss).all()

    def test_updates_move_parameters_and_design_stays_in_box(self):
        agent = make_agent(seed=33, p=1.9)
        w0 = agent.policy.mean_net.weights[0].copy()
        z0 = agent.design.normalized().copy()
        cfg = ppo.PpoConfig(epochs=3, x0_low=[-2, -2], x0_high=[2, 2],
                            lr=1e-3, episodes_per_epoch=4, horizon=10,
                            minibatch=16, seed=2)
        hist = ppo.train(agent, lambda d: make_env(d, noise=True), cfg)
        assert not np.array_equal(agent.policy.mean_net.weights[0], w0)
        assert not np.array_equal(agent.design.normalized(), z0)
        z = agent.design.normalized()
        assert np.all(z >= 0.0) and np.all(z <= 1.0)
        assert len(hist.design) == 3
        assert all(0.5 <= p[0] <= 2.0 for p in hist.design)

    def test_design_can_be_frozen(self):
        agent = make_agent(seed=35)
        z0 = agent.design.normalized().copy()
        cfg = ppo.PpoConfig(epochs=2, x0_low=[-2, -2], x0_high=[2, 2],
                            lr=1e-3, episodes_per_epoch=4, horizon=10,
                            minibatch=16, seed=3, train_design=False)
        ppo.train(agent, lambda d: make_env(d, noise=True), cfg)
        assert np.array_equal(agent.design.normalized(), z0)

    def test_training_is_deterministic_for_a_seed(self):
        runs = []
        for _ in range(2):
            agent = make_agent(seed=37)
            cfg = ppo.PpoConfig(epochs=3, x0_low=[-2, -2], x0_high=[2, 2],
                                lr=1e-3, episodes_per_epoch=4, horizon=10,
                                minibatch=16, seed=4)
            hist = ppo.train(agent, lambda d: make_env(d, noise=True), cfg)
            runs.append((hist.avg_return, hist.loss,
                         [p.tolist() for p in hist.design],
                         agent.to_dict()))
        assert runs[0] == runs[1]

    def test_sustained_nonfinite_batches_abort_with_restore(self):
        class NanRewards:
            def reward(self, X1, u, w=None):
                return np.full(X1.shape[0], np.nan)

        class NanEnv:
            u_low, u_high = -1.0, 1.0
            reward_spec = NanRewards()

            def begin(self, X, rng):
                pass

            def step(self, X, U):
                return X, None, None

        agent = make_agent(seed=39)
        before = agent.to_dict()
        cfg = ppo.PpoConfig(epochs=25, x0_low=[-1, -1], x0_high=[1, 1],
                            lr=1e-3, episodes_per_epoch=2, horizon=5,
                            minibatch=8, seed=5)
        hist = ppo.train(agent, lambda d: NanEnv(), cfg)
        assert hist.aborted
        assert len(hist.avg_return) == 10  # stopped at the streak limit
        assert hist.dropped > 0
        assert agent.to_dict() == before  # restored last good state

    def test_history_csv_round_trip(self, tmp_path):
        agent = make_agent(seed=41)
        cfg = ppo.PpoConfig(epochs=2, x0_low=[-1, -1], x0_high=[1, 1],
                            lr=1e-4, episodes_per_epoch=2, horizon=5,
                            minibatch=8, seed=6)
        hist = ppo.train(agent, lambda d: make_env(d), cfg)
        path = tmp_path / "history.csv"
        hist.to_csv(path)
        rows = path.read_text().strip().splitlines()
        assert rows[0] == "epoch,avg_return,loss,sigma,clip_fraction,p:p"
        assert len(rows) == 3
        assert float(rows[1].split(",")[1]) == hist.avg_return[0]


class TestAgentCheckpoint:
    def test_round_trip_is_exact(self):
        agent = make_agent(seed=43, p=1.3)
        doc = agent.to_dict()
        clone = ppo.Agent.from_dict(doc)
        assert clone.to_dict() == doc
        X = np.random.default_rng(0).normal(size=(10, 2))
        mu0, sg0 = agent.mean_std(X)
        mu1, sg1 = clone.mean_std(X)
        assert np.array_equal(mu0, mu1) and np.array_equal(sg0, sg1)
        assert np.array_equal(agent.value_batch(X), clone.value_batch(X))

    def test_rejects_unknown_format(self):
        with pytest.raises(ValueError):
            ppo.Agent.from_dict({"format": "other"})

    def test_rollout_log_probs_recompute(self):
        agent = make_agent(seed=45)
        env = make_env(agent.design, noise=True)
        rng = np.random.default_rng(9)
        X0 = sim.sample_box(rng, np.array([-2.0, -2.0]), np.array([2.0, 2.0]), 3)
        H = 6
        eps = sim.rollout_batch(env, agent, X0, H, rng)
        # batched exactly as the rollout batched them: bitwise identical
        for k in range(H):
            Xk = np.stack([ep.states[k] for ep in eps])
            uk = np.array([ep.actions[k] for ep in eps])
            again = agent.log_prob_np(Xk, uk)
            for i, ep in enumerate(eps):
                assert again[i] == ep.log_probs[k]
        # any other batching agrees to accumulation-order rounding
        for ep in eps:
            again = agent.log_prob_np(ep.states[:-1], ep.actions)
            assert np.allclose(again, ep.log_probs, rtol=0, atol=1e-12)


class TestEvaluate:
    def test_mean_mode_on_deterministic_env_has_zero_spread(self):
        agent = make_agent(seed=47)
        env = make_env(agent.design)
        X0 = np.array([[1.0, -0.5]])
        res = ppo.evaluate(env, agent, n_rollouts=8, horizon=20, seed=0,
                           X0=X0, mode="mean")
        assert res.std == 0.0
        assert np.all(res.returns == res.returns[0])

    def test_same_seed_reproduces_and_seeds_differ(self):
        agent = make_agent(seed=49)
        env = make_env(agent.design, noise=True)
        lo, hi = np.array([-2.0, -2.0]), np.array([2.0, 2.0])
        a = ppo.evaluate(env, agent, 32, 15, seed=7, x0_low=lo, x0_high=hi)
        b = ppo.evaluate(env, agent, 32, 15, seed=7, x0_low=lo, x0_high=hi)
        c = ppo.evaluate(env, agent, 32, 15, seed=8, x0_low=lo, x0_high=hi)
        assert np.array_equal(a.returns, b.returns)
        assert not np.array_equal(a.returns, c.returns)

    def test_growing_sample_is_statistically_stable(self):
        agent = make_agent(seed=51)
        env = make_env(agent.design, noise=True)
        lo, hi = np.array([-2.0, -2.0]), np.array([2.0, 2.0])
        small = ppo.evaluate(env, agent, 250, 15, seed=11, x0_low=lo, x0_high=hi)
        big = ppo.evaluate(env, agent, 500, 15, seed=11, x0_low=lo, x0_high=hi)
        se = small.std / math.sqrt(250)
        assert abs(big.mean - small.mean) < 3 * se

    def test_paired_evaluation_shares_initial_states(self):
        a1 = make_agent(seed=53)
        a2 = make_agent(seed=54)  # different nets, same seed protocol
        env = make_env(a1.design, noise=True)
        lo, hi = np.array([-2.0, -2.0]), np.array([2.0, 2.0])
        r1 = ppo.evaluate(env, a1, 6, 5, seed=13, x0_low=lo, x0_high=hi,
                          keep_episodes=6)
        r2 = ppo.evaluate(env, a2, 6, 5, seed=13, x0_low=lo, x0_high=hi,
                          keep_episodes=6)
        for e1, e2 in zip(r1.episodes, r2.episodes):
            assert np.array_equal(e1.states[0], e2.states[0])
            assert not np.array_equal(e1.actions, e2.actions)

    def test_cycled_explicit_starts(self):
        agent = make_agent(seed=55)
        env = make_env(agent.design)
        X0 = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.5]])
        res = ppo.evaluate(env, agent, 7, 4, seed=1, X0=X0, mode="mean",
                           keep_episodes=7)
        starts = np.array([ep.states[0] for ep in res.episodes])
        assert np.array_equal(starts, X0[np.arange(7) % 3])
