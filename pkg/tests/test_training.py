import numpy as np
import pytest

from treeqn import autodiff as ad
from treeqn import models as M
from treeqn import training as T
from treeqn.config import TrainConfig, epsilon_at
from treeqn.gradcheck import small_model, synthetic_batch


def one_step_batch(reward, done=False):
    obs = np.zeros((2, 1, 5, 8, 8))
    obs[:, :, 0, 3, 3] = 1
    return T.RolloutBatch(obs, np.array([[1]]), np.array([[reward]]), np.array([[done]]))


def constant_q_params(net, value):
    p = net.params.copy()
    p["head.W"].data[...] = 0
    p["head.b"].data[...] = value
    return p


# -- n-step Q ----------------------------------------------------------------


def test_q_loss_hand_example():
    net = small_model("dqn", np.random.default_rng(0))
    net.params = constant_q_params(net, 0.0)
    target = constant_q_params(net, 2.0)
    loss, _ = T.nstep_q_loss(one_step_batch(1.0), net, target, gamma=0.9)
    assert float(loss.data) == pytest.approx(7.84, abs=1e-12)


def test_q_loss_terminal_drops_bootstrap():
    net = small_model("dqn", np.random.default_rng(0))
    net.params = constant_q_params(net, 0.0)
    target = constant_q_params(net, 2.0)
    loss, _ = T.nstep_q_loss(one_step_batch(1.0, done=True), net, target, gamma=0.9)
    assert float(loss.data) == pytest.approx(1.0, abs=1e-12)


def test_q_loss_zero_at_targets():
    net = small_model("dqn", np.random.default_rng(0))
    net.params = constant_q_params(net, 2.8)
    target = constant_q_params(net, 2.0)
    loss, _ = T.nstep_q_loss(one_step_batch(1.0), net, target, gamma=0.9)
    assert float(loss.data) == pytest.approx(0.0, abs=1e-20)


def brute_force_targets(rewards, dones, boot, gamma):
    n, n_env = rewards.shape
    out = np.zeros((n, n_env))
    for e in range(n_env):
        for j in range(n):
            g, disc, cut = 0.0, 1.0, False
            for i in range(j, n):
                g += disc * rewards[i, e]
                disc *= gamma
                if dones[i, e]:
                    cut = True
                    break
            out[j, e] = g if cut else g + disc * boot[e]
    return out


def test_nstep_returns_match_trajectory_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n, n_env = rng.integers(1, 7), rng.integers(1, 5)
        r = rng.normal(size=(n, n_env))
        d = rng.random((n, n_env)) < 0.25
        boot = rng.normal(size=n_env)
        np.testing.assert_allclose(T.nstep_returns(r, d, boot, 0.97),
                                   brute_force_targets(r, d, boot, 0.97), atol=1e-13)


def test_target_params_get_no_gradient():
    rng = np.random.default_rng(1)
    net = small_model("treeqn-d1", rng)
    target = small_model("treeqn-d1", rng).params
    batch = synthetic_batch(rng, 3, 2)
    loss, _ = T.nstep_q_loss(batch, net, target, 0.9)
    ad.backward(loss, params=net.params)
    assert all(t.grad is None for t in target)
    shifted = target.copy()
    shifted["value.b"].data = shifted["value.b"].data + 1.0
    loss2, _ = T.nstep_q_loss(batch, net, shifted, 0.9)
    assert float(loss2.data) != float(loss.data)


# -- A2C ---------------------------------------------------------------------


def test_a2c_uniform_policy_entropy():
    rng = np.random.default_rng(2)
    net = small_model("a2c", rng)
    net.params["policy.W"].data[...] = 0
    net.params["policy.b"].data[...] = 0
    _, diag, _ = T.a2c_loss(synthetic_batch(rng, 2, 3), net, 0.9)
    assert diag["entropy"] == pytest.approx(np.log(4), abs=1e-12)


@pytest.mark.parametrize("arch", ["a2c", "atreec-d2"])
def test_zero_advantage_gives_no_policy_gradient(arch):
    rng = np.random.default_rng(3)
    net = small_model(arch, rng)
    batch = synthetic_batch(rng, 2, 2)
    loss, _, _ = T.a2c_loss(batch, net, 0.9, critic_coef=0.0, entropy_coef=0.0,
                            returns=np.zeros(4), advantages=np.zeros(4))
    ad.backward(loss, params=net.params)
    for name, t in net.params.items():
        np.testing.assert_array_equal(t.grad, 0.0)


def test_a2c_loss_finite_differences():
    from treeqn.gradcheck import atreec_loss_fn

    rng = np.random.default_rng(4)
    for arch in ("a2c", "atreec-d1"):
        net = small_model(arch, rng)
        batch = synthetic_batch(rng, 2, 1)
        f = atreec_loss_fn(net, batch)  # freezes returns and advantages once
        err = ad.finite_diff_check(lambda *_: f(), list(net.params),
                                   h=1e-6, max_coords=6, rng=rng, oracle_dtype=np.longdouble)
        assert err <= 1e-4


# -- grounding ---------------------------------------------------------------


def test_grounding_depth_cap():
    assert T.grounding_depth(3, 5, 5) == 1
    assert T.grounding_depth(3, 5, 1) == 3
    assert T.grounding_depth(2, 5, 4) == 2


def test_reward_grounding_single_term():
    rng = np.random.default_rng(5)
    net = small_model("treeqn-d1", rng)
    net.params["reward.W2"].data[...] = 0
    net.params["reward.b2"].data[...] = 0.5
    batch = one_step_batch(0.99)
    _, tree = net.q_values(batch.flat_obs())
    for eta in (1.0, 2.5):
        loss = T.reward_grounding_loss(batch, tree, eta)
        assert float(loss.data) == pytest.approx(eta * 0.2401, abs=1e-12)


def test_reward_grounding_zero_when_exact():
    rng = np.random.default_rng(6)
    net = small_model("treeqn-d2", rng)
    net.params["reward.W2"].data[...] = 0
    net.params["reward.b2"].data[...] = -0.01
    batch = synthetic_batch(rng, 4, 2)
    batch.rewards[...] = -0.01
    _, tree = net.q_values(batch.flat_obs())
    assert float(T.reward_grounding_loss(batch, tree).data) == pytest.approx(0, abs=1e-24)


def walk(root, actions):
    node = root
    for a in actions:
        node = node.children[a]
    return node


@pytest.mark.parametrize("depth", [1, 2, 3])
def test_grounding_losses_match_tree_walk(depth):
    rng = np.random.default_rng(depth + 10)
    net = small_model(f"treeqn-d{depth}", rng)
    batch = synthetic_batch(rng, 5, 3)
    batch.dones[...] = False
    batch.dones[1, 0] = True
    _, tree = net.q_values(batch.flat_obs())
    z_true = M.encode(batch.obs.reshape(-1, 5, 8, 8), net.params).data.reshape(6, 3, -1)
    want_r, want_s = 0.0, 0.0
    n = batch.n
    for j in range(n):
        for e in range(3):
            root = M.build_tree_nodes(tree, j * 3 + e)
            for lvl in range(1, T.grounding_depth(depth, n, j + 1) + 1):
                acts = batch.actions[j:j + lvl, e]
                if not batch.dones[j:j + lvl - 1, e].any():
                    parent = walk(root, acts[:-1])
                    want_r += (parent.reward_preds[acts[-1]] - batch.rewards[j + lvl - 1, e]) ** 2
                if not batch.dones[j:j + lvl, e].any():
                    want_s += ((walk(root, acts).z - z_true[j + lvl, e]) ** 2).sum()
    got_r = float(T.reward_grounding_loss(batch, tree, 1.0).data)
    got_s = float(T.state_grounding_loss(batch, tree, net, 1.0).data)
    assert got_r == pytest.approx(want_r, rel=1e-12)
    assert got_s == pytest.approx(want_s, rel=1e-12)


def test_state_grounding_terms_bounded():
    rng = np.random.default_rng(7)
    net = small_model("treeqn-d3", rng)
    batch = synthetic_batch(rng, 5, 4)
    _, tree = net.q_values(batch.flat_obs())
    sites = sum(len(js) for _, js, _, _ in T._grounding_sites(batch, 3, for_states=True))
    loss = float(T.state_grounding_loss(batch, tree, net, 1.0).data)
    assert sites > 0 and 0 <= loss <= 4 * sites


def test_state_grounding_eta_zero_is_noop():
    rng = np.random.default_rng(8)
    net = small_model("treeqn-d2", rng)
    batch = synthetic_batch(rng, 3, 2)
    _, tree = net.q_values(batch.flat_obs())
    loss = T.state_grounding_loss(batch, tree, net, 0.0)
    assert float(loss.data) == 0.0 and not loss.requires_grad


def test_state_grounding_target_blocked():
    rng = np.random.default_rng(9)
    net = small_model("treeqn-d1", rng)
    batch = synthetic_batch(rng, 2, 1, with_done=False)
    grads = {}
    for blocked in (True, False):
        _, tree = net.q_values(batch.flat_obs())
        ad.backward(T.state_grounding_loss(batch, tree, net, 1.0, blocked), params=net.params)
        grads[blocked] = net.params["enc.fc.W"].grad.copy()
    assert not np.allclose(grads[True], grads[False])


# -- acting ------------------------------------------------------------------


def test_epsilon_schedule():
    cfg = TrainConfig()
    assert epsilon_at(0, cfg) == 1.0
    assert epsilon_at(cfg.eps_horizon, cfg) == pytest.approx(0.05)
    assert epsilon_at(10 * cfg.eps_horizon, cfg) == pytest.approx(0.05)
    assert epsilon_at(cfg.eps_horizon // 2, cfg) == pytest.approx(0.525)


def test_full_exploration_uniform_actions():
    rng = np.random.default_rng(0)
    scores = np.tile([0.0, 5.0, 1.0, 2.0], (10_000, 1))
    acts = T.select_actions(scores, rng, epsilon=1.0)
    counts = np.bincount(acts, minlength=4)
    chi2 = ((counts - 2500) ** 2 / 2500).sum()
    assert chi2 < 16.27  # 3 dof, p = 0.001


def test_greedy_ties_lowest_index():
    scores = np.array([[1.0, 3.0, 3.0, 0.0], [2.0, 2.0, 2.0, 2.0]])
    np.testing.assert_array_equal(T.select_actions(scores, np.random.default_rng(0), 0.0), [1, 0])


def test_policy_sampling_frequencies():
    rng = np.random.default_rng(1)
    p = np.array([0.1, 0.2, 0.3, 0.4])
    acts = T.select_actions(np.tile(p, (20_000, 1)), rng, sample=True)
    freq = np.bincount(acts, minlength=4) / 20_000
    np.testing.assert_allclose(freq, p, atol=0.015)


def test_rollout_shape_at_defaults():
    tr = T.Trainer(TrainConfig(arch="dqn", transitions=80))
    batch, nxt = T.collect_rollout(tr.env, tr.net, tr.obs, 5, tr.rng, 1.0)
    assert batch.actions.shape == (5, 16) and batch.obs.shape == (6, 16, 5, 8, 8)
    assert batch.actions.size == TrainConfig().batch_size == 80
    np.testing.assert_array_equal(batch.obs[-1], nxt)


# -- trainer -----------------------------------------------------------------


def small_cfg(**kw):
    base = dict(arch="treeqn-d1", seed=3, transitions=800, k=16, m=8, log_every=2,
                checkpoint_every=0)
    base.update(kw)
    return TrainConfig(**base)


def test_target_sync_schedule():
    tr = T.Trainer(small_cfg(arch="dqn", target_sync=240))
    before = tr.target.params.arrays()
    for i in range(1, 10):
        tr.step()
        cur, tgt = tr.net.params.arrays(), tr.target.params.arrays()
        if tr.transitions % 240 == 0:
            assert all(cur[k].tobytes() == tgt[k].tobytes() for k in cur)
            before = tgt
        else:
            assert all(before[k].tobytes() == tgt[k].tobytes() for k in tgt)
            assert any(cur[k].tobytes() != tgt[k].tobytes() for k in cur)


def test_metrics_byte_identical_across_runs():
    texts = []
    for _ in range(2):
        tr = T.Trainer(small_cfg(eta_s=0.5))
        tr.train()
        texts.append(T.format_metrics_csv(tr.metrics_rows, actor=False))
    assert texts[0] == texts[1]
    assert texts[0].splitlines()[0].split(",") == [
        "transitions", "updates", "mean_return_100ep", "q_loss", "reward_ground_loss",
        "state_ground_loss", "epsilon"]


@pytest.mark.parametrize("arch,dtype", [("treeqn-d2", "float64"), ("atreec-d1", "float64"),
                                        ("dqn-deep", "float64"), ("treeqn-d1", "float32")])
def test_resume_bit_exact(tmp_path, arch, dtype):
    cfg = small_cfg(arch=arch, transitions=10_000, target_sync=400, dtype=dtype)
    tr = T.Trainer(cfg)
    for _ in range(4):
        tr.step()
    path = tmp_path / "ck.npz"
    tr.save(path)
    for _ in range(2):
        tr.step()
    resumed = T.Trainer.from_checkpoint(path)
    for _ in range(2):
        resumed.step()
    a, b = tr.net.params.arrays(), resumed.net.params.arrays()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert tr.opt.v.keys() == resumed.opt.v.keys()
    assert all(tr.opt.v[k].tobytes() == resumed.opt.v[k].tobytes() for k in tr.opt.v)
    np.testing.assert_array_equal(tr.obs, resumed.obs)
    assert tr.rng.random() == resumed.rng.random()


def test_periodic_checkpoints(tmp_path):
    tr = T.Trainer(small_cfg(checkpoint_every=320), str(tmp_path))
    tr.train()
    assert sorted(p.name for p in tmp_path.glob("ckpt_*.npz")) == ["ckpt_320.npz", "ckpt_640.npz"]


def test_nan_loss_aborts_with_diagnostic(tmp_path):
    tr = T.Trainer(small_cfg(), str(tmp_path))
    tr.net.params["value.b"].data = np.array(np.nan)
    with pytest.raises(T.TrainingDiverged):
        tr.step()
    assert (tmp_path / "diagnostic.json").exists()


def test_smoke_treeqn_d1_2000_transitions():
    tr = T.Trainer(TrainConfig(arch="treeqn-d1", seed=0, transitions=2000, log_every=1,
                               checkpoint_every=0))
    rows = tr.train()
    q = np.array([r["q_loss"] for r in rows])
    assert np.all(np.isfinite(q)) and len(q) == 25
    assert all(np.all(np.isfinite(v)) for v in tr.net.params.arrays().values())
    slope = np.polyfit(np.arange(len(q)), q, 1)[0]
    assert slope < 0 and q[-8:].mean() < q[:8].mean()


def test_greedy_eval_deterministic():
    net = M.Network(M.ModelConfig(arch="dqn"), seed=0)
    a = T.greedy_episode_returns(net, 8, seed=5)
    b = T.greedy_episode_returns(net, 8, seed=5)
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        T.greedy_episode_returns(net, 0, seed=5)
