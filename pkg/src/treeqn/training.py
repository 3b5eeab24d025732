"""Rollouts, losses and the synchronous n-step Q / A2C training loop."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boxworld import N_ACTIONS, VecEnv, make_rngs, rng_state
from .config import TrainConfig, epsilon_at
from .models import ModelParams, Network, TreeOutput

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("transitions", "updates", "mean_return_100ep", "q_loss", "pg_loss",
                  "value_loss", "entropy", "reward_ground_loss", "state_ground_loss", "epsilon")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RolloutBatch:
    """Time-major rollout: index [j, e] is step j of env e."""

    obs: np.ndarray  # (n + 1, n_env, 5, 8, 8); obs[n] are the bootstrap states
    actions: np.ndarray  # (n, n_env) int
    rewards: np.ndarray  # (n, n_env)
    dones: np.ndarray  # (n, n_env) bool; True if the episode ended at this step

    @property
    def n(self) -> int:
        return self.actions.shape[0]

    @property
    def n_env(self) -> int:
        return self.actions.shape[1]

    def flat_obs(self) -> np.ndarray:
        return self.obs[:-1].reshape((-1,) + self.obs.shape[2:])


@dataclass
class TargetNetwork:
    params: ModelParams
    since_sync: int = 0

    def sync(self, source: ModelParams) -> None:
        self.params.load_arrays({k: v.copy() for k, v in source.arrays().items()})
        self.since_sync = 0


# ---------------------------------------------------------------------------
# acting


def select_actions(scores: np.ndarray, rng: np.random.Generator, epsilon: float | None = None,
                   sample: bool = False) -> np.ndarray:
    """epsilon-greedy over Q rows, or sampling from policy rows."""
    n, a = scores.shape
    if sample:
        u = rng.random(n)
        cdf = np.cumsum(scores, axis=1)
        return np.minimum((u[:, None] >= cdf).sum(axis=1), a - 1)
    greedy = np.argmax(scores, axis=1)  # first index wins ties
    if not epsilon:
        return greedy
    explore = rng.random(n) < epsilon
    rand = rng.integers(0, a, size=n)
    return np.where(explore, rand, greedy)


def collect_rollout(env: VecEnv, net: Network, obs: np.ndarray, n: int, rng: np.random.Generator,
                    epsilon: float | None = None, returns_sink: list | None = None
                    ) -> tuple[RolloutBatch, np.ndarray]:
    """Step every env n times; returns the batch and the next observations."""
    sample = net.cfg.is_actor
    all_obs, actions, rewards, dones = [obs], [], [], []
    for _ in range(n):
        scores = net.act_values(obs)
        act = select_actions(scores, rng, epsilon, sample)
        res = env.step(act)
        if returns_sink is not None:
            returns_sink.extend(res.episode_returns)
        obs = res.obs
        all_obs.append(obs)
        actions.append(act)
        rewards.append(res.rewards)
        dones.append(res.dones)
    batch = RolloutBatch(np.stack(all_obs), np.stack(actions).astype(np.intp),
                         np.stack(rewards), np.stack(dones))
    return batch, obs


# ---------------------------------------------------------------------------
# targets and losses


def nstep_returns(rewards: np.ndarray, dones: np.ndarray, bootstrap: np.ndarray,
                  gamma: float) -> np.ndarray:
    """Discounted n-step targets, cut at episode ends, bootstrapped at the tail."""
    out = np.zeros_like(rewards, dtype=np.float64)
    ret = np.asarray(bootstrap, dtype=np.float64)
    for j in range(rewards.shape[0] - 1, -1, -1):
        ret = rewards[j] + gamma * ret * (1.0 - dones[j])
        out[j] = ret
    return out


def nstep_q_loss(batch: RolloutBatch, net: Network, target: TargetNetwork | ModelParams,
                 gamma: float) -> tuple[Tensor, TreeOutput | None]:
    """Summed squared error to n-step targets bootstrapped from the target net."""
    tparams = target.params if isinstance(target, TargetNetwork) else target
    with ad.no_grad():
        q_boot, _ = net.q_values(batch.obs[-1], tparams)
    boot = q_boot.data.max(axis=-1)
    targets = nstep_returns(batch.rewards, batch.dones, boot, gamma).reshape(-1)
    q, tree = net.q_values(batch.flat_obs())
    q_taken = ad.gather(q, batch.actions.reshape(-1))
    loss = ad.square(q_taken - Tensor(targets.astype(q.data.dtype))).sum()
    return loss, tree


def a2c_targets(batch: RolloutBatch, net: Network, gamma: float) -> np.ndarray:
    """n-step returns bootstrapped from the critic, flattened time-major."""
    with ad.no_grad():
        _, _, v_boot, _ = net.policy(batch.obs[-1])
    return nstep_returns(batch.rewards, batch.dones, v_boot.data, gamma).reshape(-1)


def a2c_loss(batch: RolloutBatch, net: Network, gamma: float, critic_coef: float = 0.5,
             entropy_coef: float = 0.01, returns: np.ndarray | None = None,
             advantages: np.ndarray | None = None) -> tuple[Tensor, dict, TreeOutput | None]:
    """Policy-gradient + critic + entropy objective (to be minimised).

    ``returns`` and ``advantages`` are gradient-blocked constants; when left
    out they are computed from the current parameters.
    """
    if returns is None:
        returns = a2c_targets(batch, net, gamma)
    pi, log_pi, v, tree = net.policy(batch.flat_obs())
    adv = Tensor(returns.astype(v.data.dtype)) - v
    adv_const = Tensor(adv.data.copy() if advantages is None else advantages)
    logp_taken = ad.gather(log_pi, batch.actions.reshape(-1))
    pg = -(logp_taken * adv_const).sum()
    value = ad.square(adv).sum()
    entropy = -(pi * log_pi).sum()
    loss = pg + critic_coef * value - entropy_coef * entropy
    diag = {"pg_loss": float(pg.data), "value_loss": float(value.data),
            "entropy": float(entropy.data) / batch.actions.size}
    return loss, diag, tree


def grounding_depth(d: int, n: int, j: int) -> int:
    """Number of tree levels grounded for rollout step j (1-based)."""
    return min(d, n - j + 1)


def _path_index(actions: np.ndarray, a: int) -> np.ndarray:
    idx = np.zeros(actions.shape[:-1], dtype=np.intp)
    for i in range(actions.shape[-1]):
        idx = idx * a + actions[..., i]
    return idx


def _grounding_sites(batch: RolloutBatch, depth: int, for_states: bool):
    """Yield (level, row j, env, path index) arrays of groundable tree entries.

    An entry for step j at level l follows actions a_j..a_{j+l-1}; it is
    dropped when an episode ended inside the path (the reward of the last
    step still counts for reward grounding, not for state grounding).
    """
    n = batch.n
    for lvl in range(1, depth + 1):
        js, es = [], []
        for j in range(n):
            if grounding_depth(depth, n, j + 1) < lvl:
                continue
            last = j + lvl if for_states else j + lvl - 1
            ok = ~batch.dones[j:last].any(axis=0)
            for e in np.nonzero(ok)[0]:
                js.append(j)
                es.append(e)
        if not js:
            continue
        js, es = np.asarray(js), np.asarray(es)
        acts = np.stack([batch.actions[js + i, es] for i in range(lvl)], axis=-1)
        yield lvl, js, es, acts


def reward_grounding_loss(batch: RolloutBatch, tree: TreeOutput, eta_r: float = 1.0) -> Tensor:
    """Squared error of tree reward predictions along the taken action paths."""
    a = tree.rewards[0].shape[-1]
    depth = len(tree.rewards)
    terms = []
    for lvl, js, es, acts in _grounding_sites(batch, depth, for_states=False):
        root = js * batch.n_env + es
        node = root * a ** (lvl - 1) + _path_index(acts[:, :-1], a)
        pred = tree.rewards[lvl - 1][(node, acts[:, -1])]
        target = batch.rewards[js + lvl - 1, es]
        terms.append(ad.square(pred - Tensor(target.astype(pred.data.dtype))).sum())
    if not terms:
        return Tensor(np.zeros(()))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return eta_r * total


def state_grounding_loss(batch: RolloutBatch, tree: TreeOutput, net: Network, eta_s: float = 0.0,
                         block_target: bool = True) -> Tensor:
    """Squared distance of predicted latents to encodings of the reached states."""
    if eta_s == 0.0:
        return Tensor(np.zeros(()))
    from .models import encode  # local: avoids widening the public import surface

    a = tree.rewards[0].shape[-1]
    depth = len(tree.rewards)
    normalize = net.cfg.tree.normalize == "every"
    if block_target:
        with ad.no_grad():
            z_all = encode(batch.obs.reshape((-1,) + batch.obs.shape[2:]), net.params, normalize)
    else:
        z_all = encode(batch.obs.reshape((-1,) + batch.obs.shape[2:]), net.params, normalize)
    terms = []
    for lvl, js, es, acts in _grounding_sites(batch, depth, for_states=True):
        root = js * batch.n_env + es
        node = root * a ** lvl + _path_index(acts, a)
        pred = tree.z[lvl][node]
        target = z_all[(js + lvl) * batch.n_env + es]
        terms.append(ad.square(pred - target).sum())
    if not terms:
        return Tensor(np.zeros(()))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return eta_s * total


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    """Owns parameters, optimiser, environments and all RNG streams.

    Seeds: SeedSequence(seed) spawns [env, init, action] children; envs get
    one Philox stream each from the env child.
    """

    def __init__(self, cfg: TrainConfig, run_dir: str | None = None):
        ad.set_default_dtype(cfg.dtype)
        self.cfg = cfg
        self.run_dir = run_dir
        env_ss, init_ss, act_ss = np.random.SeedSequence(cfg.seed).spawn(3)
        self.model_cfg = cfg.model_config()
        self.net = Network(self.model_cfg, seed=np.random.Generator(np.random.Philox(init_ss)))
        self.rng = np.random.Generator(np.random.Philox(act_ss))
        self.env = VecEnv(make_rngs(env_ss, cfg.n_env), cfg.consumable_goals)
        self.obs = self.env.reset()
        self.target = None if self.model_cfg.is_actor else TargetNetwork(self.net.params.copy())
        self.opt = ad.RmsPropState()
        self.transitions = 0
        self.updates = 0
        self.recent_returns: deque[float] = deque(maxlen=100)
        self.episodes = 0
        self._window: list[dict] = []
        self.metrics_rows: list[dict] = []

    # -- one update --------------------------------------------------------

    @property
    def epsilon(self) -> float | None:
        return None if self.model_cfg.is_actor else epsilon_at(self.transitions, self.cfg)

    def losses(self, batch: RolloutBatch) -> tuple[Tensor, dict]:
        cfg = self.cfg
        if self.model_cfg.is_actor:
            loss, diag, tree = a2c_loss(batch, self.net, cfg.gamma, cfg.critic_coef,
                                        cfg.entropy_coef)
        else:
            loss, tree = nstep_q_loss(batch, self.net, self.target, cfg.gamma)
            diag = {"q_loss": float(loss.data)}
        if tree is not None:
            if cfg.eta_r:
                rg = reward_grounding_loss(batch, tree, cfg.eta_r)
                loss = loss + rg
                diag["reward_ground_loss"] = float(rg.data)
            if cfg.eta_s:
                sg = state_grounding_loss(batch, tree, self.net, cfg.eta_s,
                                          cfg.block_state_target)
                loss = loss + sg
                diag["state_ground_loss"] = float(sg.data)
        return loss, diag

    def update(self, batch: RolloutBatch) -> dict:
        loss, diag = self.losses(batch)
        if not math.isfinite(float(loss.data)):
            self._dump_diagnostic(diag)
            raise TrainingDiverged(f"non-finite loss at update {self.updates}: {diag}")
        ad.backward(loss, params=self.net.params)
        grads = self.net.params.grads()
        diag["grad_norm"] = ad.clip_grad_norm(grads, self.cfg.grad_clip)
        ad.rmsprop_step(self.net.params.tensors, grads, self.opt, self.cfg.lr,
                        self.cfg.rms_alpha, self.cfg.rms_eps)
        self.updates += 1
        return diag

    def step(self) -> dict:
        """Collect one rollout, update once, maybe sync the target network."""
        eps = self.epsilon
        finished: list[float] = []
        batch, self.obs = collect_rollout(self.env, self.net, self.obs, self.cfg.n_steps,
                                          self.rng, eps, finished)
        self.recent_returns.extend(finished)
        self.episodes += len(finished)
        before = self.transitions
        self.transitions += batch.actions.size
        diag = self.update(batch)
        if self.target is not None:
            self.target.since_sync += batch.actions.size
            if self.transitions // self.cfg.target_sync > before // self.cfg.target_sync:
                self.target.sync(self.net.params)
        if eps is not None:
            diag["epsilon"] = eps
        self._window.append(diag)
        return diag

    # -- loop --------------------------------------------------------------

    def mean_return(self) -> float:
        return float(np.mean(self.recent_returns)) if self.recent_returns else float("nan")

    def _flush_metrics(self) -> dict:
        row: dict = {"transitions": self.transitions, "updates": self.updates,
                     "mean_return_100ep": self.mean_return()}
        for col in METRIC_COLUMNS[3:]:
            vals = [d[col] for d in self._window if col in d]
            row[col] = float(np.mean(vals)) if vals else None
        self._window = []
        self.metrics_rows.append(row)
        return row

    def train(self, until: int | None = None, on_row=None) -> list[dict]:
        until = self.cfg.transitions if until is None else until
        ckpt_every = self.cfg.checkpoint_every
        while self.transitions < until:
            before = self.transitions
            self.step()
            if self.updates % self.cfg.log_every == 0 or self.transitions >= until:
                row = self._flush_metrics()
                if on_row is not None:
                    on_row(row)
            if (self.run_dir and ckpt_every
                    and self.transitions // ckpt_every > before // ckpt_every
                    and self.transitions < until):
                self.save(os.path.join(self.run_dir, f"ckpt_{self.transitions}.npz"))
        return self.metrics_rows

    def _dump_diagnostic(self, diag: dict) -> None:
        info = {"updates": self.updates, "transitions": self.transitions, "losses": diag,
                "param_norms": {k: float(np.linalg.norm(v)) for k, v in
                                self.net.params.arrays().items()}}
        log.error("training diverged: %s", json.dumps(info))
        if self.run_dir:
            with open(os.path.join(self.run_dir, "diagnostic.json"), "w") as fh:
                json.dump(info, fh, indent=1, default=str)

    # -- checkpoints -------------------------------------------------------

    def state_meta(self) -> dict:
        return {
            "config": self.cfg.to_text(),
            "transitions": self.transitions,
            "updates": self.updates,
            "episodes": self.episodes,
            "recent_returns": list(self.recent_returns),
            "window": self._window,
            "rng": rng_state(self.rng),
            "envs": self.env.get_state(),
            "target_since_sync": None if self.target is None else self.target.since_sync,
        }

    def save(self, path: str) -> None:
        extra = {}
        if self.target is not None:
            extra = {f"target/{k}": v for k, v in self.target.params.arrays().items()}
        ad.save_arrays(path, self.net.params.arrays(), self.opt, extra,
                       meta=json.dumps(self.state_meta()))

    @classmethod
    def from_checkpoint(cls, path: str, run_dir: str | None = None) -> Trainer:
        from .config import load_config_text

        params, opt, extra, meta = ad.load_arrays(path)
        state = json.loads(meta)
        tr = cls(load_config_text(state["config"]), run_dir)
        tr.net.params.load_arrays(params)
        if opt is not None:
            dtype = ad.DEFAULT_DTYPE
            tr.opt = ad.RmsPropState({k: v.astype(dtype) for k, v in opt.v.items()}, opt.step)
        if tr.target is not None:
            tr.target.params.load_arrays({k[len("target/"):]: v for k, v in extra.items()
                                          if k.startswith("target/")})
            tr.target.since_sync = state["target_since_sync"]
        tr.transitions = state["transitions"]
        tr.updates = state["updates"]
        tr.episodes = state["episodes"]
        tr.recent_returns = deque(state["recent_returns"], maxlen=100)
        tr._window = state["window"]
        tr.rng.bit_generator.state = state["rng"]
        tr.env.set_state(state["envs"])
        tr.obs = tr.env.observe()
        return tr


def format_metrics_csv(rows: list[dict], actor: bool) -> str:
    """Deterministic CSV text; loss columns depend on the algorithm family."""
    skip = {"q_loss", "epsilon"} if actor else {"pg_loss", "value_loss", "entropy"}
    cols = [c for c in METRIC_COLUMNS if c not in skip]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in rows:
        w.writerow(["" if row.get(c) is None else
                    (repr(float(row[c])) if isinstance(row[c], float) else row[c]) for c in cols])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# evaluation


def greedy_episode_returns(net: Network, episodes: int, seed: int,
                           consumable_goals: bool = False) -> np.ndarray:
    """Run ``episodes`` fresh levels with the greedy (or mode) action in parallel."""
    if episodes <= 0:
        raise ValueError("episodes must be positive")
    from .boxworld import BoxWorld

    envs = [BoxWorld(r, consumable_goals) for r in make_rngs(np.random.SeedSequence(seed),
                                                             episodes)]
    obs = np.stack([e.reset() for e in envs])
    live = np.ones(episodes, dtype=bool)
    returns = np.zeros(episodes)
    while live.any():
        idx = np.nonzero(live)[0]
        acts = np.argmax(net.act_values(obs[idx]), axis=1)
        for i, a in zip(idx, acts):
            o, r, d = envs[i].step(int(a))
            returns[i] += r
            obs[i] = o
            if d:
                live[i] = False
    return returns


def random_policy_returns(episodes: int, seed: int, consumable_goals: bool = False) -> np.ndarray:
    """Monte-Carlo returns of the uniform random policy."""
    from .boxworld import BoxWorld

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed).spawn(1)[0]))
    env = BoxWorld(rng, consumable_goals)
    out = np.empty(episodes)
    for ep in range(episodes):
        env.reset()
        done = False
        while not done:
            _, _, done = env.step(int(rng.integers(N_ACTIONS)))
        out[ep] = env.episode_return
    return out
