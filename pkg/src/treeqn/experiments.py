"""Box-pushing learning and grounding studies.

    python -m treeqn.experiments learning --out results/learning.json
    python -m treeqn.experiments grounding --out results/grounding.json
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import autodiff as ad
from .boxworld import N_ACTIONS, VecEnv, make_rngs
from .config import TrainConfig
from .models import Network, encode, predict_rewards
from .training import Trainer, random_policy_returns

LEARNING_ARCHS = ("treeqn-d2", "dqn", "atreec-d1", "a2c")


def train_run(arch: str, seed: int, transitions: int, run_root: str | None = None,
              **overrides) -> Trainer:
    cfg = TrainConfig(arch=arch, seed=seed, transitions=transitions, checkpoint_every=0,
                      log_every=250, **overrides)
    run_dir = None
    if run_root:
        tag = "".join(f"-{k}{v}" for k, v in sorted(overrides.items()))
        run_dir = os.path.join(run_root, f"{arch}-seed{seed}{tag}")
        os.makedirs(run_dir, exist_ok=True)
    tr = Trainer(cfg, run_dir)
    tr.train()
    if run_dir:
        tr.save(os.path.join(run_dir, "final.npz"))
    return tr


def learning_study(transitions: int = 400_000, seeds=(0, 1, 2), archs=LEARNING_ARCHS,
                   random_episodes: int = 10_000, run_root: str | None = None,
                   log=print) -> dict:
    """Final 100-episode training returns for each arch and seed, plus the random baseline."""
    rand = random_policy_returns(random_episodes, seed=12345)
    out = {"transitions": transitions, "seeds": list(seeds),
           "random_mean": float(rand.mean()), "random_sem": float(rand.std() / np.sqrt(rand.size)),
           "final_mean_return": {}}
    for arch in archs:
        vals = []
        for seed in seeds:
            t0 = time.perf_counter()
            tr = train_run(arch, seed, transitions, run_root)
            vals.append(tr.mean_return())
            log(f"{arch} seed {seed}: {vals[-1]:.3f} ({time.perf_counter() - t0:.0f}s)")
        out["final_mean_return"][arch] = vals
    return out


def judge_learning(res: dict) -> dict[str, tuple[bool, str]]:
    """Pass/fail with a one-line reason for each part of the learning criterion."""
    f = res["final_mean_return"]
    tq, dqn = f["treeqn-d2"], f["dqn"]
    wins = sum(a > b for a, b in zip(tq, dqn))
    bar = res["random_mean"] + 1.0
    worst = min(min(v) for v in f.values())
    at, a2 = np.mean(f["atreec-d1"]), np.mean(f["a2c"])
    return {
        "a": (wins >= 2, f"treeqn-d2 beats dqn in {wins}/3 seeds"),
        "b": (worst >= bar, f"worst agent {worst:.3f} vs bar {bar:.3f} (random "
                            f"{res['random_mean']:.3f} + 1.0)"),
        "c": (at >= a2, f"atreec-d1 mean {at:.3f} vs a2c mean {a2:.3f}"),
    }


def heldout_reward_mse(net: Network, steps: int = 4000, seed: int = 2024) -> float:
    """1-step reward prediction error on transitions from a uniform-random policy."""
    env = VecEnv(make_rngs(np.random.SeedSequence(seed), 16))
    rng = np.random.default_rng(seed)
    obs = env.reset()
    err, count = 0.0, 0
    normalize = net.cfg.tree.normalize == "every"
    while count < steps:
        acts = rng.integers(0, N_ACTIONS, size=env.n_env)
        with ad.no_grad():
            r_hat = predict_rewards(encode(obs, net.params, normalize), net.params).data
        res = env.step(acts)
        err += float(((r_hat[np.arange(env.n_env), acts] - res.rewards) ** 2).sum())
        count += env.n_env
        obs = res.obs
    return err / count


def grounding_study(transitions: int = 200_000, seed: int = 0, eta_s_high: float = 10.0,
                    run_root: str | None = None, log=print) -> dict:
    base = train_run("treeqn-d2", seed, transitions, run_root)
    no_r = train_run("treeqn-d2", seed, transitions, run_root, eta_r=0.0)
    high_s = train_run("treeqn-d2", seed, transitions, run_root, eta_s=eta_s_high)
    out = {
        "transitions": transitions, "seed": seed,
        "reward_mse": {"eta_r=1": heldout_reward_mse(base.net),
                       "eta_r=0": heldout_reward_mse(no_r.net)},
        "final_mean_return": {"eta_s=0": base.mean_return(),
                              f"eta_s={eta_s_high:g}": high_s.mean_return()},
    }
    log(json.dumps(out))
    return out


def judge_grounding(res: dict) -> dict[str, tuple[bool, str]]:
    mse, ret = res["reward_mse"], res["final_mean_return"]
    (k0, r0), (k1, r1) = sorted(ret.items(), key=lambda kv: kv[0] != "eta_s=0")
    return {
        "reward": (mse["eta_r=1"] < mse["eta_r=0"],
                   f"held-out reward MSE {mse['eta_r=1']:.4g} (eta_r=1) vs "
                   f"{mse['eta_r=0']:.4g} (eta_r=0)"),
        "state": (r0 >= r1, f"final return {r0:.3f} ({k0}) vs {r1:.3f} ({k1})"),
    }


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m treeqn.experiments")
    p.add_argument("study", choices=("learning", "grounding"))
    p.add_argument("--out", required=True)
    p.add_argument("--transitions", type=int)
    p.add_argument("--run-root")
    args = p.parse_args(argv)
    kw = {"run_root": args.run_root}
    if args.transitions:
        kw["transitions"] = args.transitions
    if args.study == "learning":
        res, verdict = learning_study(**kw), judge_learning
    else:
        res, verdict = grounding_study(**kw), judge_grounding
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w") as fh:
        json.dump(res, fh, indent=1)
    ok = True
    for name, (passed, why) in verdict(res).items():
        print(f"{'PASS' if passed else 'FAIL'} {args.study}.{name}: {why}")
        ok &= passed
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
