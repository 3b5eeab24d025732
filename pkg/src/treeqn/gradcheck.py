"""Finite-difference verification of every primitive, model and loss."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import ModelConfig, Network, TreeConfig, backup, init_params

PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-4

# narrow encoder with the box-pushing shape chain 8 -> 6 -> 4 -> 1
SMALL_CONV = ((4, 3, 1), (4, 3, 1), (6, 4, 1))


@dataclass
class CheckResult:
    name: str
    worst: float
    tol: float
    instances: int
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.worst <= self.tol

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        return (f"{status}  {self.name:<28} worst rel err {self.worst:.3e}  "
                f"(tol {self.tol:.0e}, {self.instances} instances, {self.seconds:.1f}s)")


@dataclass
class Report:
    results: list[CheckResult] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.results)

    def text(self) -> str:
        return "\n".join(r.line() for r in self.results)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return (out * Tensor(w)).sum()


def _rand(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _away_from_zero(rng, *shape):
    x = rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(x, requires_grad=True)


def primitive_cases(rng: np.random.Generator):
    """(name, f, inputs) triples; each f returns a random projection of the op."""
    cases = []

    def add_case(name, op, inputs, out_shape):
        w = rng.normal(size=out_shape)
        cases.append((name, lambda *xs: _weighted(op(*xs), w), inputs))

    add_case("fc", ad.fc, [_rand(rng, 5), _rand(rng, 5, 5), _rand(rng, 5)], (5,))
    add_case("fc_batched", ad.fc, [_rand(rng, 3, 4), _rand(rng, 6, 4), _rand(rng, 6)], (3, 6))
    add_case("conv2d", lambda x, k, b: ad.conv2d(x, k, b, 1),
             [_rand(rng, 3, 6, 6), _rand(rng, 4, 3, 3, 3), _rand(rng, 4)], (4, 4, 4))
    add_case("conv2d_stride2", lambda x, k, b: ad.conv2d(x, k, b, 2),
             [_rand(rng, 2, 2, 7, 7), _rand(rng, 3, 2, 3, 3), _rand(rng, 3)], (2, 3, 3, 3))
    add_case("tanh", ad.tanh, [_rand(rng, 7)], (7,))
    add_case("relu", ad.relu, [_away_from_zero(rng, 7)], (7,))
    add_case("softmax", ad.softmax, [_rand(rng, 2, 5)], (2, 5))
    add_case("log_softmax", ad.log_softmax, [_rand(rng, 2, 5)], (2, 5))
    add_case("l2_normalize", ad.l2_normalize, [_rand(rng, 3, 6)], (3, 6))
    add_case("add", ad.add, [_rand(rng, 3, 4), _rand(rng, 4)], (3, 4))
    add_case("sub", ad.sub, [_rand(rng, 3, 4), _rand(rng, 3, 1)], (3, 4))
    add_case("mul", ad.mul, [_rand(rng, 3, 4), _rand(rng, 3, 4)], (3, 4))
    add_case("div", ad.div, [_rand(rng, 4), _rand(rng, 4, lo=0.5, hi=2.0)], (4,))
    add_case("square", ad.square, [_rand(rng, 5)], (5,))
    add_case("exp", ad.exp, [_rand(rng, 5)], (5,))
    add_case("log", ad.log, [_rand(rng, 5, lo=0.5, hi=2.0)], (5,))
    add_case("sum_axis", lambda x: ad.tsum(x, axis=1), [_rand(rng, 3, 4)], (3,))
    add_case("mean", lambda x: ad.mean(x, axis=0), [_rand(rng, 3, 4)], (4,))
    add_case("max", lambda x: ad.tmax(x, axis=-1), [_rand(rng, 3, 5)], (3,))
    idx = rng.integers(0, 5, size=4)
    add_case("gather", lambda x: ad.gather(x, idx), [_rand(rng, 4, 5)], (4,))
    rows = rng.integers(0, 4, size=6)
    add_case("index", lambda x: x[rows], [_rand(rng, 4, 3)], (6, 3))
    add_case("action_linear", ad.action_linear, [_rand(rng, 3, 5), _rand(rng, 4, 5, 5)],
             (3, 4, 5))
    add_case("concatenate", lambda a, b: ad.concatenate([a, b], axis=0),
             [_rand(rng, 2, 3), _rand(rng, 4, 3)], (6, 3))
    add_case("stack", lambda a, b: ad.stack([a, b], axis=1), [_rand(rng, 3), _rand(rng, 3)],
             (3, 2))
    cases.append(("backup_softmax", lambda x: backup(x, "softmax").sum(), [_rand(rng, 3, 4)]))
    return cases


def check_primitives(instances: int = 50, seed: int = 0, h: float = 1e-5) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    t0 = time.perf_counter()
    for _ in range(instances):
        for name, f, inputs in primitive_cases(rng):
            err = ad.finite_diff_check(f, inputs, h=h)
            worst[name] = max(worst.get(name, 0.0), err)
    dt = time.perf_counter() - t0
    return [CheckResult(f"op:{k}", v, PRIMITIVE_TOL, instances, dt / len(worst))
            for k, v in worst.items()]


# ---------------------------------------------------------------------------
# composites


def small_model(arch: str, rng: np.random.Generator, k: int = 8, m: int = 6,
                lam: float = 0.8, backup_mode: str = "softmax") -> Network:
    tree = TreeConfig(depth=1, lam=lam, gamma=0.9, backup=backup_mode)
    cfg = ModelConfig(arch=arch, k=k, m=m, conv=SMALL_CONV, tree=tree)
    params = init_params(cfg, rng)
    # nonzero biases so every path is exercised
    for name, t in params.items():
        if name.endswith("b") or name.endswith(".b1") or name.endswith(".b2") or "b_env" in name:
            t.data = rng.uniform(-0.1, 0.1, size=t.shape)
    return Network(cfg, params)


def synthetic_batch(rng: np.random.Generator, n: int, n_env: int, with_done: bool = True):
    from .training import RolloutBatch

    obs = (rng.random((n + 1, n_env, 5, 8, 8)) < 0.3).astype(np.float64)
    obs[:, :, 4] = rng.random((n + 1, n_env, 1, 1))
    dones = np.zeros((n, n_env), dtype=bool)
    if with_done and n > 1:
        dones[rng.integers(0, n), rng.integers(0, n_env)] = True
    return RolloutBatch(obs, rng.integers(0, 4, size=(n, n_env)),
                        rng.choice([-1.01, -0.21, -0.11, -0.01, 0.99], size=(n, n_env)), dones)


def _param_check(net: Network, loss_fn, rng, h: float, coords: int) -> float:
    tensors = list(net.params)
    return ad.finite_diff_check(lambda *_: loss_fn(), tensors, h=h, max_coords=coords, rng=rng,
                                oracle_dtype=np.longdouble)


def treeqn_loss_fn(net: Network, batch, target_params, eta_r=1.0, eta_s=0.5):
    from .training import nstep_q_loss, reward_grounding_loss, state_grounding_loss

    def f():
        loss, tree = nstep_q_loss(batch, net, target_params, net.cfg.tree.gamma)
        if tree is None:
            return loss
        loss = loss + reward_grounding_loss(batch, tree, eta_r)
        return loss + state_grounding_loss(batch, tree, net, eta_s, block_target=False)

    return f


def atreec_loss_fn(net: Network, batch, eta_r=1.0):
    """Loss with its gradient-blocked returns and advantages frozen at the current point."""
    from .training import a2c_loss, a2c_targets, reward_grounding_loss

    gamma = net.cfg.tree.gamma
    returns = a2c_targets(batch, net, gamma)
    with ad.no_grad():
        v = net.policy(batch.flat_obs())[2].data
    advantages = returns - v

    def f():
        loss, _, tree = a2c_loss(batch, net, gamma, 0.5, 0.01, returns, advantages)
        if tree is not None:
            loss = loss + reward_grounding_loss(batch, tree, eta_r)
        return loss

    return f


def check_tree_q(instances: int = 50, seed: int = 1, depth: int = 3, h: float = 1e-6,
                 coords: int = 6) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst, t0 = 0.0, time.perf_counter()
    for _ in range(instances):
        net = small_model(f"treeqn-d{depth}", rng)
        obs = synthetic_batch(rng, 1, 2).obs[0]
        w = rng.normal(size=(2, 4))
        f = lambda: _weighted(net.q_values(obs)[0], w)  # noqa: E731
        worst = max(worst, _param_check(net, f, rng, h, coords))
    return CheckResult(f"tree_q d={depth}", worst, COMPOSITE_TOL, instances,
                       time.perf_counter() - t0)


def check_treeqn_loss(instances: int = 50, seed: int = 2, depth: int = 3, h: float = 1e-6,
                      coords: int = 6) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst, t0 = 0.0, time.perf_counter()
    for _ in range(instances):
        net = small_model(f"treeqn-d{depth}", rng)
        target = small_model(f"treeqn-d{depth}", rng).params
        batch = synthetic_batch(rng, 3, 2)
        worst = max(worst, _param_check(net, treeqn_loss_fn(net, batch, target), rng, h, coords))
    return CheckResult(f"treeqn d={depth} loss", worst, COMPOSITE_TOL, instances,
                       time.perf_counter() - t0)


def check_atreec_loss(instances: int = 50, seed: int = 3, depth: int = 2, h: float = 1e-6,
                      coords: int = 6, arch: str | None = None) -> CheckResult:
    rng = np.random.default_rng(seed)
    arch = arch or f"atreec-d{depth}"
    worst, t0 = 0.0, time.perf_counter()
    for _ in range(instances):
        net = small_model(arch, rng)
        batch = synthetic_batch(rng, 2, 1)
        worst = max(worst, _param_check(net, atreec_loss_fn(net, batch), rng, h, coords))
    return CheckResult(f"{arch} a2c loss", worst, COMPOSITE_TOL, instances,
                       time.perf_counter() - t0)


def check_baselines(instances: int = 10, seed: int = 4, h: float = 1e-6,
                    coords: int = 6) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for arch in ("dqn", "dqn-deep", "dqn-wide"):
        worst, t0 = 0.0, time.perf_counter()
        for _ in range(instances):
            net = small_model(arch, rng)
            target = small_model(arch, rng).params
            batch = synthetic_batch(rng, 3, 2)
            worst = max(worst, _param_check(net, treeqn_loss_fn(net, batch, target), rng, h,
                                            coords))
        out.append(CheckResult(f"{arch} q loss", worst, COMPOSITE_TOL, instances,
                               time.perf_counter() - t0))
    return out


def run_suite(scope: str = "all", instances: int = 50) -> Report:
    report = Report()
    if scope in ("all", "primitives"):
        report.results += check_primitives(instances)
    if scope in ("all", "models"):
        report.results.append(check_tree_q(instances))
    if scope in ("all", "losses"):
        report.results.append(check_treeqn_loss(instances))
        report.results.append(check_atreec_loss(instances, depth=1))
        report.results.append(check_atreec_loss(max(10, instances // 5), depth=3))
        report.results.append(check_atreec_loss(max(10, instances // 5), arch="a2c"))
        report.results += check_baselines(max(5, instances // 5))
    if not report.results:
        raise ValueError(f"unknown scope {scope!r}")
    return report
