"""Encoder, TreeQN tree, ATreeC heads and the DQN/A2C baselines."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boxworld import N_ACTIONS, OBS_SHAPE

ARCHS = ("dqn", "dqn-deep", "dqn-wide", "treeqn-d1", "treeqn-d2", "treeqn-d3",
         "a2c", "atreec-d1", "atreec-d2", "atreec-d3")

# (out_channels, kernel, stride) for the box-pushing encoder
CONV_LAYERS = ((24, 3, 1), (24, 3, 1), (48, 4, 1))


@dataclass
class TreeConfig:
    depth: int = 2
    lam: float = 0.8
    gamma: float = 0.99
    backup: str = "softmax"  # or "hardmax"
    temperature: float = 1.0
    # "every": normalise each latent when created; "pre_transition": only
    # normalise the input of each transition application
    normalize: str = "every"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("tree depth must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.backup not in ("softmax", "hardmax"):
            raise ValueError(f"unknown backup mode {self.backup!r}")
        if self.normalize not in ("every", "pre_transition"):
            raise ValueError(f"unknown normalize mode {self.normalize!r}")


@dataclass
class ModelConfig:
    arch: str = "treeqn-d2"
    k: int = 128
    m: int = 64
    n_actions: int = N_ACTIONS
    obs_shape: tuple[int, int, int] = OBS_SHAPE
    conv: tuple = CONV_LAYERS
    tree: TreeConfig = field(default_factory=TreeConfig)

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}; choose from {', '.join(ARCHS)}")
        if self.is_tree:
            self.tree.depth = int(self.arch[-1])

    @property
    def family(self) -> str:
        return self.arch.split("-")[0]

    @property
    def is_tree(self) -> bool:
        return self.family in ("treeqn", "atreec")

    @property
    def is_actor(self) -> bool:
        return self.family in ("a2c", "atreec")

    @property
    def embed_dim(self) -> int:
        # wide baseline doubles the embedding
        return 2 * self.k if self.arch == "dqn-wide" else self.k


class ModelParams:
    """Named learnable tensors of one network."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> ModelParams:
        return ModelParams({k: Tensor(v.data.copy(), requires_grad=True, name=k)
                            for k, v in self.tensors.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.tensors):
            missing = set(self.tensors) ^ set(arrays)
            raise ValueError(f"parameter names do not match: {sorted(missing)}")
        for k, t in self.tensors.items():
            if arrays[k].shape != t.shape:
                raise ValueError(f"shape mismatch for {k}: {arrays[k].shape} vs {t.shape}")
            t.data = np.array(arrays[k], dtype=t.data.dtype)

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (v.grad if v.grad is not None else np.zeros_like(v.data))
                for k, v in self.tensors.items()}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(ad.DEFAULT_DTYPE)


def init_params(cfg: ModelConfig, rng: int | np.random.Generator = 0) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    p: dict[str, np.ndarray] = {}
    zeros = lambda *s: np.zeros(s, dtype=ad.DEFAULT_DTYPE)  # noqa: E731

    c, h, w = cfg.obs_shape
    for i, (co, kk, s) in enumerate(cfg.conv):
        p[f"enc.conv{i}.W"] = _uniform(rng, (co, c, kk, kk), c * kk * kk)
        p[f"enc.conv{i}.b"] = zeros(co)
        c, h, w = co, (h - kk) // s + 1, (w - kk) // s + 1
    flat, k, a = c * h * w, cfg.embed_dim, cfg.n_actions
    p["enc.fc.W"] = _uniform(rng, (k, flat), flat)
    p["enc.fc.b"] = zeros(k)

    if cfg.is_tree:
        p["trans.W_env"] = _uniform(rng, (k, k), k)
        p["trans.b_env"] = zeros(k)
        p["trans.W_a"] = _uniform(rng, (a, k, k), k)
        p["reward.W1"] = _uniform(rng, (cfg.m, k), k)
        p["reward.b1"] = zeros(cfg.m)
        p["reward.W2"] = _uniform(rng, (a, cfg.m), cfg.m)
        p["reward.b2"] = zeros(a)
        p["value.w"] = _uniform(rng, (k,), k)
        p["value.b"] = zeros()
    elif cfg.family == "dqn":
        if cfg.arch == "dqn-deep":
            p["deep.W"] = _uniform(rng, (k, k), k)
            p["deep.b"] = zeros(k)
        p["head.W"] = _uniform(rng, (a, k), k)
        p["head.b"] = zeros(a)
    elif cfg.family == "a2c":
        p["policy.W"] = _uniform(rng, (a, k), k)
        p["policy.b"] = zeros(a)
    if cfg.is_actor:
        p["critic.w"] = _uniform(rng, (k,), k)
        p["critic.b"] = zeros()
    return ModelParams({name: Tensor(v, requires_grad=True, name=name) for name, v in p.items()})


# ---------------------------------------------------------------------------
# components


def _as_obs(obs) -> Tensor:
    return obs if isinstance(obs, Tensor) else Tensor(np.asarray(obs, dtype=ad.DEFAULT_DTYPE))


def encode_features(obs, params: ModelParams, n_conv: int = len(CONV_LAYERS)) -> Tensor:
    """Conv stack followed by the fc layer, without the final nonlinearity."""
    x = _as_obs(obs)
    single = x.ndim == 3
    for i in range(n_conv):
        x = ad.relu(ad.conv2d(x, params[f"enc.conv{i}.W"], params[f"enc.conv{i}.b"], 1))
    x = x.reshape((-1,) if single else (x.shape[0], -1))
    return ad.fc(x, params["enc.fc.W"], params["enc.fc.b"])


def encode(obs, params: ModelParams, normalize: bool = True) -> Tensor:
    """Latent state z for one observation (C,H,W) or a batch (N,C,H,W)."""
    x = _as_obs(obs)
    if x.ndim not in (3, 4) or x.shape[-3] != params["enc.conv0.W"].shape[1]:
        raise ValueError(f"observation shape {x.shape} does not match encoder")
    n_conv = sum(1 for n in params.names() if n.startswith("enc.conv") and n.endswith(".W"))
    z = encode_features(x, params, n_conv)
    return ad.l2_normalize(z) if normalize else z


def transition(z: Tensor, params: ModelParams, action: int | None = None,
               normalize: str = "every") -> tuple[Tensor, Tensor]:
    """Residual latent transition.

    Returns (children, intermediate).  With ``action=None`` children holds
    one next state per action, shape (..., A, k); otherwise shape (..., k).
    """
    single = z.ndim == 1
    x = z.reshape((1, -1)) if single else z
    if normalize == "pre_transition":
        x = ad.l2_normalize(x)
    zhat = x + ad.tanh(ad.fc(x, params["trans.W_env"], params["trans.b_env"]))
    raw = ad.action_linear(zhat, params["trans.W_a"])  # (N, A, k)
    n, a, k = raw.shape
    zh3 = zhat.reshape((n, 1, k))
    child = zh3 + ad.tanh(raw)
    if normalize == "every":
        child = ad.l2_normalize(child)
    if action is not None:
        child = child[:, action]
    if single:
        child = child.reshape(child.shape[1:])
        zhat = zhat.reshape((k,))
    return child, zhat


def predict_rewards(z: Tensor, params: ModelParams) -> Tensor:
    h = ad.relu(ad.fc(z, params["reward.W1"], params["reward.b1"]))
    return ad.fc(h, params["reward.W2"], params["reward.b2"])


def predict_value(z: Tensor, params: ModelParams, head: str = "value") -> Tensor:
    return (z * params[f"{head}.w"]).sum(axis=-1) + params[f"{head}.b"]


def backup(x: Tensor, mode: str = "softmax", temperature: float = 1.0) -> Tensor:
    """Reduce the last axis: softmax-weighted mean or hard max."""
    if mode == "hardmax":
        return ad.tmax(x, axis=-1)
    if mode != "softmax":
        raise ValueError(f"unknown backup mode {mode!r}")
    logits = x if temperature == 1.0 else x * (1.0 / temperature)
    return (x * ad.softmax(logits, axis=-1)).sum(axis=-1)


# ---------------------------------------------------------------------------
# the tree


@dataclass
class TreeOutput:
    """Per-level tensors of a batched tree.

    Level l holds N*A**l nodes; the children of node i sit at i*A .. i*A+A-1.
    """

    q: Tensor  # (N, A) root action values
    z: list[Tensor]  # level l: (N*A**l, k)
    zhat: list[Tensor]  # level l>=1: intermediate of the parent; zhat[0] is None
    rewards: list[Tensor]  # level l<d: (N*A**l, A)
    values: list[Tensor]  # level l: (N*A**l,)
    qs: list[Tensor]  # level l<d: (N*A**l, A)
    vlam: list[Tensor]  # level l>=1: (N*A**l,); vlam[0] is None


def tree_forward(obs, params: ModelParams, cfg: TreeConfig, z0: Tensor | None = None) -> TreeOutput:
    if z0 is None:
        z0 = encode(obs, params, normalize=cfg.normalize == "every")
    if z0.ndim == 1:
        z0 = z0.reshape((1, -1))
    d = cfg.depth
    zs, zhats, rewards = [z0], [None], []
    z = z0
    for _ in range(d):
        rewards.append(predict_rewards(z, params))
        child, zhat = transition(z, params, normalize=cfg.normalize)
        n, a, k = child.shape
        zhats.append(zhat)
        z = child.reshape((n * a, k))
        zs.append(z)
    values = [predict_value(zl, params) for zl in zs]

    a = rewards[0].shape[-1]
    qs: list[Tensor | None] = [None] * d
    vlam: list[Tensor | None] = [None] * (d + 1)
    vlam[d] = values[d]
    for lvl in range(d - 1, -1, -1):
        n_l = rewards[lvl].shape[0]
        q = rewards[lvl] + cfg.gamma * vlam[lvl + 1].reshape((n_l, a))
        qs[lvl] = q
        if lvl > 0:
            b = backup(q, cfg.backup, cfg.temperature)
            if cfg.lam == 1.0:
                vlam[lvl] = b
            elif cfg.lam == 0.0:
                vlam[lvl] = values[lvl]
            else:
                vlam[lvl] = (1.0 - cfg.lam) * values[lvl] + cfg.lam * b
    return TreeOutput(qs[0], zs, zhats, rewards, values, qs, vlam)


@dataclass
class TreeNode:
    z: np.ndarray
    intermediate: np.ndarray | None
    reward_preds: np.ndarray | None
    value: float
    children: list[TreeNode]
    q: np.ndarray | None
    v_lambda: float | None
    action: int | None = None

    def descendants(self) -> int:
        return sum(1 + c.descendants() for c in self.children)

    def iter_nodes(self):
        yield self
        for c in self.children:
            yield from c.iter_nodes()

    def to_dict(self, include_z: bool = False) -> dict:
        d = {
            "action": self.action,
            "value": float(self.value),
            "v_lambda": None if self.v_lambda is None else float(self.v_lambda),
            "reward_preds": None if self.reward_preds is None else self.reward_preds.tolist(),
            "q": None if self.q is None else self.q.tolist(),
            "children": [c.to_dict(include_z) for c in self.children],
        }
        if include_z:
            d["z"] = self.z.tolist()
            d["intermediate"] = None if self.intermediate is None else self.intermediate.tolist()
        return d


def build_tree_nodes(out: TreeOutput, batch_index: int = 0) -> TreeNode:
    d = len(out.rewards)
    a = out.rewards[0].shape[-1]

    def node(lvl: int, i: int, action: int | None) -> TreeNode:
        leaf = lvl == d
        children = [] if leaf else [node(lvl + 1, i * a + j, j) for j in range(a)]
        zhat = None if lvl == 0 else out.zhat[lvl].data[i // a]
        vl = out.vlam[lvl]
        return TreeNode(
            z=out.z[lvl].data[i],
            intermediate=zhat,
            reward_preds=None if leaf else out.rewards[lvl].data[i],
            value=float(out.values[lvl].data[i]),
            children=children,
            q=None if leaf else out.qs[lvl].data[i],
            v_lambda=None if vl is None else float(vl.data[i]),
            action=action,
        )

    return node(0, batch_index, None)


def tree_q(obs, params: ModelParams, cfg: TreeConfig) -> tuple[Tensor, TreeNode]:
    """Root Q-vector of one observation plus the full node tree."""
    out = tree_forward(obs, params, cfg)
    return out.q.reshape((out.q.shape[-1],)), build_tree_nodes(out)


def tree_dump(root: TreeNode, include_z: bool = False) -> dict:
    return {"format": "treeqn-tree/1", "n_nodes": root.descendants(),
            "root": root.to_dict(include_z)}


TREE_DUMP_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["format", "n_nodes", "root"],
    "properties": {
        "format": {"const": "treeqn-tree/1"},
        "n_nodes": {"type": "integer", "minimum": 0},
        "root": {"$ref": "#/definitions/node"},
    },
    "definitions": {
        "node": {
            "type": "object",
            "required": ["action", "value", "v_lambda", "reward_preds", "q", "children"],
            "properties": {
                "action": {"type": ["integer", "null"]},
                "value": {"type": "number"},
                "v_lambda": {"type": ["number", "null"]},
                "reward_preds": {"type": ["array", "null"], "items": {"type": "number"}},
                "q": {"type": ["array", "null"], "items": {"type": "number"}},
                "z": {"type": "array", "items": {"type": "number"}},
                "intermediate": {"type": ["array", "null"], "items": {"type": "number"}},
                "children": {"type": "array", "items": {"$ref": "#/definitions/node"}},
            },
        }
    },
}


# ---------------------------------------------------------------------------
# actor-critic and baselines


def atreec_forward(obs, params: ModelParams, cfg: TreeConfig):
    """Batched ATreeC: (pi, log_pi, v_critic, tree output)."""
    out = tree_forward(obs, params, cfg)
    z0 = out.z[0]
    if cfg.normalize == "pre_transition":
        z0 = ad.l2_normalize(z0)
    v = predict_value(z0, params, head="critic")
    return ad.softmax(out.q), ad.log_softmax(out.q), v, out


def atreec_policy(obs, params: ModelParams, cfg: TreeConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Policy, critic value and tree Q-values for one observation."""
    pi, _, v, out = atreec_forward(obs, params, cfg)
    a = out.q.shape[-1]
    return pi.reshape((a,)), v.reshape(()), out.q.reshape((a,))


def _embedding(obs, params: ModelParams) -> Tensor:
    return ad.relu(encode(obs, params, normalize=False))


def dqn_forward(obs, params: ModelParams) -> Tensor:
    return ad.fc(_embedding(obs, params), params["head.W"], params["head.b"])


def dqn_deep_forward(obs, params: ModelParams) -> Tensor:
    h = _embedding(obs, params)
    for _ in range(2):  # two layers, one shared weight set
        h = h + ad.relu(ad.fc(h, params["deep.W"], params["deep.b"]))
    return ad.fc(h, params["head.W"], params["head.b"])


dqn_wide_forward = dqn_forward  # width lives in the parameter shapes


def a2c_forward(obs, params: ModelParams):
    h = _embedding(obs, params)
    logits = ad.fc(h, params["policy.W"], params["policy.b"])
    v = predict_value(h, params, head="critic")
    return ad.softmax(logits), ad.log_softmax(logits), v


class Network:
    """Architecture-agnostic front end used by training and the CLI."""

    def __init__(self, cfg: ModelConfig, params: ModelParams | None = None, seed=0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)

    def q_values(self, obs, params: ModelParams | None = None) -> tuple[Tensor, TreeOutput | None]:
        p = params or self.params
        arch = self.cfg.arch
        if self.cfg.family == "treeqn":
            out = tree_forward(obs, p, self.cfg.tree)
            return out.q, out
        if arch == "dqn-deep":
            return dqn_deep_forward(obs, p), None
        if self.cfg.family == "dqn":
            return dqn_forward(obs, p), None
        raise ValueError(f"{arch} is an actor-critic architecture")

    def policy(self, obs, params: ModelParams | None = None):
        """(pi, log_pi, v_critic, tree output or None)."""
        p = params or self.params
        if self.cfg.family == "atreec":
            return atreec_forward(obs, p, self.cfg.tree)
        if self.cfg.family == "a2c":
            return (*a2c_forward(obs, p), None)
        raise ValueError(f"{self.cfg.arch} is a value-based architecture")

    def act_values(self, obs) -> np.ndarray:
        """Greedy-action scores without recording a tape."""
        with ad.no_grad():
            if self.cfg.is_actor:
                return self.policy(obs)[0].data
            return self.q_values(obs)[0].data


def dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)
