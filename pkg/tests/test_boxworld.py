import itertools
import json

import numpy as np
import pytest

from treeqn import boxworld as bw
from treeqn.boxworld import Action, BoardState

U, D, L, R = Action.UP, Action.DOWN, Action.LEFT, Action.RIGHT


def board(agent, boxes=(), goals=(), obstacles=(), steps=0):
    return BoardState(agent, frozenset(boxes), frozenset(goals), frozenset(obstacles), steps)


# (name, board, action, expected reward, expected agent, expected boxes, done)
CASES = [
    ("box onto goal", board((3, 3), [(3, 4), (0, 0)], [(3, 5)]), R, 0.99, (3, 4), {(0, 0)}, False),
    ("walk off top", board((0, 5), [(4, 4)]), U, -1.01, None, {(4, 4)}, True),
    ("walk off bottom", board((7, 2), [(4, 4)]), D, -1.01, None, {(4, 4)}, True),
    ("walk off left", board((3, 0), [(4, 4)]), L, -1.01, None, {(4, 4)}, True),
    ("walk off right", board((3, 7), [(4, 4)]), R, -1.01, None, {(4, 4)}, True),
    ("blocked by box pair", board((2, 2), [(2, 3), (2, 4)]), R, -0.11, (2, 2), {(2, 3), (2, 4)},
     False),
    ("blocked vertical", board((5, 2), [(4, 2), (3, 2)]), U, -0.11, (5, 2), {(4, 2), (3, 2)},
     False),
    ("onto obstacle", board((4, 4), [(0, 0)], obstacles=[(4, 5)]), R, -0.21, (4, 5), {(0, 0)},
     False),
    ("plain move", board((4, 4), [(0, 0)]), L, -0.01, (4, 3), {(0, 0)}, False),
    ("plain move onto goal tile", board((4, 4), [(0, 0)], [(5, 4)]), D, -0.01, (5, 4), {(0, 0)},
     False),
    ("push box", board((4, 4), [(4, 5), (0, 0)]), R, -0.01, (4, 5), {(4, 6), (0, 0)}, False),
    ("push box up", board((4, 4), [(3, 4), (0, 0)]), U, -0.01, (3, 4), {(2, 4), (0, 0)}, False),
    ("push box onto obstacle", board((4, 4), [(4, 5), (0, 0)], obstacles=[(4, 6)]), R, -0.21,
     (4, 5), {(4, 6), (0, 0)}, False),
    ("agent and box both onto obstacles",
     board((4, 4), [(4, 5), (0, 0)], obstacles=[(4, 5), (4, 6)]), R, -0.41, (4, 5),
     {(4, 6), (0, 0)}, False),
    ("push box off grid", board((6, 3), [(7, 3), (0, 0)]), D, -0.11, (7, 3), {(0, 0)}, False),
    ("push box off grid left", board((2, 1), [(2, 0), (5, 5)]), L, -0.11, (2, 0), {(5, 5)},
     False),
    ("push last box off grid ends episode", board((6, 3), [(7, 3)]), D, -0.11, (7, 3), set(),
     True),
    ("box off grid from obstacle tile", board((6, 3), [(7, 3), (0, 0)], obstacles=[(7, 3)]), D,
     -0.31, (7, 3), {(0, 0)}, False),
    ("deliver last box ends episode", board((3, 3), [(3, 4)], [(3, 5)]), R, 0.99, (3, 4), set(),
     True),
    ("deliver from obstacle tile", board((3, 3), [(3, 4), (0, 0)], [(3, 5)], [(3, 4)]), R, 0.79,
     (3, 4), {(0, 0)}, False),
    ("box already on obstacle pushed to goal",
     board((1, 1), [(1, 2), (6, 6)], [(1, 3)], [(1, 2)]), R, 0.79, (1, 2), {(6, 6)}, False),
    ("blocked push while standing on obstacle",
     board((2, 2), [(2, 3), (2, 4)], obstacles=[(2, 2)]), R, -0.11, (2, 2), {(2, 3), (2, 4)},
     False),
    ("leave obstacle tile", board((4, 4), [(0, 0)], obstacles=[(4, 4)]), U, -0.01, (3, 4),
     {(0, 0)}, False),
    ("timeout on step 75", board((4, 4), [(0, 0)], steps=74), L, -0.01, (4, 3), {(0, 0)}, True),
    ("no timeout on step 74", board((4, 4), [(0, 0)], steps=73), L, -0.01, (4, 3), {(0, 0)},
     False),
    ("off grid on final step", board((0, 0), [(4, 4)], steps=74), U, -1.01, None, {(4, 4)},
     True),
    ("corner walk off", board((7, 7), [(4, 4)]), D, -1.01, None, {(4, 4)}, True),
    ("push box into corner", board((6, 5), [(6, 6), (0, 0)]), R, -0.01, (6, 6), {(6, 7), (0, 0)},
     False),
    ("box blocked at edge by box", board((7, 5), [(7, 6), (7, 7)]), R, -0.11, (7, 5),
     {(7, 6), (7, 7)}, False),
]


@pytest.mark.parametrize("name,state,action,reward,agent,boxes,done", CASES,
                         ids=[c[0] for c in CASES])
def test_rule_table(name, state, action, reward, agent, boxes, done):
    nxt, r, d = bw.step(state, action)
    assert round(r, 10) == reward
    assert nxt.agent == agent
    assert set(nxt.boxes) == boxes
    assert d == done == nxt.done
    assert nxt.steps_elapsed == state.steps_elapsed + 1
    assert nxt.goals == state.goals and nxt.obstacles == state.obstacles


def test_rule_table_size():
    assert len(CASES) >= 25


def test_goals_persist_by_default():
    s = board((3, 3), [(3, 4), (2, 4), (0, 0)], [(3, 5)])
    s, r, _ = bw.step(s, R)
    assert r == pytest.approx(0.99) and (3, 5) in s.goals


def test_goals_consumable_flag():
    s = board((3, 3), [(3, 4), (0, 0)], [(3, 5)])
    s, r, _ = bw.step(s, R, consumable_goals=True)
    assert r == pytest.approx(0.99) and s.goals == frozenset()


def test_step_after_done_raises():
    s, _, d = bw.step(board((0, 0), [(4, 4)]), U)
    assert d
    with pytest.raises(RuntimeError):
        bw.step(s, D)


# -- exhaustive local patterns against a second, independent rules oracle ---

CONTENTS = ("empty", "box", "goal", "obstacle", "box+obstacle")


def oracle_reward(start_obstacle, target, beyond):
    """target/beyond in CONTENTS or "off"; returns (reward, agent_moved, done_offgrid)."""
    r = -0.01
    if target == "off":
        return r - 1.0, False, True
    agent_moves = True
    if "box" in target:
        if beyond == "off":
            r -= 0.1
        elif "box" in beyond:
            r -= 0.1
            agent_moves = False
        elif beyond == "goal":
            r += 1.0
        elif beyond == "obstacle":
            r -= 0.2
    if agent_moves and "obstacle" in target:
        r -= 0.2
    return r, agent_moves, False


def _pattern_boards():
    for action in Action:
        dr, dc = bw.DELTAS[action]
        for dist in (0, 1, 3):  # agent at the edge, one before it, or in the middle
            # agent sits `dist` tiles from the edge it faces
            if dr:
                ar = dist if dr < 0 else 7 - dist
                ac = 4
            else:
                ac = dist if dc < 0 else 7 - dist
                ar = 4
            t, b = (ar + dr, ac + dc), (ar + 2 * dr, ac + 2 * dc)
            targets = CONTENTS if bw.on_grid(t) else ("off",)
            for start_obs, tgt in itertools.product((False, True), targets):
                beyonds = ("off",) if not bw.on_grid(b) else CONTENTS
                if not bw.on_grid(t):
                    beyonds = ("off",)
                for bey in beyonds:
                    boxes, goals, obstacles = set(), set(), set()
                    for pos, what in ((t, tgt), (b, bey)):
                        if what == "off":
                            continue
                        if "box" in what:
                            boxes.add(pos)
                        if "obstacle" in what:
                            obstacles.add(pos)
                        if what == "goal":
                            goals.add(pos)
                    if start_obs:
                        obstacles.add((ar, ac))
                    spare = next(p for p in [(0, 0), (0, 7), (7, 0), (7, 7)]
                                 if p not in {(ar, ac), t, b})
                    boxes.add(spare)  # keeps the episode alive after a delivery
                    yield action, (ar, ac), t, start_obs, tgt, bey, board(
                        (ar, ac), boxes, goals, obstacles)


def test_exhaustive_local_patterns():
    n = 0
    for action, a, t, start_obs, tgt, bey, s in _pattern_boards():
        want, moved, off = oracle_reward(start_obs, tgt, bey)
        nxt, r, done = bw.step(s, action)
        assert r == pytest.approx(want, abs=1e-12), (action, a, tgt, bey)
        assert -1.01 - 1e-12 <= r <= 0.99 + 1e-12
        if off:
            assert nxt.agent is None and done
        else:
            assert nxt.agent == (t if moved else a)
            assert not done
        assert len(nxt.boxes) <= len(s.boxes)
        n += 1
    assert n > 200


def test_reward_bound_million_random_steps():
    rng = np.random.default_rng(0)
    lo, hi, n = np.inf, -np.inf, 0
    while n < 1_000_000:
        s = bw.generate_level(rng)
        acts = rng.integers(0, 4, size=bw.MAX_STEPS)
        for a in acts:
            nboxes = len(s.boxes)
            s, r, d = bw.step(s, int(a))
            assert len(s.boxes) <= nboxes
            if not d:
                assert s.agent is not None
            lo, hi = min(lo, r), max(hi, r)
            n += 1
            if d:
                break
    assert lo >= -1.01 - 1e-12 and hi <= 0.99 + 1e-12


# -- generation --------------------------------------------------------------


def test_generation_deterministic():
    assert bw.generate_level(42) == bw.generate_level(42)
    assert bw.generate_level(42) != bw.generate_level(43)


def test_generation_counts_and_centre():
    for seed in range(200):
        s = bw.generate_level(seed)
        tiles = [s.agent, *s.boxes, *s.goals, *s.obstacles]
        assert (len(s.boxes), len(s.goals), len(s.obstacles)) == (12, 5, 6)
        assert len(set(tiles)) == 24
        assert all(1 <= r <= 6 and 1 <= c <= 6 for r, c in tiles)


def test_agent_position_uniform():
    rng = np.random.default_rng(123)
    n = 10_000
    counts = {}
    for _ in range(n):
        a = bw.generate_level(rng).agent
        counts[a] = counts.get(a, 0) + 1
    p = 1 / 36
    sigma = np.sqrt(n * p * (1 - p))
    assert len(counts) == 36
    for c in counts.values():
        assert abs(c - n * p) <= 5 * sigma


# -- observation -------------------------------------------------------------


def test_observe_channels():
    s = board((2, 3), [(4, 4)], [(5, 5)], [(1, 1)])
    o = bw.observe(s)
    assert o.shape == (5, 8, 8)
    assert o[0, 2, 3] == 1 and o[0].sum() == 1
    assert o[1, 5, 5] == 1 and o[1].sum() == 1
    assert o[2, 4, 4] == 1 and o[2].sum() == 1
    assert o[3, 1, 1] == 1 and o[3].sum() == 1
    np.testing.assert_array_equal(o[4], 1.0)


def test_time_channel_runs_out():
    s = bw.generate_level(0)
    for i in range(bw.MAX_STEPS):
        if s.done:
            break
        # shuffle left/right in the middle to stay alive
        s, _, _ = bw.step(s, L if i % 2 else R)
    assert s.steps_elapsed == 75 or s.done
    if s.steps_elapsed == 75:
        np.testing.assert_array_equal(bw.observe(s)[4], 0.0)


def test_time_channel_at_75():
    np.testing.assert_array_equal(bw.observe(board((3, 3), [(0, 0)], steps=75))[4], 0.0)


def test_ascii_round_trip():
    s = bw.generate_level(5)
    assert BoardState.from_ascii(s.to_ascii()) == s


def test_ascii_rejects_bad_board():
    with pytest.raises(ValueError):
        BoardState.from_ascii("A.......\n" * 7)
    with pytest.raises(ValueError):
        BoardState.from_ascii("X" * 8 + "\n" + ("." * 8 + "\n") * 7)


# -- vectorised --------------------------------------------------------------


def test_vec_shapes_and_length_check():
    env, obs = bw.vec_reset(16, 0)
    assert obs.shape == (16, 5, 8, 8)
    res = bw.vec_step(env, np.zeros(16, dtype=int))
    assert res.obs.shape == (16, 5, 8, 8) and res.rewards.shape == (16,) and res.dones.shape == (16,)
    with pytest.raises(ValueError):
        bw.vec_step(env, np.zeros(15, dtype=int))


def test_vec_auto_reset_returns_fresh_level():
    env, _ = bw.vec_reset(2, 1)
    res = bw.vec_step(env, [Action.UP] * 2)
    for _ in range(10):
        if res.dones.any():
            break
        res = bw.vec_step(env, [Action.UP] * 2)
    i = int(np.nonzero(res.dones)[0][0])
    np.testing.assert_array_equal(res.obs[i, 4], 1.0)
    assert res.obs[i, 0].sum() == 1
    assert len(res.episode_returns) == int(res.dones.sum())


def test_env_independent_of_batch():
    ss = np.random.SeedSequence(9)
    children = ss.spawn(4)
    env_all = bw.VecEnv([np.random.Generator(np.random.Philox(c)) for c in children])
    env_one = bw.VecEnv([np.random.Generator(np.random.Philox(children[2]))])
    obs_all, obs_one = env_all.reset(), env_one.reset()
    np.testing.assert_array_equal(obs_all[2], obs_one[0])
    rng = np.random.default_rng(0)
    for _ in range(200):
        acts = rng.integers(0, 4, size=4)
        a, b = env_all.step(acts), env_one.step(acts[2:3])
        np.testing.assert_array_equal(a.obs[2], b.obs[0])
        assert a.rewards[2] == b.rewards[0]


def test_replay_deterministic():
    acts = np.random.default_rng(1).integers(0, 4, size=(100, 3))
    runs = []
    for _ in range(2):
        env, _ = bw.vec_reset(3, 77)
        runs.append(np.array([env.step(a).rewards for a in acts]))
    assert runs[0].tobytes() == runs[1].tobytes()


def test_vec_state_round_trip():
    env, _ = bw.vec_reset(3, 5)
    rng = np.random.default_rng(0)
    for _ in range(30):
        env.step(rng.integers(0, 4, size=3))
    snap = json.loads(json.dumps(env.get_state()))
    other, _ = bw.vec_reset(3, 999)
    other.set_state(snap)
    np.testing.assert_array_equal(env.observe(), other.observe())
    acts = rng.integers(0, 4, size=(50, 3))
    for a in acts:
        x, y = env.step(a), other.step(a)
        np.testing.assert_array_equal(x.obs, y.obs)


def test_trajectory_log(tmp_path):
    env = bw.BoxWorld(np.random.default_rng(0))
    env.log = []
    env.reset()
    env.step(0)
    env.step(1)
    path = tmp_path / "traj.jsonl"
    bw.write_trajectory_log(path, env.log)
    recs = [json.loads(x) for x in path.read_text().splitlines()]
    assert [r["step"] for r in recs] == [1, 2]
    assert set(recs[0]) == {"step", "action", "reward", "done"}
