import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedavoid import continual as cl, data, federation as fed, models
from fedavoid.continual import GridWorld, LidarScan, Pose
from fedavoid.errors import ConfigError, NavigationError, StateError
from fedavoid.experiments import continual_fusion as fuse

from toys import TINY


def empty_world(w=40, h=40, cell=0.1, realm="sim"):
    return GridWorld(np.zeros((h, w), bool), cell, realm)


def march(world, pose, angle, max_range, step=1e-3):
    """Distance to the first sample point inside an occupied or out-of-bounds cell."""
    t = np.arange(1, int(max_range / step) + 1) * step
    xs = pose.x + t * math.cos(angle)
    ys = pose.y + t * math.sin(angle)
    ix = np.floor(xs / world.cell_size).astype(int)
    iy = np.floor(ys / world.cell_size).astype(int)
    out = (ix < 0) | (iy < 0) | (ix >= world.width) | (iy >= world.height)
    hit = out.copy()
    ok = ~out
    hit[ok] = world.occupancy[iy[ok], ix[ok]]
    idx = np.flatnonzero(hit)
    return float(t[idx[0]]) if idx.size else max_range


def test_empty_world_returns_max_range(each_backend):
    w = GridWorld(np.zeros((30, 30), bool), 0.1)
    scan = cl.raycast(w, Pose(1.5, 1.5, 0.3), max_range=0.9)
    np.testing.assert_array_equal(scan.ranges, 0.9)
    assert cl.label_from_scan(scan) == data.FREE


def test_wall_two_metres_ahead(each_backend):
    w = empty_world(60, 20)
    occ = w.occupancy.copy()
    occ[:, 45] = True  # wall face at x = 4.5
    w = GridWorld(occ, 0.1)
    scan = cl.raycast(w, Pose(2.5, 1.05, 0.0), beam_angles=[0.0])
    assert abs(scan.ranges[0] - 2.0) <= 0.05


@pytest.mark.parametrize("seed", range(32))
def test_raycast_matches_fine_marching(seed):
    world = cl.random_world(seed, "sim" if seed % 2 else "real", width=50, height=50, n_boxes=10)
    rng = np.random.default_rng(seed)
    free = np.argwhere(~world.occupancy)
    iy, ix = free[rng.integers(len(free))]
    pose = Pose((ix + rng.uniform(0.05, 0.95)) * 0.1, (iy + rng.uniform(0.05, 0.95)) * 0.1, rng.uniform(-math.pi, math.pi))
    beams = np.sort(rng.uniform(-math.pi, math.pi, 8))
    scan = cl.raycast(world, pose, beams, max_range=6.0)
    for a, r in zip(beams, scan.ranges):
        assert abs(r - march(world, pose, pose.heading + a, 6.0)) <= world.cell_size


def test_pose_must_be_free_and_in_bounds():
    w = empty_world()
    occ = w.occupancy.copy()
    occ[5, 5] = True
    w = GridWorld(occ, 0.1)
    with pytest.raises(StateError):
        cl.raycast(w, Pose(0.55, 0.55, 0.0))
    with pytest.raises(StateError):
        cl.raycast(w, Pose(-0.1, 1.0, 0.0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.tuples(st.integers(0, 39), st.integers(0, 39)), min_size=1, max_size=20))
def test_adding_obstacles_never_increases_range(seed, cells):
    world = cl.random_world(seed, width=40, height=40, n_boxes=4)
    rng = np.random.default_rng(seed)
    free = np.argwhere(~world.occupancy)
    iy, ix = free[rng.integers(len(free))]
    pose = Pose((ix + 0.5) * 0.1, (iy + 0.5) * 0.1, float(rng.uniform(-3, 3)))
    more = world.with_obstacle([c for c in cells if c != (ix, iy)])
    a = cl.raycast(world, pose, cl.default_beams(16, 2 * math.pi - 0.1))
    b = cl.raycast(more, pose, cl.default_beams(16, 2 * math.pi - 0.1))
    assert (b.ranges <= a.ranges).all()


def test_label_sweep_is_strict_inequality():
    ranges = np.linspace(0.01, 3.0, 100)
    triggers = np.linspace(0.01, 3.0, 100)
    beams = cl.default_beams(5)
    for r in ranges:
        scan = LidarScan(beams, np.array([5.0, 5.0, r, 5.0, 5.0]), 10.0)
        for d in triggers:
            assert cl.label_from_scan(scan, d) == (data.BLOCKED if r < d else data.FREE)
    exact = LidarScan(beams, np.full(5, 0.5), 10.0)
    assert cl.label_from_scan(exact, 0.5) == data.FREE
    near = LidarScan(beams, np.array([10, 10, 0.4, 10, 10.0]), 10.0)
    assert cl.label_from_scan(near, 0.5) == data.BLOCKED


def test_label_ignores_beams_outside_fov():
    scan = LidarScan(np.array([-1.0, 0.0, 1.0]), np.array([0.1, 5.0, 0.1]), 10.0)
    assert cl.label_from_scan(scan, 0.5, fov=math.radians(60)) == data.FREE
    with pytest.raises(ConfigError):
        cl.label_from_scan(LidarScan(np.array([1.0, 2.0]), np.array([1.0, 1.0]), 10.0), 0.5, fov=0.5)
    with pytest.raises(ConfigError):
        cl.label_from_scan(scan, 0.0)


def test_scan_invariants():
    with pytest.raises(ConfigError):
        LidarScan(np.array([0.1, 0.0]), np.array([1.0, 1.0]), 10.0)
    with pytest.raises(ConfigError):
        LidarScan(np.array([0.0, 0.1]), np.array([0.0, 1.0]), 10.0)
    with pytest.raises(ConfigError):
        LidarScan(np.array([0.0, 0.1]), np.array([1.0, 11.0]), 10.0)


def test_obstacle_ahead_is_blocked_and_visible():
    occ = np.zeros((40, 40), bool)
    occ[18:23, 23:26] = True  # face at x = 2.3
    w = GridWorld(occ, 0.1, "real")
    pose = Pose(2.0, 2.05, 0.0)
    obs = cl.observe(w, pose, np.random.default_rng(0))
    assert obs.example.label == data.BLOCKED
    assert obs.scene.blobs and obs.example.env == data.HUSKY_REAL
    assert abs(obs.scene.blobs[0].cx - 16) < 8
    ex = cl.collect_step(w, Pose(2.0, 2.05, math.pi))
    assert ex.label == data.FREE and ex.image.shape == (3, 32, 32)
    open_view = cl.observe(w, Pose(2.0, 2.05, math.pi), np.random.default_rng(0))
    assert open_view.scene.blobs == ()


def test_collected_labels_replay_from_stored_scans():
    world = cl.random_world(3)
    sess = cl.ContinualSession(world, cl.Schedule(seed=5, steps=500), 10_000, cl.TrainCfg(), lambda: None,
                               keep_observations=True)
    assert list(sess.run()) == []
    assert len(sess.log) == 500
    replay = [cl.label_from_scan(o.scan) for o in sess.observations]
    assert replay == [r.label for r in sess.log]
    assert 0 < sum(replay) < 500
    for o in sess.observations:
        assert world.is_free(o.pose.x, o.pose.y)


def test_planner_finds_shortest_8_connected_path():
    blocked = np.zeros((5, 5), bool)
    blocked[1:4, 2] = True
    path = cl.plan_path(blocked, (0, 2), (4, 2))
    assert path[0] == (0, 2) and path[-1] == (4, 2)
    assert all(not blocked[y, x] for x, y in path)
    for (x0, y0), (x1, y1) in zip(path, path[1:]):
        assert max(abs(x1 - x0), abs(y1 - y0)) == 1
    assert len(path) == 7
    walled = blocked.copy()
    walled[:, 2] = True
    with pytest.raises(NavigationError):
        cl.plan_path(walled, (0, 2), (4, 2))
    with pytest.raises(NavigationError):
        cl.plan_path(walled, (2, 2), (4, 2))


def test_session_update_counts_and_hand_off():
    world = cl.random_world(1)
    g = models.initial_model(TINY, 0)
    tc = cl.TrainCfg(epochs=1, lr=0.1, batch_size=16)
    sess = cl.ContinualSession(world, cl.Schedule(seed=2, steps=200), 64, tc, lambda: g)
    ups = list(sess.run())
    assert len(ups) == 3 == 200 // 64
    assert sess.trained_sizes == [64, 64, 64]
    assert all(u.sample_count == 64 and u.round == 0 for u in ups)
    assert list(cl.continual_session(world, cl.Schedule(seed=2, steps=50), 64, tc, lambda: g)) == []
    with pytest.raises(ConfigError):
        cl.ContinualSession(world, cl.Schedule(), 8, tc, lambda: g)


def test_buffer_threshold_is_exact():
    buf = cl.CollectionBuffer(3)
    ex = data.LabeledExample(np.zeros((3, 32, 32), np.float32), 0, data.HUSKY_SIM)
    assert not buf.add(ex) and not buf.add(ex)
    with pytest.raises(StateError):
        buf.drain()
    assert buf.add(ex)
    assert len(buf.drain()) == 3 and buf.examples == []


def test_sessions_are_deterministic():
    g = models.initial_model(TINY, 0)
    tc = cl.TrainCfg(epochs=1, lr=0.1, batch_size=16, seed=3)

    def run(world, seed, cid):
        return list(cl.ContinualSession(world, cl.Schedule(seed=seed, steps=130), 32, tc, lambda: g, client_id=cid).run())

    hs = run(cl.random_world(0, "sim"), 0, "HS")
    again = run(cl.random_world(0, "sim"), 0, "HS")
    assert len(hs) == 4
    assert [u.params.weights.tobytes() for u in hs] == [u.params.weights.tobytes() for u in again]


def test_continual_fusion_trains_each_round_from_the_latest_global():
    g = models.initial_model(TINY, 0)
    tc = cl.TrainCfg(epochs=1, lr=0.1, batch_size=16, seed=3)
    seen = []

    def make(provider):
        def logged():
            seen.append(provider())
            return seen[-1]

        return [cl.ContinualSession(cl.random_world(s, realm), cl.Schedule(seed=s, steps=100), 32, tc, logged,
                                    client_id=cid) for s, realm, cid in ((0, "sim", "HS"), (1, "real", "HR"))]

    fused, rounds = fuse(g, make)
    assert [len(r) for r in rounds] == [2, 2, 2]
    # both robots of a round start from the same global, the one fused from the round before
    want = g
    for k, batch in enumerate(rounds):
        assert seen[2 * k] is seen[2 * k + 1] and seen[2 * k] == want
        assert {u.round for u in batch} == {want.version}
        want = fed.aggregate(batch)
    assert fused == want and fused.version == 3
    assert fuse(g, lambda provider: []) == (g, [])


def test_world_json_round_trip(tmp_path):
    w = cl.random_world(4, "real", width=30, height=20)
    w.save(tmp_path / "w.json")
    back = GridWorld.load(tmp_path / "w.json")
    np.testing.assert_array_equal(back.occupancy, w.occupancy)
    assert (back.cell_size, back.realm) == (w.cell_size, "real")
    with pytest.raises(ConfigError):
        GridWorld.from_json({"cell_size": 0.1, "width": 2, "height": 2, "occupied": [[5, 0]]})
    with pytest.raises(ConfigError):
        GridWorld.from_json({"width": 2})


def test_session_log_csv(tmp_path):
    sess = cl.ContinualSession(cl.random_world(2), cl.Schedule(seed=1, steps=20), 64, cl.TrainCfg(), lambda: None)
    list(sess.run())
    sess.write_log(tmp_path / "log.csv")
    rows = list(csv.DictReader(open(tmp_path / "log.csv")))
    assert [int(r["step"]) for r in rows] == list(range(20))
    assert set(rows[0]) == {"step", "x", "y", "heading", "min_range", "label"}


def test_validation_set_is_balanced():
    ds = cl.collect_validation(cl.random_world(7, "real"), 40, 7)
    assert ds.split == "val" and len(ds) == 40
    assert int(ds.labels.sum()) == 20
