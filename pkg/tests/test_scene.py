import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trajirl.autodiff import ShapeError, Tape
from trajirl.nn import DenseLayer, dense_forward
from trajirl.scene import (GridConfig, NeighborObservation, analyzer_forward, build_occupancy_pool,
                           cell_index, pool_hidden, scene_context_for_predicted)

GRID = GridConfig(4, 2.0)


def brute_force_pool(target, neighbors, grid):
    """Point-in-rectangle test against every cell, cells enumerated row-major from -y."""
    n, size = grid.n_cells, grid.cell_size
    h = len(neighbors[0].hidden_state) if neighbors else 0
    out = []
    for row in range(n):
        for col in range(n):
            x_lo = target[0] - n * size / 2 + col * size
            y_lo = target[1] - n * size / 2 + row * size
            members = [nb.hidden_state for nb in neighbors
                       if x_lo <= nb.position[0] < x_lo + size and y_lo <= nb.position[1] < y_lo + size]
            out.append(np.mean(members, axis=0) if members else np.zeros(h))
    return np.concatenate(out)


def test_no_neighbors_is_zero():
    np.testing.assert_array_equal(build_occupancy_pool([0, 0], [], GRID, hidden_dim=3), np.zeros(48))


def test_single_neighbor_cell():
    nb = NeighborObservation(1, np.array([1.1, 1.1]), np.array([1.0, 2.0, 3.0]))
    pooled = build_occupancy_pool(np.array([1.0, 1.0]), [nb], GRID).reshape(16, 3)
    assert cell_index(np.array([0.1, 0.1]), GRID) == 2 * 4 + 2
    np.testing.assert_array_equal(pooled[10], [1.0, 2.0, 3.0])
    assert np.count_nonzero(pooled) == 3


def test_two_neighbors_average():
    u, v = np.array([1.0, 0.0]), np.array([0.0, 3.0])
    nbs = [NeighborObservation(1, np.array([0.1, 0.2]), u),
           NeighborObservation(2, np.array([0.5, 0.9]), v)]
    pooled = build_occupancy_pool(np.zeros(2), nbs, GRID).reshape(16, 2)
    np.testing.assert_array_equal(pooled[10], (u + v) / 2)


def test_half_open_boundaries():
    # the lower edge of the grid is inside, the upper edge is outside
    assert cell_index(np.array([-4.0, -4.0]), GRID) == 0
    assert cell_index(np.array([4.0, 0.0]), GRID) == -1
    assert cell_index(np.array([0.0, 4.0]), GRID) == -1
    assert cell_index(np.array([0.0, 0.0]), GRID) == 10
    assert cell_index(np.array([-2.0, 2.0]), GRID) == 3 * 4 + 1


def test_inconsistent_hidden_sizes():
    nbs = [NeighborObservation(1, np.zeros(2), np.zeros(2)),
           NeighborObservation(2, np.ones(2), np.zeros(3))]
    with pytest.raises(ShapeError):
        build_occupancy_pool(np.zeros(2), nbs, GRID)
    with pytest.raises(ValueError):
        build_occupancy_pool(np.zeros(2), [], GRID)


def test_grid_config_validation():
    with pytest.raises(ValueError):
        GridConfig(0, 1.0)
    with pytest.raises(ValueError):
        GridConfig(4, 0.0)


def _random_neighbors(rng, k, h, spread=5.0, snap=False):
    pos = rng.uniform(-spread, spread, size=(k, 2))
    if snap:
        # land some neighbours exactly on cell boundaries
        pos = np.round(pos * 2) / 2
    return [NeighborObservation(int(i), pos[i], rng.normal(size=h)) for i in range(k)]


def test_pool_matches_brute_force_oracle():
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        grid = GridConfig(int(rng.integers(1, 6)), float(rng.choice([0.5, 1.0, 2.0])))
        nbs = _random_neighbors(rng, int(rng.integers(0, 8)), 3, snap=seed % 2 == 0)
        target = np.round(rng.uniform(-1, 1, size=2) * 2) / 2
        got = build_occupancy_pool(target, nbs, grid, hidden_dim=3)
        expected = brute_force_pool(target, nbs, grid) if nbs else np.zeros(grid.n_cells ** 2 * 3)
        np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 7))
def test_permutation_invariance(seed, k):
    rng = np.random.default_rng(seed)
    nbs = _random_neighbors(rng, k, 4)
    a = build_occupancy_pool(np.zeros(2), nbs, GRID)
    b = build_occupancy_pool(np.zeros(2), list(reversed(nbs)), GRID)
    c = build_occupancy_pool(np.zeros(2), [nbs[i] for i in rng.permutation(k)], GRID)
    assert np.array_equal(a, b) and np.array_equal(a, c)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(-20, 20), st.integers(-20, 20))
def test_translation_invariance(seed, sx, sy):
    rng = np.random.default_rng(seed)
    nbs = _random_neighbors(rng, 5, 2, snap=True)
    shift = np.array([sx, sy], dtype=float) * 0.5  # exact in binary, so cells cannot move
    moved = [NeighborObservation(nb.agent_id, nb.position + shift, nb.hidden_state) for nb in nbs]
    np.testing.assert_array_equal(build_occupancy_pool(np.zeros(2), nbs, GRID),
                                  build_occupancy_pool(shift, moved, GRID))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-6, 6), st.floats(-6, 6)), min_size=1, max_size=20))
def test_each_neighbor_in_at_most_one_cell(points):
    rel = np.array(points)
    idx = cell_index(rel, GRID)
    for r, i in zip(rel, idx):
        hits = 0
        for row in range(4):
            for col in range(4):
                lo_x, lo_y = -4 + 2 * col, -4 + 2 * row
                hits += lo_x <= r[0] < lo_x + 2 and lo_y <= r[1] < lo_y + 2
        assert hits == (1 if i >= 0 else 0)


def test_pool_hidden_batched_matches_single_target():
    rng = np.random.default_rng(2)
    pos = rng.uniform(-3, 3, size=(5, 2))
    hid = rng.normal(size=(5, 3))
    batched = pool_hidden(pos, pos, hid, GRID)
    for i in range(5):
        others = [NeighborObservation(j, pos[j], hid[j]) for j in range(5) if j != i]
        np.testing.assert_array_equal(batched[i], build_occupancy_pool(pos[i], others, GRID))


def _analyzer(t, w, b):
    return DenseLayer(t.input(w), t.input(b))


def test_analyzer_forward():
    t = Tape()
    layer = _analyzer(t, np.ones((2, 4)), np.zeros(2))
    np.testing.assert_array_equal(t.value(analyzer_forward(t, t.input(np.zeros(4)), layer)), 0.0)
    layer = _analyzer(t, np.zeros((2, 4)), np.ones(2))
    np.testing.assert_array_equal(t.value(analyzer_forward(t, t.input(np.ones(4)), layer)), 1.0)
    rng = np.random.default_rng(0)
    w, b, x = rng.normal(size=(3, 4)), rng.normal(size=3), rng.normal(size=4)
    out = analyzer_forward(t, t.input(x), _analyzer(t, w, b))
    np.testing.assert_allclose(t.value(out), np.maximum(w @ x + b, 0.0), atol=1e-14)
    ref = dense_forward(t, t.input(x), _analyzer(t, w, b), "relu")
    assert np.array_equal(t.value(out), t.value(ref))
    with pytest.raises(ShapeError):
        analyzer_forward(t, t.input(np.zeros(5)), layer)


def test_context_for_predicted():
    rng = np.random.default_rng(1)
    nbs = _random_neighbors(rng, 4, 2, spread=3.0)
    w, b = rng.normal(size=(3, 32)), rng.normal(size=3)
    t = Tape()
    layer = _analyzer(t, w, b)
    # far away: only the bias survives
    far = scene_context_for_predicted(t, np.array([100.0, 100.0]), nbs, GRID, layer)
    np.testing.assert_array_equal(t.value(far), np.maximum(b, 0.0))
    # moving within one cell leaves the context unchanged
    a = scene_context_for_predicted(t, np.array([0.3, 0.3]), nbs, GRID, layer)
    pooled_a = build_occupancy_pool(np.array([0.3, 0.3]), nbs, GRID)
    pooled_b = build_occupancy_pool(np.array([0.3001, 0.3002]), nbs, GRID)
    if np.array_equal(pooled_a, pooled_b):
        c = scene_context_for_predicted(t, np.array([0.3001, 0.3002]), nbs, GRID, layer)
        assert np.array_equal(t.value(a), t.value(c))
    # the pooled input is a constant, so only W_A receives gradient
    root = t.sum(a)
    t.backward(root)
    assert t.grad(layer.weight).any() or not t.value(a).any()


def test_context_at_true_position_is_bit_exact():
    rng = np.random.default_rng(3)
    nbs = _random_neighbors(rng, 5, 2, spread=3.0)
    prev, true_next = np.array([0.2, -0.4]), np.array([0.55, -0.1])
    pred = prev + (true_next - prev)
    t = Tape()
    layer = _analyzer(t, rng.normal(size=(3, 32)), rng.normal(size=3))
    s_true = scene_context_for_predicted(t, true_next, nbs, GRID, layer)
    s_hat = scene_context_for_predicted(t, pred, nbs, GRID, layer)
    assert np.array_equal(t.value(s_true), t.value(s_hat))
