import numpy as np
import pytest

from trajweave.model import ModelConfig, TrajModel
from trajweave.roadnet import synth_grid_network
from trajweave.tasks import (
    FinetuneResult,
    TaskError,
    TaskKind,
    TaskSpec,
    build_task_plan,
    finetune,
    od_tte,
    predict,
    recover,
    similar_search,
    sparse_plan,
)
from trajweave.tokenizer import G_END, G_MASK, Special, build_pretrain_plan
from trajweave.trajdata import SparseTrajectory, Trajectory, resample, synth_trajectories

ETA = 15.0
DELTA = 100.0


@pytest.fixture(scope="module")
def grid():
    return synth_grid_network(6, 6, 100.0)


@pytest.fixture(scope="module")
def pairs(grid):
    ds, matched = synth_trajectories(grid, 24, eta=ETA, seed=3)
    return list(zip(ds.trajectories, matched))


@pytest.fixture(scope="module")
def config(grid):
    return ModelConfig.for_network(grid, d=16, n_heads=2, n_layers=2, delta_m=DELTA)


@pytest.fixture(scope="module")
def model(config):
    return TrajModel(config, seed=5)


def _rng(seed=0):
    return np.random.default_rng(seed)


# ------------------------------------------------------------------- OD TTE


def test_tte_plan_arrangement(grid, pairs):
    traj, matched = pairs[0]
    spec = TaskSpec(TaskKind.OD_TTE)
    plan = build_task_plan(spec, traj, matched, grid, ETA, DELTA, _rng())
    assert len(plan.items) == 2
    assert len(plan.blocks) == 1

    origin, dest = plan.items
    assert origin.tup.road is Special.MASK
    assert origin.tup.temporal.t_norm == 0.0
    assert origin.tup.spatial.omega  # neighbors resolved
    assert dest.tup.temporal is Special.MASK
    assert dest.tup.road is Special.MASK
    assert dest.tup.spatial is not Special.MASK

    block = plan.blocks[0]
    assert block.anchor == 1
    assert len(block.targets) == 2 and block.targets[-1] == G_END
    duration = traj.points[-1, 2] - traj.points[0, 2]
    assert block.targets[0].temporal.t_norm == pytest.approx(duration)


def test_tte_estimate_is_clamped_nonnegative(grid, pairs, config):
    traj, _ = pairs[0]
    o = tuple(traj.points[0, :2])
    d = tuple(traj.points[-1, :2])
    model = TrajModel(config, seed=5)
    estimate = od_tte(model, grid, o, d, departure=traj.points[0, 2])
    assert estimate >= 0.0

    pessimist = TrajModel(config, seed=5)
    pessimist.params["head_time_w"].data[:] = 0.0
    pessimist.params["head_time_b"].data[:] = -100.0
    assert od_tte(pessimist, grid, o, d, departure=0.0) == 0.0


def test_tte_rejects_offroad_endpoints(grid, model):
    far = (10.0, 10.0)  # degrees away from the grid
    node = grid.nodes[0]
    near = (node.lng, node.lat)
    with pytest.raises(TaskError, match="origin has no road segment"):
        od_tte(model, grid, far, near, departure=0.0)
    with pytest.raises(TaskError, match="destination has no road segment"):
        od_tte(model, grid, near, far, departure=0.0)


def test_tte_matches_manual_generation(grid, pairs, model):
    from trajweave.tokenizer import make_tuple

    traj, _ = pairs[1]
    t0 = float(traj.points[0, 2])
    o = make_tuple(None, tuple(traj.points[0, :2]), t0, t0, grid, DELTA)
    d = make_tuple(None, tuple(traj.points[-1, :2]), None, t0, grid, DELTA)
    block = model.generate([o, d], grid, anchors=[1])[0]
    assert len(block) == 1
    expected = max(0.0, float(block[0].temporal.t_norm))
    got = od_tte(model, grid, tuple(traj.points[0, :2]), tuple(traj.points[-1, :2]), t0)
    assert got == expected


# ----------------------------------------------------------------- recovery


def test_recover_no_gaps_means_no_insertions(grid, pairs, model):
    traj, _ = pairs[2]
    sparse = resample(traj, ETA, ETA)  # keeps every point; gaps == eta
    result = recover(model, grid, sparse, target_eta=ETA, max_block_len=4)
    assert result.n_generated == 0
    assert len(result.matched.points) == len(sparse.entries)
    assert np.allclose(result.times, traj.points[:, 2])
    assert np.allclose(result.coords, traj.points[:, :2])
    assert result.times_monotonic


def test_recover_inserts_and_completes(grid, pairs, model):
    traj, _ = pairs[3]
    sparse = resample(traj, ETA, 60.0)
    result = recover(model, grid, sparse, target_eta=ETA, max_block_len=8)
    n_gaps = len(sparse.entries) - 1 - sum(
        1
        for a, b in zip(sparse.entries, sparse.entries[1:])
        if b.t - a.t <= ETA
    )
    assert n_gaps > 0
    assert len(result.matched.points) == len(sparse.entries) + result.n_generated
    n_segments = len(grid.segments)
    for p in result.matched.points:
        assert 0 <= p.segment_id < n_segments
        assert 0.0 <= p.fraction <= 1.0
    # known points keep their observed coordinates and timestamps
    known_times = {float(e.t) for e in sparse.entries}
    assert known_times.issubset(set(result.times.tolist()))
    assert result.times_monotonic == bool(np.all(np.diff(result.times) > 0))


def test_recover_requires_timestamps(grid, pairs, model):
    traj, _ = pairs[4]
    sparse = resample(traj, ETA, 60.0)
    entries = list(sparse.entries)
    entries[1] = type(entries[1])(entries[1].coord, None, entries[1].dense_index)
    broken = SparseTrajectory(sparse.traj_id, entries, sparse.mu, sparse.eta, sparse.n_dense)
    with pytest.raises(TaskError, match="timestamp"):
        recover(model, grid, broken, target_eta=ETA)


# --------------------------------------------------------------- prediction


def test_predict_contracts(grid, pairs, model):
    traj, matched = pairs[5]
    n = len(traj) - 1
    future = predict(model, grid, traj, matched, n, max_block_len=8)
    assert len(future) <= 8
    for tup in future:
        assert tup.spatial is not Special.MASK
        assert 0.0 <= tup.road.fraction <= 1.0
    again = predict(model, grid, traj, matched, n, max_block_len=8)
    assert future == again

    with pytest.raises(TaskError, match="at least one point"):
        predict(model, grid, traj, matched, 0)
    with pytest.raises(TaskError, match="exceeds"):
        predict(model, grid, traj, matched, len(traj) + 1)


def test_prediction_plan_draws_history_uniformly(grid, pairs):
    traj, matched = pairs[6]
    spec = TaskSpec(TaskKind.PREDICTION)
    rng = _rng(3)
    seen = set()
    for _ in range(60):
        plan = build_task_plan(spec, traj, matched, grid, ETA, DELTA, rng)
        n = len(plan.items) - 1
        seen.add(n)
        assert 2 <= n <= len(traj) - 1
        assert plan.items[-1].tup == G_MASK
        block = plan.blocks[0]
        assert block.anchor == n
        assert len(block.targets) == len(traj) - n + 1
        assert block.targets[-1] == G_END
    assert seen == set(range(2, len(traj)))

    short = Trajectory(99, traj.points[:2])
    with pytest.raises(TaskError, match="too short"):
        build_task_plan(spec, short, matched, grid, ETA, DELTA, rng)


# ------------------------------------------------------------ similar search


def test_sparse_plan_mirrors_pretraining_inputs(grid, pairs):
    traj, matched = pairs[7]
    sparse = resample(traj, ETA, 60.0)
    train_plan = build_pretrain_plan(matched, traj, sparse, grid, DELTA)
    embed_plan = sparse_plan(sparse, grid, DELTA)
    assert embed_plan.items == train_plan.items
    assert embed_plan.blocks == []
    assert embed_plan.t0 == train_plan.t0


def test_similar_search_permutation_and_ties(grid, pairs, model):
    candidates = [resample(t, ETA, 60.0) for t, _ in pairs[:8]]
    ranked = similar_search(model, grid, pairs[0], candidates)
    assert sorted(ranked) == sorted(c.traj_id for c in candidates)

    twin_a = candidates[0]
    twin_b = SparseTrajectory(
        1000, twin_a.entries, twin_a.mu, twin_a.eta, twin_a.n_dense
    )
    ranked = similar_search(model, grid, pairs[0], [twin_b, twin_a])
    assert ranked.index(twin_a.traj_id) < ranked.index(1000)

    with pytest.raises(TaskError, match="empty"):
        similar_search(model, grid, pairs[0], [])


def test_similar_search_batching_matches_single_pass(grid, pairs, model):
    candidates = [resample(t, ETA, 60.0) for t, _ in pairs[:6]]
    assert similar_search(model, grid, pairs[1], candidates, batch_size=2) == similar_search(
        model, grid, pairs[1], candidates, batch_size=128
    )


# ---------------------------------------------------------------- fine-tune


def test_finetune_runs_and_is_deterministic(grid, pairs, config):
    spec = TaskSpec(TaskKind.OD_TTE)
    logs = []
    for _ in range(2):
        model = TrajModel(config, seed=5)
        result = finetune(
            model, pairs[:8], grid, ETA, spec, epochs=2, batch_size=4, seed=1
        )
        assert isinstance(result, FinetuneResult)
        assert len(result.log) == 2
        assert all(np.isfinite(row.train_loss) for row in result.log)
        logs.append([row.train_loss for row in result.log])
    assert logs[0] == logs[1]


def test_finetune_improves_tte_loss(grid, pairs, config):
    spec = TaskSpec(TaskKind.OD_TTE)
    model = TrajModel(config, seed=5)
    result = finetune(model, pairs, grid, ETA, spec, epochs=5, batch_size=8, seed=2)
    assert result.log[-1].train_loss < result.log[0].train_loss


def test_finetune_early_stops_and_restores_best(grid, pairs, config):
    from trajweave.tasks import _mean_plan_loss

    spec = TaskSpec(TaskKind.RECOVERY, mu=60.0)
    train, val = pairs[:8], pairs[8:12]
    model = TrajModel(config, seed=5)
    result = finetune(
        model,
        train,
        grid,
        ETA,
        spec,
        epochs=12,
        learning_rate=0.02,
        batch_size=4,
        val_pairs=val,
        patience=1,
        seed=0,
    )
    assert result.val_losses
    assert result.best_epoch == int(np.argmin(result.val_losses))
    assert result.stopped_early and len(result.log) < 12

    val_rng = np.random.default_rng([0, 2**31])
    val_plans = [build_task_plan(spec, t, m, grid, ETA, DELTA, val_rng) for t, m in val]
    assert _mean_plan_loss(model, val_plans, 4) == pytest.approx(
        min(result.val_losses), abs=1e-9
    )


def test_finetune_rejects_similar_search_and_empty_sets(grid, pairs, model):
    with pytest.raises(TaskError, match="zero-shot"):
        finetune(model, pairs, grid, ETA, TaskSpec(TaskKind.SIMILAR_SEARCH), epochs=1)
    with pytest.raises(TaskError, match="empty"):
        finetune(model, [], grid, ETA, TaskSpec(TaskKind.OD_TTE), epochs=1)


def test_task_spec_validation():
    with pytest.raises(TaskError, match="recovery_eta"):
        TaskSpec(TaskKind.RECOVERY, recovery_eta=0.0)
    with pytest.raises(TaskError, match="history_n"):
        TaskSpec(TaskKind.PREDICTION, history_n=0)
    with pytest.raises(TaskError, match="mu"):
        TaskSpec(TaskKind.SIMILAR_SEARCH, mu=-1.0)
