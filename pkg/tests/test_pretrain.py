import csv

import numpy as np
import pytest

from trajweave import neuralcore as nc
from trajweave.model import ModelConfig, TrajModel
from trajweave.pretrain import (
    EpochStats,
    PretrainConfig,
    PretrainError,
    info_nce,
    load_checkpoint,
    make_pretrain_example,
    pretrain,
    pretrain_epoch,
    save_checkpoint,
)
from trajweave.roadnet import synth_grid_network
from trajweave.tokenizer import G_MASK, Special, build_dense_plan
from trajweave.trajdata import SpeedModel, Trajectory, synth_trajectories
from trajweave.mapmatch import MatchedTrajectory

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


def _pc(**kw):
    base = dict(batch_size=8, epochs=2, seed=9, learning_rate=1e-3)
    base.update(kw)
    return PretrainConfig(**base)


# ----------------------------------------------------------- example builder


def test_dense_plan_round_trips(grid, pairs):
    from trajweave.tokenizer import detokenize

    traj, matched = pairs[0]
    plan = build_dense_plan(matched, traj, grid, DELTA)
    assert len(plan.items) == len(traj)
    assert plan.blocks == []
    assert [item.p1 for item in plan.items] == list(range(1, len(traj) + 1))
    got, coords = detokenize(plan)
    assert [p.segment_id for p in got] == [p.segment_id for p in matched.points]
    assert np.allclose(coords, traj.points[:, :2])


def test_example_input_arrangement_17_points():
    big = synth_grid_network(10, 10, 100.0)
    ds, matched = synth_trajectories(
        big, 1, eta=ETA, seed=2, speed=SpeedModel(5.0, 6.0), od_pairs=[(0, 99)]
    )
    assert len(ds.trajectories[0]) >= 17
    traj = Trajectory(0, ds.trajectories[0].points[:17])
    gt = MatchedTrajectory(0, matched[0].points[:17])

    cfg = _pc(mu_choices=(60.0,), phi=0.0)
    plan, sparse = make_pretrain_example(
        traj, gt, big, ETA, DELTA, cfg, np.random.default_rng(0)
    )
    assert sparse.mu == 60.0
    # eta=15, mu=60 keeps every 4th point: g1, gap, g5, gap, g9, gap, g13, gap, g17
    assert len(plan.items) == 9
    for k, item in enumerate(plan.items):
        if k % 2 == 1:
            assert item.tup == G_MASK
        else:
            assert item.tup.special() is None
            assert item.tup.road is Special.MASK  # road domain always hidden
    assert len(plan.blocks) == 9
    gap_blocks = [b for b in plan.blocks if plan.items[b.anchor].tup == G_MASK]
    kept_blocks = [b for b in plan.blocks if plan.items[b.anchor].tup != G_MASK]
    assert all(len(b.targets) == 4 for b in gap_blocks)  # 3 skipped points + end
    assert all(len(b.targets) == 2 for b in kept_blocks)
    assert sorted(plan.block_order) == list(range(9))


def test_example_feature_drops_and_determinism(grid, pairs):
    traj, matched = pairs[1]
    cfg = _pc(phi=0.0)
    plan, _ = make_pretrain_example(traj, matched, grid, ETA, DELTA, cfg, np.random.default_rng(4))
    for item in plan.items:
        if item.tup != G_MASK:
            assert item.tup.spatial is not Special.MASK
            assert item.tup.temporal is not Special.MASK

    cfg = _pc(phi=0.5)
    a, sa = make_pretrain_example(traj, matched, grid, ETA, DELTA, cfg, np.random.default_rng(4))
    b, sb = make_pretrain_example(traj, matched, grid, ETA, DELTA, cfg, np.random.default_rng(4))
    assert a == b
    assert sa == sb


def test_example_mu_drawn_uniformly(grid, pairs):
    traj, matched = pairs[2]
    cfg = _pc()
    rng = np.random.default_rng(11)
    seen = {60.0: 0, 120.0: 0, 240.0: 0}
    for _ in range(300):
        _, sparse = make_pretrain_example(traj, matched, grid, ETA, DELTA, cfg, rng)
        seen[sparse.mu] += 1
    assert all(count >= 60 for count in seen.values()), seen


def test_mu_equal_eta_phi_zero_degenerates_to_road_prediction(grid, pairs):
    traj, matched = pairs[3]
    cfg = _pc(mu_choices=(ETA,), phi=0.0)
    plan, _ = make_pretrain_example(traj, matched, grid, ETA, DELTA, cfg, np.random.default_rng(1))
    assert len(plan.items) == len(traj)
    assert all(item.tup != G_MASK for item in plan.items)
    assert all(len(b.targets) == 2 for b in plan.blocks)  # own tuple + end only


def test_config_validation():
    with pytest.raises(ValueError, match="tau"):
        PretrainConfig(tau=0.0)
    with pytest.raises(ValueError, match="phi"):
        PretrainConfig(phi=1.0)
    with pytest.raises(ValueError, match="mu_choices"):
        PretrainConfig(mu_choices=())
    with pytest.raises(ValueError, match="learning_rate"):
        PretrainConfig(learning_rate=0.0)
    cfg = PretrainConfig()
    assert PretrainConfig.from_dict(cfg.to_dict()) == cfg


# -------------------------------------------------------------- contrastive


def _brute_info_nce(dense, sparse, tau):
    b = len(dense)
    out = np.zeros(b)
    for i in range(b):
        sims = np.array(
            [
                np.dot(dense[i], sparse[j])
                / (np.linalg.norm(dense[i]) * np.linalg.norm(sparse[j]))
                for j in range(b)
            ]
        )
        weights = np.exp(sims / tau)
        out[i] = -np.log(weights[i] / weights.sum())
    return out


@pytest.mark.parametrize("b", [2, 3, 4])
def test_info_nce_matches_brute_force(b):
    rng = np.random.default_rng(b)
    dense = rng.standard_normal((b, 6))
    sparse = rng.standard_normal((b, 6))
    per, mean = info_nce(nc.Tensor(dense), nc.Tensor(sparse), tau=0.1)
    expected = _brute_info_nce(dense, sparse, 0.1)
    assert np.allclose(per.data, expected, atol=1e-6)
    assert mean.data == pytest.approx(expected.mean(), abs=1e-9)
    assert np.all(per.data >= -1e-12)


def test_info_nce_orthogonal_pair_closed_form():
    dense = np.array([[1.0, 0.0], [0.0, 1.0]])
    per, _ = info_nce(nc.Tensor(dense), nc.Tensor(dense.copy()), tau=0.1)
    # sims: positive 1, negative 0 -> loss = log(1 + e^{-10}) per row
    expected = 4.539889921682063e-05
    assert np.allclose(per.data, expected, rtol=1e-9)


def test_info_nce_single_trajectory_is_zero():
    emb = nc.Tensor(np.array([[0.3, -2.0, 1.1]]))
    per, mean = info_nce(emb, nc.Tensor(np.array([[5.0, 0.4, -0.7]])), tau=0.1)
    assert per.data[0] == 0.0
    assert float(mean.data) == 0.0


def test_info_nce_scale_invariance():
    rng = np.random.default_rng(8)
    dense = rng.standard_normal((3, 5))
    sparse = rng.standard_normal((3, 5))
    base, _ = info_nce(nc.Tensor(dense), nc.Tensor(sparse), tau=0.1)
    dense2 = dense.copy()
    dense2[0] *= 3.7
    sparse2 = sparse.copy()
    sparse2[1] *= 0.02
    scaled, _ = info_nce(nc.Tensor(dense2), nc.Tensor(sparse2), tau=0.1)
    assert np.allclose(base.data, scaled.data, atol=1e-9)


def test_info_nce_zero_norm_rejected():
    good = np.ones((2, 3))
    bad = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    with pytest.raises(ValueError, match="zero-norm sparse embedding at row 1"):
        info_nce(nc.Tensor(good), nc.Tensor(bad), tau=0.1)
    with pytest.raises(ValueError, match="zero-norm dense"):
        info_nce(nc.Tensor(bad), nc.Tensor(good), tau=0.1)


def test_info_nce_gradient():
    rng = np.random.default_rng(13)
    store = nc.ParamStore(np.float64)
    store.add("dense", rng.standard_normal((3, 4)))
    store.add("sparse", rng.standard_normal((3, 4)))

    def loss():
        _, mean = info_nce(store["dense"], store["sparse"], tau=0.5)
        return mean

    assert nc.grad_check(loss, store) <= 1e-6


# ------------------------------------------------------------ training loop


def test_pretrain_loss_decreases(grid, pairs, config):
    model = TrajModel(config, seed=5)
    result = pretrain(pairs, model, grid, ETA, _pc(epochs=6))
    assert len(result.log) == 6
    assert all(np.isfinite(row.recon_loss) and np.isfinite(row.cl_loss) for row in result.log)
    assert result.log[-1].recon_loss < result.log[0].recon_loss
    assert result.best_epoch == -1 and result.val_losses == []


def test_pretrain_same_seed_same_curves(grid, pairs, config):
    logs = []
    for _ in range(2):
        model = TrajModel(config, seed=5)
        result = pretrain(pairs, model, grid, ETA, _pc(epochs=2))
        logs.append([(row.recon_loss, row.cl_loss) for row in result.log])
    assert logs[0] == logs[1]


def test_epoch_stats_decompose_into_plan_means(grid, pairs, config):
    model = TrajModel(config, seed=6)
    cfg = _pc(batch_size=10)
    stats = pretrain_epoch(pairs, model, grid, ETA, cfg, np.random.default_rng(21), update=False)
    assert isinstance(stats, EpochStats)

    rng = np.random.default_rng(21)  # same stream, same examples
    recon_sum = 0.0
    cl_sum = 0.0
    n_tuples = 0
    for start in range(0, len(pairs), cfg.batch_size):
        plans, dense_plans = [], []
        for traj, matched in pairs[start : start + cfg.batch_size]:
            plan, _ = make_pretrain_example(traj, matched, grid, ETA, DELTA, cfg, rng)
            plans.append(plan)
            dense_plans.append(build_dense_plan(matched, traj, grid, DELTA))
        _, details = model.reconstruction_loss(plans, include_cls=True)
        per_cl, _ = info_nce(model.embed(dense_plans), details.embeddings, cfg.tau)
        recon_sum += float(details.per_plan_loss.sum())
        cl_sum += float(per_cl.data.sum())
        n_tuples += len(details.per_position_loss)
    assert stats.recon_loss == pytest.approx(recon_sum / len(pairs), abs=1e-12)
    assert stats.cl_loss == pytest.approx(cl_sum / len(pairs), abs=1e-12)
    assert stats.n_tuples == n_tuples
    assert stats.n_trajectories == len(pairs)


def test_non_finite_loss_aborts_with_batch_id(grid, pairs, config):
    model = TrajModel(config, seed=5)
    model.params["head_time_w"].data[:] = np.nan
    with pytest.raises(PretrainError, match="batch 0"):
        pretrain_epoch(pairs, model, grid, ETA, _pc(), np.random.default_rng(0))


def test_early_stopping_restores_best_parameters(grid, pairs, config):
    from trajweave.pretrain import _validation_loss

    train, val = pairs[:8], pairs[8:12]
    model = TrajModel(config, seed=5)
    cfg = _pc(epochs=12, patience=1, learning_rate=0.02)
    result = pretrain(train, model, grid, ETA, cfg, val_pairs=val)
    assert result.val_losses
    assert result.best_epoch == int(np.argmin(result.val_losses))
    assert result.stopped_early
    assert len(result.log) < cfg.epochs

    val_rng = np.random.default_rng([cfg.seed, 2**31])
    val_plans = [
        make_pretrain_example(t, m, grid, ETA, DELTA, cfg, val_rng)[0] for t, m in val
    ]
    assert _validation_loss(model, val_plans, cfg.batch_size) == pytest.approx(
        min(result.val_losses), abs=1e-9
    )


def test_training_log_csv(grid, pairs, config, tmp_path):
    model = TrajModel(config, seed=5)
    path = tmp_path / "log.csv"
    pretrain(pairs[:8], model, grid, ETA, _pc(epochs=2), log_path=str(path))
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["epoch", "recon_loss", "cl_loss", "wall_seconds"]
    assert len(rows) == 3
    assert [r[0] for r in rows[1:]] == ["0", "1"]
    walls = [float(r[3]) for r in rows[1:]]
    assert walls == sorted(walls)


def test_checkpoint_re_export(grid, config, tmp_path):
    model = TrajModel(config, seed=2)
    save_checkpoint(model, tmp_path / "ckpt")
    loaded = load_checkpoint(tmp_path / "ckpt")
    for name in model.params.names():
        assert np.array_equal(loaded.params[name].data, model.params[name].data)
