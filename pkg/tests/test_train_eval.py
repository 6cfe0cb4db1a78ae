import numpy as np
import pytest

from pointgpt_nn.errors import ClassMismatch, ConfigError
from pointgpt_nn.gpt import GptConfig, GptModel, prepare_sample
from pointgpt_nn.npe import NpeConfig
from pointgpt_nn.pc_core import PointCloud, build_patches, normalize_unit_sphere
from pointgpt_nn.train_eval import (ALPHA_GRID, BETA_GRID, CloudDataset, Metrics, Schedule, augment_sample,
                                    evaluate, fusion_ablation, fusion_site, grid_search_alpha_beta,
                                    pretrain, random_rotation, stage_ablation, train)


def test_metrics_perfect():
    m = Metrics.from_predictions([1, 2, 3, 3], [1, 2, 3, 3], 3)
    assert m.oa == 1.0 and m.macc == 1.0


def test_metrics_hand_count():
    m = Metrics.from_predictions([1, 1, 2, 2], [1, 1, 1, 1], 2)
    assert m.oa == 0.5 and m.macc == 0.5
    np.testing.assert_array_equal(m.confusion, [[2, 0], [2, 0]])


def test_metrics_manual_tally():
    g = np.random.default_rng(11)
    true, pred = g.integers(1, 5, 20), g.integers(1, 5, 20)
    m = Metrics.from_predictions(true, pred, 4)
    tally = [[0] * 4 for _ in range(4)]
    for t, p in zip(true, pred):
        tally[t - 1][p - 1] += 1
    np.testing.assert_array_equal(m.confusion, tally)
    assert m.total == 20


def test_macc_skips_absent_classes():
    m = Metrics.from_predictions([1, 1, 2], [1, 2, 2], 5)
    assert m.macc == pytest.approx(0.75)


def test_oa_equals_macc_for_balanced_equal_recall():
    m = Metrics(np.array([[3, 1, 0], [0, 3, 1], [1, 0, 3]]))
    assert m.oa == m.macc == 0.75


def tiny_cfg(**kw):
    base = dict(n_tokens=8, group_size=8, d_model=12, n_heads=2, extractor_depth=1, generator_depth=1,
                ffn_dim=16, embed_hidden=8, head_hidden=8, num_classes=3,
                npe=NpeConfig(initial_dim=12, stages=1))
    base.update(kw)
    return GptConfig(**base)


def dataset(n=6, seed=0, points=64):
    g = np.random.default_rng(seed)
    return CloudDataset([PointCloud(g.normal(size=(points, 3)) * (1 + i % 3), label=1 + i % 3, id=str(i))
                         for i in range(n)])


def test_evaluate_class_mismatch():
    cfg = tiny_cfg(num_classes=2)
    with pytest.raises(ClassMismatch):
        evaluate(GptModel(cfg), dataset(3).samples(cfg))


def test_zero_epochs_is_a_no_op():
    cfg = tiny_cfg()
    model = GptModel(cfg)
    before = {k: v.data.copy() for k, v in model.params.items()}
    result = train(model, dataset(), dataset(3, seed=1), Schedule(epochs=0))
    assert result.log == [] and result.model is model
    for k, v in model.params.items():
        np.testing.assert_array_equal(v.data, before[k])


def test_train_log_is_deterministic():
    cfg = tiny_cfg()
    sched = Schedule(epochs=3, batch_size=4, base_lr=1e-3, rotate="any", jitter=0.001)
    runs = [train(GptModel(cfg), dataset(), dataset(3, seed=1), sched, seed=7) for _ in range(2)]
    assert runs[0].log_csv() == runs[1].log_csv()
    assert runs[0].log_csv().splitlines()[0] == "epoch,lr,train_loss,val_oa,val_macc"
    assert len(runs[0].log) == 3 and runs[0].log[0]["lr"] == 1e-3
    best = max(r["val_oa"] for r in runs[0].log)
    assert runs[0].best_epoch == next(r["epoch"] for r in runs[0].log if r["val_oa"] == best)


def test_logit_interpolation_training_builds_bank():
    cfg = tiny_cfg(fusion_mode="logit_interpolation")
    result = train(GptModel(cfg), dataset(), dataset(3, seed=1), Schedule(epochs=1, batch_size=6))
    assert result.model.memory_bank is not None and len(result.model.memory_bank.labels) == 6


def test_pretrain_rows():
    cfg = tiny_cfg(extra_mask_ratio=0.25)
    rows = pretrain(GptModel(cfg), dataset(), Schedule(epochs=2, batch_size=3, base_lr=1e-3))
    assert [r["epoch"] for r in rows] == [1, 2]
    assert all(r["extra_mask_ratio"] == 0.25 for r in rows)


def test_schedule_validation():
    with pytest.raises(ConfigError):
        Schedule(rotate="sideways")
    with pytest.raises(ConfigError):
        Schedule(batch_size=0)


def test_rotation_augment_equals_rebuilt_patches(rng):
    cfg = tiny_cfg(fusion_mode="none")
    cloud = normalize_unit_sphere(PointCloud(rng.normal(size=(80, 3)), label=1))
    sample = prepare_sample(cloud, cfg)
    seed_rng = np.random.default_rng(3)
    aug = augment_sample(sample, seed_rng, Schedule(rotate="any"))
    r = random_rotation(np.random.default_rng(3))
    assert np.allclose(r @ r.T, np.eye(3)) and np.isclose(np.linalg.det(r), 1.0)
    rebuilt = build_patches(normalize_unit_sphere(PointCloud(cloud.points @ r.T)), cfg.n_tokens, cfg.group_size)
    np.testing.assert_allclose(aug.centers, rebuilt.centers, atol=1e-9)
    np.testing.assert_allclose(aug.patches, rebuilt.patches, atol=1e-9)


class CountingRunner:
    def __init__(self):
        self.configs = []

    def __call__(self, cfg, train_data, val_data, schedule, seed):
        self.configs.append(cfg)
        oa = (cfg.npe.alpha % 7 + cfg.npe.beta % 5) / 20.0
        return Metrics(np.array([[int(oa * 100), 100 - int(oa * 100)], [0, 100]]))


def test_grid_search_default_grid_has_25_cells():
    runner = CountingRunner()
    raw, summary = grid_search_alpha_beta(tiny_cfg(), None, None, Schedule(), runner=runner)
    assert len(runner.configs) == len(raw) == 25
    assert {(c.npe.alpha, c.npe.beta) for c in runner.configs} == {(a, b) for a in ALPHA_GRID for b in BETA_GRID}
    assert [r["alpha"] for r in summary] == list(ALPHA_GRID)
    for s in summary:
        rows = [r for r in raw if r["alpha"] == s["alpha"]]
        best = max(r["oa"] for r in rows)
        assert s["best_oa"] == best
        assert s["best_beta"] == next(r["beta"] for r in rows if r["oa"] == best)


def test_single_cell_grid_equals_one_run():
    cfg, train_d, val_d = tiny_cfg(), dataset(), dataset(3, seed=1)
    sched = Schedule(epochs=1, batch_size=6)
    raw, summary = grid_search_alpha_beta(cfg, train_d, val_d, sched, alphas=(1000.0,), betas=(100.0,))
    direct = train(GptModel(cfg), train_d, val_d, sched).best_metrics
    assert raw[0]["oa"] == direct.oa and summary == [{"alpha": 1000.0, "best_oa": direct.oa, "best_beta": 100.0}]


def test_stage_ablation_rows_echo_config():
    runner = CountingRunner()
    rows = stage_ablation(tiny_cfg(), None, None, Schedule(), runner=runner)
    assert [r["stages"] for r in rows] == [1, 2, 3, 4, 5] == [r["npe.stages"] for r in rows]
    base = tiny_cfg()
    for c in runner.configs:
        assert c.__class__(**{**c.__dict__, "npe": base.npe}) == base


def test_fusion_ablation_site_descriptors():
    runner = CountingRunner()
    rows = fusion_ablation(GptConfig(), None, None, Schedule(), runner=runner)
    assert {r["method"]: r["data_dimension"] for r in rows} == {
        "logit_interpolation": "32x8", "feature_embedding": "32x512x384"}
    assert fusion_site(tiny_cfg(), 4, "feature_embedding") == "4x8x12"
