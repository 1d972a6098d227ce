import numpy as np
import pytest

from catrans import checkpoint as ckpt
from catrans.config import ModelConfig, tiny_config
from catrans.episodes import DatasetSplit, generate_episode
from catrans.model import CATrans
from catrans.tensor import Tensor
from catrans.train import (NumericFailure, OptimState, ablation_csv, adamw_step, evaluate, evaluate_checkpoint,
                           model_predictor, oracle_predictor, train)


@pytest.fixture(scope="module")
def small_cfg():
    return ModelConfig(image_size=32, steps=12, decay_step=6, eval_every=6, val_episodes=3, test_episodes=6,
                       eval_seeds=(0, 1), base_lr=5e-4)


def test_constant_gradient_step_tends_to_lr():
    p = Tensor(np.zeros(1), requires_grad=True)
    state = OptimState.for_params([p], weight_decay=0.0)
    prev = 0.0
    for _ in range(3000):
        adamw_step([p], [np.array([-2.5])], state, lr=1e-3)
        step, prev = p.data[0] - prev, p.data[0]
    assert step == pytest.approx(1e-3, rel=1e-6)


def test_weight_decay_alone_shrinks_geometrically():
    p = Tensor(np.full(2, 3.0), requires_grad=True)
    state = OptimState.for_params([p], weight_decay=0.1)
    for _ in range(7):
        adamw_step([p], [np.zeros(2)], state, lr=0.05)
    np.testing.assert_allclose(p.data, 3.0 * (1 - 0.05 * 0.1) ** 7, rtol=1e-12)


def test_overfits_one_frozen_episode():
    cfg = ModelConfig(image_size=32, steps=200, decay_step=200, base_lr=1e-3, eval_every=10_000, val_episodes=1,
                      flip=False)
    ep = generate_episode(DatasetSplit(0), "train", 1, 7, cfg)
    man, _ = train(cfg, episode_fn=lambda step: ep)
    assert man.losses[-1][1] < 0.1 * man.losses[0][1]


def test_same_seed_gives_identical_metrics_csv(tmp_path):
    cfg = tiny_config(image_size=32, steps=6, eval_every=3)
    train(cfg, tmp_path / "a")
    train(cfg, tmp_path / "b")
    a, b = (tmp_path / "a" / "metrics.csv").read_bytes(), (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a == b and a.startswith(b"step,loss,lr,val_mIoU")
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()
    train(cfg.replace(seed=1), tmp_path / "c")
    assert (tmp_path / "c" / "metrics.csv").read_bytes() != a


def test_zero_lr_and_decay_is_a_fixed_point():
    cfg = tiny_config(base_lr=0.0, weight_decay=0.0, steps=4)
    model = CATrans(cfg)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    train(cfg, model=model)
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_run_directory_contents(tmp_path, small_cfg):
    man, _ = train(small_cfg, tmp_path)
    for name in ("config.txt", "metrics.csv", "manifest.txt", "model.ckpt", "best.ckpt"):
        assert (tmp_path / name).exists(), name
    assert ModelConfig.load(tmp_path / "config.txt") == small_cfg
    text = (tmp_path / "manifest.txt").read_text()
    assert small_cfg.config_hash() in text
    assert len(man.losses) == 12 and [s for s, _ in man.evals] == [5, 11]
    assert man.losses[6][2] == pytest.approx(small_cfg.base_lr * 0.1)


def test_checkpoint_evaluation_reproduces_miou(tmp_path, small_cfg):
    _, model = train(small_cfg, tmp_path)
    direct = evaluate(model_predictor(model), small_cfg, 0, 1, 6, (0, 1))
    loaded = evaluate_checkpoint(tmp_path / "model.ckpt", small_cfg, 0, 1, 6, (0, 1))
    for (_, a), (_, b) in zip(direct.runs, loaded.runs):
        assert abs(a - b) <= 1e-6
    with pytest.raises(ckpt.CheckpointError):
        evaluate_checkpoint(tmp_path / "model.ckpt", small_cfg.replace(seed=9), 0, 1, 6, (0,))


def test_oracle_and_all_background_predictors():
    cfg = ModelConfig(image_size=32)
    assert evaluate(oracle_predictor, cfg, 2, 1, 10, (0,)).mean == 1.0
    assert evaluate(lambda ep: np.zeros((32, 32), np.float32), cfg, 2, 1, 10, (0,)).mean == 0.0


def test_oracle_checkpoint_scores_one(tmp_path):
    cfg = ModelConfig(image_size=32)
    path = ckpt.save(tmp_path / "oracle.ckpt", {}, cfg.config_hash(), kind="oracle")
    assert evaluate_checkpoint(path, cfg, 1, 5, 4, (0, 1)).mean == 1.0


def test_untrained_model_is_near_chance():
    cfg = ModelConfig()
    res = evaluate(model_predictor(CATrans(cfg)), cfg, 0, 1, 40, (0,))
    assert res.mean <= 0.15


def test_non_finite_loss_aborts_with_dump(tmp_path):
    cfg = tiny_config(steps=3)
    model = CATrans(cfg)
    model.decoder.head.bias.data[...] = np.inf
    with pytest.raises(NumericFailure):
        train(cfg, tmp_path, model=model)
    assert "reason=" in (tmp_path / "failure.txt").read_text()


def test_ablation_csv_layout():
    from catrans.train import AblationRow
    text = ablation_csv([AblationRow("branch", "full", [0, 1], [0.5, 0.7])])
    header, row = text.strip().splitlines()
    assert header == "axis,setting,mean_mIoU,std_mIoU,seeds,per_seed_mIoU"
    assert row.startswith("branch,full,0.6") and row.endswith("0;1,0.5;0.7")
