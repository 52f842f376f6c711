import dataclasses

import numpy as np
import pytest

from faxbev.errors import ConfigurationError, NonFiniteError
from faxbev.io import checkpoint_bytes
from faxbev.models import build_model
from faxbev.scenes import SceneConfig
from faxbev.train import (
    SceneData,
    TrainConfig,
    build_dataset,
    evaluate,
    forward_scene,
    render_scene_data,
    scene_seeds,
    train_model,
    warm_start,
)


@pytest.fixture(scope="module")
def tiny_set():
    return build_dataset(SceneConfig(), range(4))


def quiet(**kw):
    base = dict(train_scenes=4, epochs=1, batch_size=2, warmup_steps=0)
    base.update(kw)
    return TrainConfig(**base)


class TestData:
    def test_scene_data(self, tiny_set):
        d = tiny_set[0]
        assert d.images.dtype == np.uint8 and d.images.shape == (4, 4, 32, 64, 3)
        assert d.labels.shape == (4, 64, 64) and d.visible.shape == (4, 64, 64)
        assert np.array_equal(d.label, d.labels[0])

    def test_view_reorders_ego(self, tiny_set):
        d = tiny_set[1]
        images, poses, label, visible = d.view(2)
        assert np.array_equal(images[0], d.images[2].astype(np.float32) / 255.0)
        assert poses[0] is d.poses[2] and poses[1:] == [d.poses[0], d.poses[1], d.poses[3]]
        assert np.array_equal(label, d.labels[2]) and np.array_equal(visible, d.visible[2])

    def test_render_is_pure(self):
        a, b = render_scene_data(SceneConfig(), 9), render_scene_data(SceneConfig(), 9)
        assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)

    def test_seed_splits_disjoint(self):
        cfg = TrainConfig(train_scenes=50)
        tr, ev = set(scene_seeds(cfg, "train")), set(scene_seeds(cfg, "eval", 200))
        assert len(tr) == 50 and not tr & ev
        assert not set(scene_seeds(dataclasses.replace(cfg, seed=1), "train")) & tr


class TestConfig:
    def test_round_trip(self):
        cfg = TrainConfig(seed=3, lr=1e-3, scene=SceneConfig(agent_count=(2, 3)))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError):
            TrainConfig.from_dict({"learning_rate": 1.0})

    @pytest.mark.parametrize("key", ["any_agent_as_ego", "agent_subset_prob", "camera_dropout"])
    def test_probabilities_in_unit_interval(self, key):
        with pytest.raises(ConfigurationError):
            TrainConfig(**{key: 1.5})

    def test_bad_dtype(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(dtype="f16").np_dtype()


class TestTraining:
    def test_one_epoch_smoke(self, tiny_set):
        model = build_model("single", TrainConfig().model, seed=0)
        recs = train_model(model, tiny_set, quiet())
        assert len(recs) == 1 and np.isfinite(recs[0]["loss"]) and not model.training

    def test_loss_decreases_when_overfitting(self, tiny_set):
        cfg = quiet(epochs=5, batch_size=4, lr=2e-3, min_lr=2e-3, any_agent_as_ego=0.0)
        model = build_model("single", cfg.model, seed=0)
        losses = [r["loss"] for r in train_model(model, tiny_set, cfg)]
        assert all(b < a for a, b in zip(losses, losses[1:])), losses

    def test_deterministic(self, tiny_set):
        states = []
        for _ in range(2):
            model = build_model("cobevt", TrainConfig().model, seed=5)
            train_model(model, tiny_set[:2], quiet(seed=5, agent_subset_prob=0.5))
            states.append(checkpoint_bytes(model.state_dict()))
        assert states[0] == states[1]

    def test_camera_dropout_only_affects_cooperative_training(self, tiny_set):
        def state(kind, p):
            model = build_model(kind, TrainConfig().model, seed=3)
            train_model(model, tiny_set[:2], quiet(camera_dropout=p))
            return checkpoint_bytes(model.state_dict())
        assert state("single", 0.0) == state("single", 1.0)
        assert state("cobevt", 0.0) != state("cobevt", 1.0)

    def test_non_finite_loss_aborts(self, tiny_set):
        model = build_model("single", TrainConfig().model, seed=0)
        model.decoder.head.bias.data[...] = np.nan
        with pytest.raises(NonFiniteError, match="step 0.*scene seeds"):
            train_model(model, tiny_set, quiet())

    def test_empty_training_set(self):
        with pytest.raises(ConfigurationError):
            train_model(build_model("single", TrainConfig().model), [], quiet())

    def test_validation_iou_logged(self, tiny_set):
        logged = []
        model = build_model("single", TrainConfig().model, seed=0)
        train_model(model, tiny_set[:2], quiet(), val=tiny_set[2:], log=logged.append)
        assert 0.0 <= logged[0]["val_iou"] <= 1.0


class TestWarmStartAndEval:
    def test_warm_start_copies_shared_weights(self):
        cfg = TrainConfig().model
        single, coop = build_model("single", cfg, seed=1), build_model("cobevt", cfg, seed=2)
        warm_start(coop, single)
        s, c = single.state_dict(), coop.state_dict()
        assert all(np.array_equal(s[k], c[k]) for k in s)
        assert any(k.startswith("fusebevt") for k in c)

    def test_warm_start_shape_mismatch(self):
        cfg = TrainConfig().model
        other = dataclasses.replace(cfg, decoder=dataclasses.replace(cfg.decoder, num_classes=3))
        with pytest.raises(ConfigurationError):
            warm_start(build_model("cobevt", cfg), build_model("single", other))

    def test_evaluate_matches_per_scene_counts(self, tiny_set):
        model = build_model("cobevt", TrainConfig().model, seed=0).eval()
        res = evaluate(model, tiny_set, batch_size=3)
        inter = union = 0
        for d in tiny_set:
            pred = forward_scene(model, d).data.argmax(-1)
            p, t = (pred == 1) & d.visible[0], (d.label == 1) & d.visible[0]
            inter += int((p & t).sum())
            union += int((p | t).sum())
        assert (res["intersection"], res["union"]) == (inter, union)

    def test_max_agents_one_is_ego_only_path(self, tiny_set):
        model = build_model("cobevt", TrainConfig().model, seed=0)
        ego_only = [SceneData(d.images[:1], d.poses[:1], d.rigs, d.labels[:1], d.visible[:1], d.seed)
                    for d in tiny_set]
        assert evaluate(model, tiny_set, max_agents=1) == evaluate(model, ego_only)

    def test_dropping_all_cameras_blinds_single_agent(self, tiny_set):
        model = build_model("single", TrainConfig().model, seed=0)
        d = tiny_set[0]
        a = forward_scene(model, d, drop_cameras=4).data
        blank = SceneData(np.zeros_like(d.images), d.poses, d.rigs, d.labels, d.visible, d.seed)
        assert np.array_equal(a, forward_scene(model, blank).data)

    def test_evaluate_restores_mode(self, tiny_set):
        model = build_model("single", TrainConfig().model).train()
        evaluate(model, tiny_set[:1])
        assert model.training
