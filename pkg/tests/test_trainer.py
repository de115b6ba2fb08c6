import json
import math
import os

import numpy as np
import pytest
import tensorflow as tf

from decola.config import DataConfig, LossConfig, ModelConfig, OptimizerConfig, RunConfig
from decola.errors import CheckpointError, ManifestError, TrainingDivergedError
from decola.ml.matching import LossBreakdown
from decola.ml.model import load_checkpoint, read_header
from decola.schemas import Annotation
from decola.services.pseudo_labeler import expand_dataset
from decola.services.trainer import Trainer, build_optimizer, current_learning_rate, train_phase1, train_phase2
from decola.utils.manifest import load_manifest, save_manifest
from decola.utils.shapes import generate_shapes_dataset

from tests.conftest import MICRO_MODEL


def run_config(run_dir, data_dir, **overrides):
    values = dict(
        seed=1,
        run_dir=str(run_dir),
        steps=2,
        checkpoint_every=1,
        eval_every=2,
        log_every=1,
        model=ModelConfig(**MICRO_MODEL),
        loss=LossConfig(first_stage_topk=50),
        data=DataConfig(data_dir=str(data_dir), batch_size=2, mix_ratio=(1, 1)),
    )
    values.update(overrides)
    return RunConfig(**values)


def read_metrics(run_dir):
    with open(os.path.join(run_dir, "metrics.jsonl")) as f:
        return [json.loads(line) for line in f]


@pytest.fixture(scope="module")
def phase1(mini_dataset, tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("phase1")
    cfg = run_config(run_dir, mini_dataset)
    return cfg, train_phase1(cfg)


class TestPhase1:
    def test_checkpoints_and_metrics(self, phase1):
        cfg, final = phase1
        assert final == os.path.join(cfg.run_dir, "ckpt-final.bin")
        for name in ["ckpt-1.bin", "ckpt-2.bin", "ckpt-final.bin", "config.resolved.json"]:
            assert os.path.exists(os.path.join(cfg.run_dir, name))
        metrics = read_metrics(cfg.run_dir)
        assert [m["step"] for m in metrics] == [1, 2]
        for record in metrics:
            assert {"lr", "total", "cls", "giou", "l1", "first_stage"} <= set(record)
            assert math.isfinite(record["total"])
        assert 0.0 <= metrics[-1]["val_base_c_map@20"] <= 1.0

    def test_header(self, phase1):
        cfg, final = phase1
        header = read_header(final)
        assert header.mode == "phase1"
        assert header.step == 2
        assert header.d == 16 and header.D == 2 and header.n == 4
        assert header.seed == 1

    def test_parameters_changed(self, phase1):
        cfg, final = phase1
        assert read_header(final).param_digest != read_header(os.path.join(cfg.run_dir, "ckpt-1.bin")).param_digest

    def test_resume_matches_uninterrupted_run(self, phase1, mini_dataset, tmp_path):
        cfg, final = phase1
        no_eval = DataConfig(data_dir=str(mini_dataset), batch_size=2, val_manifest="absent.json")
        interrupted = run_config(tmp_path, mini_dataset, steps=1, data=no_eval)
        train_phase1(interrupted)
        resumed = run_config(tmp_path, mini_dataset, data=no_eval, resume_from=str(tmp_path / "ckpt-1.bin"))
        train_phase1(resumed)

        assert [m["step"] for m in read_metrics(str(tmp_path))] == [1, 2]
        expected, actual = load_checkpoint(final), load_checkpoint(str(tmp_path / "ckpt-final.bin"))
        for a, b in zip(expected.weights, actual.weights):
            np.testing.assert_allclose(a.numpy(), b.numpy(), atol=1e-6)

    def test_refuses_novel_boxes(self, mini_dataset, tmp_path):
        train = load_manifest(str(mini_dataset / "train.json"))
        novel = Annotation(image_id=train.images[0].id, category=train.vocabulary.split["novel"][0], bbox=[1, 1, 9, 9])
        save_manifest(
            train.model_copy(update={
                "image_root": str(mini_dataset / "images"),
                "annotations": train.annotations + [novel],
            }),
            str(tmp_path / "train.json"),
        )
        cfg = run_config(tmp_path / "run", tmp_path)
        with pytest.raises(ManifestError) as exc:
            train_phase1(cfg)
        assert exc.value.field_path == f"annotations.{len(train.annotations)}.category"

    def test_loss_decreases_on_full_batches(self, tmp_path):
        data = tmp_path / "data"
        generate_shapes_dataset(seed=11, out_dir=str(data), n_train=4, n_val=1, n_weak=1, image_size=64, dim=16)
        cfg = run_config(
            tmp_path / "run",
            data,
            steps=50,
            checkpoint_every=50,
            optimizer=OptimizerConfig(learning_rate=1e-3, decay_milestones=[0.9]),
            data=DataConfig(data_dir=str(data), batch_size=4, val_manifest="absent.json"),
        )
        train_phase1(cfg)
        totals = [m["total"] for m in read_metrics(cfg.run_dir)]
        assert len(totals) == 50
        assert np.mean(totals[-5:]) < np.mean(totals[:5])


class TestPhase2:
    def test_finetune_from_phase1(self, phase1, mini_dataset, tmp_path):
        _, phase1_final = phase1
        labeler = load_checkpoint(phase1_final)
        pseudo_path = str(tmp_path / "pseudo.json")
        expand_dataset(labeler, str(mini_dataset / "weak.json"), [32, 64], pseudo_path, labeler="phase1")

        cfg = run_config(tmp_path / "run", mini_dataset, phase=2)
        final = train_phase2(cfg, phase1_checkpoint=phase1_final, pseudo_manifest=pseudo_path)
        header = read_header(final)
        assert header.mode == "phase2"
        metrics = read_metrics(cfg.run_dir)
        assert {"val_map", "val_map_base", "val_map_novel"} <= set(metrics[-1])

    def test_learned_objectness_baseline(self, mini_dataset, tmp_path):
        model = ModelConfig(**{**MICRO_MODEL, "query_selection": "learned"})
        cfg = run_config(tmp_path, mini_dataset, phase=2, steps=1, model=model)
        assert os.path.exists(train_phase2(cfg))

    def test_vocabulary_mismatch(self, phase1, tmp_path):
        _, phase1_final = phase1
        other = tmp_path / "other"
        generate_shapes_dataset(seed=4, out_dir=str(other), n_train=2, n_val=1, n_weak=1, dim=16)
        with pytest.raises(CheckpointError):
            train_phase2(run_config(tmp_path / "run", other, phase=2), phase1_checkpoint=phase1_final)


class TestTrainerLoop:
    def test_divergence(self, micro_model, tmp_path):
        cfg = run_config(tmp_path, tmp_path)
        trainer = Trainer(cfg, micro_model, build_optimizer(cfg))
        nan = tf.constant(float("nan"))

        def sample_loss(sample, box_loss, seed):
            return LossBreakdown(nan, nan, nan, nan, nan)

        with pytest.raises(TrainingDivergedError) as exc:
            trainer.run(0, lambda step: [(None, True)], sample_loss)
        assert exc.value.last_good_checkpoint is None
        assert exc.value.details["step"] == 1

    def test_step_decay(self, tmp_path):
        cfg = run_config(tmp_path, tmp_path, steps=10, optimizer=OptimizerConfig(learning_rate=1e-3, decay_milestones=[0.5]))
        optimizer = build_optimizer(cfg)
        assert current_learning_rate(optimizer) == pytest.approx(1e-3)
        optimizer.iterations.assign(6)
        assert current_learning_rate(optimizer) == pytest.approx(1e-4)

    def test_only_l2_clipping(self, tmp_path):
        cfg = run_config(tmp_path, tmp_path, optimizer=OptimizerConfig(grad_clip_norm_type=1.0))
        with pytest.raises(ValueError):
            build_optimizer(cfg)


class TestRunConfig:
    def test_overrides(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"steps": 5, "model": {"embed_dim": 32, "num_heads": 4}}))
        cfg = RunConfig.load(str(path), **{"model.embed_dim": 16, "data.batch_size": 3, "seed": None})
        assert cfg.steps == 5
        assert cfg.model.embed_dim == 16 and cfg.model.num_heads == 4
        assert cfg.data.batch_size == 3
        assert cfg.seed == 7

    def test_heads_must_divide_dim(self):
        with pytest.raises(ValueError):
            ModelConfig(embed_dim=10, num_heads=4)

    def test_resolved_config_round_trip(self, tmp_path):
        cfg = run_config(tmp_path, tmp_path)
        path = cfg.write_resolved()
        with open(path) as f:
            assert RunConfig.model_validate(json.load(f)) == cfg
