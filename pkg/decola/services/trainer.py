"""
Phase 1 (language-conditioned) and Phase 2 (open-vocabulary) training loops
"""
import json
import logging
import math
import os
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np
import tensorflow as tf

from decola.config import RunConfig, settings
from decola.errors import CheckpointError, ManifestError, TrainingDivergedError
from decola.ml.matching import GroundTruth, LossBreakdown, LossWeights, first_stage_loss, set_loss
from decola.ml.model import DecolaDetector, load_weights, read_header, save_checkpoint, seed_everything
from decola.ml.selection import LEARNED_OBJECTNESS
from decola.ml.vocabulary import OBJECT_PHRASE, Vocabulary
from decola.schemas import DatasetManifest
from decola.services.evaluator import conditioned_map, open_vocab_map
from decola.utils.manifest import SampleRef, assert_base_only, epoch_order, load_manifest, mix_datasets
from decola.utils.samples import Sample, SampleLoader

logger = logging.getLogger(__name__)

EVAL_IMAGES = 50


def build_optimizer(cfg: RunConfig) -> tf.keras.optimizers.Optimizer:
    """AdamW with step decay and global L2-norm gradient clipping"""
    opt = cfg.optimizer
    boundaries = [max(1, int(m * cfg.steps)) for m in opt.decay_milestones]
    values = [opt.learning_rate * opt.decay_factor ** i for i in range(len(boundaries) + 1)]
    schedule = tf.keras.optimizers.schedules.PiecewiseConstantDecay(boundaries, values)
    if opt.grad_clip_norm_type != 2.0:
        raise ValueError(f"Only L2 gradient clipping is supported (got norm type {opt.grad_clip_norm_type})")
    return tf.keras.optimizers.AdamW(
        learning_rate=schedule,
        weight_decay=opt.weight_decay,
        global_clipnorm=opt.grad_clip_value,
        jit_compile=False,
    )


def vocabulary_for(manifest: DatasetManifest, dim: int) -> Vocabulary:
    return Vocabulary.from_dict(manifest.vocabulary.model_dump(), dim=dim)


def _checkpoint_path(run_dir: str, step) -> str:
    return os.path.join(run_dir, f"ckpt-{step}.bin")


def _skip(iterator: Iterator, count: int) -> Iterator:
    for _ in range(count):
        next(iterator)
    return iterator


def current_learning_rate(optimizer: tf.keras.optimizers.Optimizer) -> float:
    lr = optimizer.learning_rate
    if isinstance(lr, tf.keras.optimizers.schedules.LearningRateSchedule):
        lr = lr(optimizer.iterations)
    return float(lr)


class Trainer:
    """
    Shared loop: batches of per-image forward passes under one GradientTape,
    metrics.jsonl logging, periodic evaluation and checkpoints.
    """

    def __init__(self, cfg: RunConfig, model: DecolaDetector, optimizer: tf.keras.optimizers.Optimizer):
        self.cfg = cfg
        self.model = model
        self.optimizer = optimizer
        self.weights = LossWeights.from_config(cfg.loss)
        # slots for every trainable variable, gradient or not, so checkpoints resume in either phase
        self.optimizer.build(model.trainable_variables)
        self.last_good_checkpoint: Optional[str] = None
        os.makedirs(cfg.run_dir, exist_ok=True)
        self.metrics_path = os.path.join(cfg.run_dir, "metrics.jsonl")

    def save(self, step, global_step: int) -> str:
        path = _checkpoint_path(self.cfg.run_dir, step)
        save_checkpoint(self.model, path, global_step, self.cfg.seed, self.optimizer)
        self.last_good_checkpoint = path
        return path

    def _log(self, record: dict) -> None:
        with open(self.metrics_path, "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def run(
        self,
        start_step: int,
        next_batch: Callable[[int], List[Tuple[Sample, bool]]],
        sample_loss: Callable[[Sample, bool, int], LossBreakdown],
        evaluate: Optional[Callable[[], Dict[str, float]]] = None,
    ) -> str:
        cfg = self.cfg
        if start_step == 0:
            open(self.metrics_path, "w").close()
        for step in range(start_step, cfg.steps):
            batch = next_batch(step)
            with tf.GradientTape() as tape:
                losses = [sample_loss(sample, box_loss, step * 1000 + i) for i, (sample, box_loss) in enumerate(batch)]
                total = tf.add_n([l.total for l in losses]) / float(len(losses))
            if not math.isfinite(float(total)):
                raise TrainingDivergedError(
                    f"Loss became {float(total)} at step {step + 1}",
                    last_good_checkpoint=self.last_good_checkpoint,
                    step=step + 1,
                )
            grads = tape.gradient(total, self.model.trainable_variables)
            pairs = [(g, v) for g, v in zip(grads, self.model.trainable_variables) if g is not None]
            self.optimizer.apply_gradients(pairs)

            done = step + 1
            if done % cfg.log_every == 0 or done == cfg.steps:
                record = {"step": done, "lr": current_learning_rate(self.optimizer), "total": float(total)}
                for key in ("cls", "giou", "l1", "first_stage"):
                    record[key] = float(np.mean([l.as_dict()[key] for l in losses]))
                if evaluate is not None and (done % cfg.eval_every == 0 or done == cfg.steps):
                    record.update(evaluate())
                self._log(record)
                logger.info(f"step {done}/{cfg.steps} loss {record['total']:.4f}")
            if done % cfg.checkpoint_every == 0:
                self.save(done, done)

        final = self.save("final", cfg.steps)
        self.save(cfg.steps, cfg.steps)
        return final


def _resume(cfg: RunConfig, model: DecolaDetector, optimizer) -> int:
    if not cfg.resume_from:
        return 0
    header = load_weights(model, cfg.resume_from, optimizer)
    logger.info(f"Resuming from {cfg.resume_from} at step {header.step}")
    return header.step


def train_phase1(cfg: RunConfig) -> str:
    """Conditioned training on base-class boxes; returns the final checkpoint path"""
    seed_everything(cfg.seed, settings.DECOLA_THREADS)
    cfg.write_resolved()
    train_path = cfg.data.path(cfg.data.train_manifest)
    train = load_manifest(train_path)
    assert_base_only(train)
    vocabulary = vocabulary_for(train, cfg.model.embed_dim)

    model = DecolaDetector(cfg.model, vocabulary, phase=1)
    optimizer = build_optimizer(cfg)
    start = _resume(cfg, model, optimizer)
    trainer = Trainer(cfg, model, optimizer)

    loader = SampleLoader(train_path, train)
    order = _skip(epoch_order(loader.image_ids, np.random.default_rng([cfg.seed, 2])), start * cfg.data.batch_size)
    base = vocabulary.base_classes

    def next_batch(step: int):
        return [(loader.sample(next(order)), True) for _ in range(cfg.data.batch_size)]

    def sample_loss(sample: Sample, box_loss: bool, seed: int) -> LossBreakdown:
        # conditioning set = exactly the classes present; an empty image conditions on a random base class
        names = sample.classes or [base[int(np.random.default_rng([cfg.seed, seed]).integers(len(base)))]]
        forward = model.forward(sample.image, names, training=True)
        gt_by_class = {name: sample.gt.of_class(name) for name in names}
        first = first_stage_loss(
            forward.first_stage_logits, forward.proposals, gt_by_class,
            cfg.loss.first_stage_topk, trainer.weights, cfg.loss.first_stage_negative_weight,
        )
        return set_loss(forward.output, sample.gt, trainer.weights, first_stage=first)

    evaluate = None
    val_path = cfg.data.path(cfg.data.val_manifest)
    if val_path and os.path.exists(val_path):
        val = SampleLoader(val_path)

        def evaluate() -> Dict[str, float]:
            samples = [_restrict(val.sample(i), set(base)) for i in val.image_ids[:EVAL_IMAGES]]
            results = conditioned_map(model, samples, k=[20], classes=base)
            return {"val_base_c_map@20": results[20].map}

    return trainer.run(start, next_batch, sample_loss, evaluate)


def _restrict(sample: Sample, classes: set) -> Sample:
    keep = [i for i, c in enumerate(sample.gt.classes) if c in classes]
    gt = GroundTruth(sample.gt.boxes[keep], [sample.gt.classes[i] for i in keep])
    return Sample(sample.image_id, sample.image, gt, sample.original_size, sample.resolution)


def train_phase2(cfg: RunConfig, phase1_checkpoint: Optional[str] = None, pseudo_manifest: Optional[str] = None) -> str:
    """
    Open-vocabulary finetuning on human boxes mixed with pseudo boxes.
    Without a Phase 1 checkpoint this trains the learned-objectness baseline from scratch.
    """
    seed_everything(cfg.seed, settings.DECOLA_THREADS)
    phase1_checkpoint = phase1_checkpoint or cfg.phase1_checkpoint
    pseudo_manifest = pseudo_manifest or cfg.data.path(cfg.data.pseudo_manifest)
    cfg.write_resolved()

    train_path = cfg.data.path(cfg.data.train_manifest)
    train = load_manifest(train_path)
    vocabulary = vocabulary_for(train, cfg.model.embed_dim)
    pseudo = load_manifest(pseudo_manifest) if pseudo_manifest else None
    if pseudo is not None and vocabulary_for(pseudo, cfg.model.embed_dim).content_hash() != vocabulary.content_hash():
        raise ManifestError("Pseudo manifest vocabulary differs from the train manifest's", field_path="vocabulary")

    model = DecolaDetector(cfg.model, vocabulary, phase=2)
    optimizer = build_optimizer(cfg)
    if phase1_checkpoint and not cfg.resume_from:
        header = read_header(phase1_checkpoint)
        if header.vocabulary_hash != vocabulary.content_hash():
            raise CheckpointError(
                "Vocabulary hash of the Phase 1 checkpoint does not match the training manifests",
                checkpoint=phase1_checkpoint,
            )
        load_weights(model, phase1_checkpoint)
    elif not phase1_checkpoint and cfg.model.query_selection != "learned":
        logger.warning("Phase 2 without a Phase 1 checkpoint: training from scratch")
    start = _resume(cfg, model, optimizer)
    trainer = Trainer(cfg, model, optimizer)

    strong_loader = SampleLoader(train_path, train)
    pseudo_loader = SampleLoader(pseudo_manifest, pseudo) if pseudo is not None else None
    empty = DatasetManifest(split="train", source="pseudo", vocabulary=train.vocabulary)
    schedule = mix_datasets(train, pseudo or empty, tuple(cfg.data.mix_ratio), cfg.seed)
    schedule = _skip(schedule, start * cfg.data.batch_size)
    key = LEARNED_OBJECTNESS if cfg.model.query_selection == "learned" else OBJECT_PHRASE
    classes = list(cfg.evaluation_vocabulary or vocabulary.classes)

    def load(ref: SampleRef, step: int, index: int) -> Tuple[Sample, bool]:
        if ref.source == "strong":
            return strong_loader.sample(ref.image_id), True
        resolutions = pseudo_loader.resolutions(ref.image_id)
        rng = np.random.default_rng([cfg.seed, step, index])
        resolution = resolutions[int(rng.integers(len(resolutions)))] if resolutions else None
        return pseudo_loader.sample(ref.image_id, resolution), cfg.loss.pseudo_box_loss

    def next_batch(step: int):
        return [load(next(schedule), step, i) for i in range(cfg.data.batch_size)]

    def sample_loss(sample: Sample, box_loss: bool, seed: int) -> LossBreakdown:
        forward = model.forward(sample.image, None, vocabulary=classes, training=True)
        first = first_stage_loss(
            forward.first_stage_logits, forward.proposals, {key: sample.gt.boxes},
            cfg.loss.first_stage_topk, trainer.weights, cfg.loss.first_stage_negative_weight, box_loss,
        )
        return set_loss(
            forward.output, sample.gt, trainer.weights, box_loss=box_loss,
            federated=(cfg.loss.federated_fraction, cfg.seed * 1_000_003 + seed), first_stage=first,
        )

    evaluate = None
    val_path = cfg.data.path(cfg.data.val_manifest)
    if val_path and os.path.exists(val_path):
        val = SampleLoader(val_path)

        def evaluate() -> Dict[str, float]:
            samples = [val.sample(i) for i in val.image_ids[:EVAL_IMAGES]]
            result = open_vocab_map(model, samples, k=100, vocabulary=classes)
            return {
                "val_map": result.map,
                "val_map_base": result.group_map(vocabulary.base_classes) or 0.0,
                "val_map_novel": result.group_map(vocabulary.novel_classes) or 0.0,
            }

    return trainer.run(start, next_batch, sample_loss, evaluate)
