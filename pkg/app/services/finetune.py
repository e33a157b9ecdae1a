# app/services/finetune.py
import logging
import math
from typing import List, Optional, Tuple

import numpy as np

from app.network import (
    BatchTooSmall,
    Classifier,
    FeatureExtractor,
    LinearHead,
    OptState,
    commit_running_stats,
    embed,
    forward,
    forward_head,
    freeze_mask,
    init_extractor,
    init_head,
    loss_and_backward,
    sgd_step,
    stage_names,
    stage_trainable,
)
from app.schemas import (
    AugKind,
    AugPolicy,
    FineTuneConfig,
    NetworkConfig,
    PretrainConfig,
    Schedule,
    TrainTrace,
    UpdateMode,
)
from app.utils.augment import LabeledBatch, ShapeMismatch, apply_policy, check_mix_feasible
from app.utils.datasets import Dataset, Episode
from app.utils.rng import RngStream

logger = logging.getLogger("fewshot_lab.finetune")


def da_active(epoch: int, schedule: Optional[Schedule]) -> bool:
    if epoch < 1:
        raise ValueError(f"epochs are 1-indexed, got {epoch}")
    return schedule is not None and schedule.start <= epoch <= schedule.end


def batch_slices(n: int, batch_size: int, merge_trailing: bool) -> List[slice]:
    """Consecutive batches; a trailing batch of one is folded into its predecessor when merge_trailing."""
    slices = [slice(start, min(start + batch_size, n)) for start in range(0, n, batch_size)]
    if merge_trailing and len(slices) > 1 and n - slices[-1].start == 1:
        slices[-2:] = [slice(slices[-2].start, n)]
    return slices


def _take(batch: LabeledBatch, idx: np.ndarray) -> LabeledBatch:
    return LabeledBatch(batch.images[idx], batch.label_a[idx], batch.label_b[idx], batch.weight_a[idx])


def _check_input_size(images: np.ndarray, cfg: NetworkConfig) -> None:
    if images.shape[1:3] != (cfg.input_size, cfg.input_size):
        raise ShapeMismatch(
            f"images are {images.shape[1]}x{images.shape[2]}, network expects {cfg.input_size}x{cfg.input_size}"
        )


def accuracy(predicted: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.count_nonzero(predicted == labels)) / len(labels)


# ─── Episode fine-tuning ───────────────────────────────────────────────────
class EpisodeTrainer:
    """
    Trains one episode's classifier on its support set.

    Optimiser buffers live for the trainer's lifetime, so a mode switch
    (TwoStage) keeps momentum for groups that stay trainable. Features are
    cached while the extractor has never been trained.
    """

    def __init__(
        self,
        model: Classifier,
        support: LabeledBatch,
        cfg: FineTuneConfig,
        rng: RngStream,
        query: Optional[LabeledBatch] = None,
    ):
        _check_input_size(support.images, model.extractor.config)
        self.model = model
        self.support = support
        self.query = query
        self.cfg = cfg
        self.rng = rng
        self.opt = OptState(cfg.lr, cfg.momentum, cfg.weight_decay)
        self.trace = TrainTrace()
        self._extractor_touched = False
        self._support_features: Optional[np.ndarray] = None
        self._query_features: Optional[np.ndarray] = None

    def _trains_extractor(self, mask) -> bool:
        return any(stage_trainable(s, mask) for s in stage_names(self.model.blocks))

    def run_epoch(self, epoch: int, mode: UpdateMode) -> float:
        """One pass over the shuffled support set; returns the mean batch loss."""
        model, cfg = self.model, self.cfg
        mask = freeze_mask(mode, model.blocks, epoch)
        trains_extractor = self._trains_extractor(mask)
        n = len(self.support)
        if trains_extractor and (cfg.batch_size < 2 or n < 2):
            raise BatchTooSmall(
                f"{mode} trains batch norm; needs batch size and support size >= 2 "
                f"(batch {cfg.batch_size}, support {n})"
            )

        erng = self.rng.fork(f"epoch:{epoch}")
        order = erng.fork("shuffle").permutation(n)
        pool = _take(self.support, order)
        policy = cfg.da_policy
        augment = policy.kind != AugKind.NONE and da_active(epoch, cfg.schedule)
        if augment and policy.kind.is_mixing:
            check_mix_feasible(pool.label_a, policy.mix_mode)
        aug_rng = erng.fork("aug")
        params_rng = aug_rng.fork("params") if cfg.per_epoch_params else None

        use_cache = not trains_extractor and not augment and not self._extractor_touched
        if use_cache and self._support_features is None:
            self._support_features = embed(model.extractor, self.support.images)

        losses = []
        for b, sl in enumerate(batch_slices(n, cfg.batch_size, merge_trailing=trains_extractor)):
            batch = _take(pool, np.arange(n)[sl])
            if augment:
                batch = apply_policy(
                    policy,
                    batch,
                    aug_rng.fork(f"batch:{b}"),
                    pool=pool if policy.kind.is_mixing else None,
                    params_rng=params_rng,
                )
            if use_cache:
                result = forward_head(model, self._support_features[order[sl]])
            else:
                result = forward(model, batch.images, "train", mask)
            loss, grads = loss_and_backward(result.cache, batch, mask)
            commit_running_stats(model, result)
            sgd_step(model.parameters(), grads, self.opt, mask)
            losses.append(loss)

        if trains_extractor:
            self._extractor_touched = True
        return math.fsum(losses) / len(losses)

    def query_accuracy(self) -> float:
        if self.query is None:
            raise ValueError("trainer has no query set")
        if self._extractor_touched:
            features = embed(self.model.extractor, self.query.images)
        else:
            if self._query_features is None:
                self._query_features = embed(self.model.extractor, self.query.images)
            features = self._query_features
        logits = forward_head(self.model, features).logits
        return accuracy(np.argmax(logits, axis=1), self.query.label_a)

    def train(self, first_epoch: int = 1, last_epoch: Optional[int] = None) -> TrainTrace:
        last_epoch = self.cfg.epochs if last_epoch is None else last_epoch
        for epoch in range(first_epoch, last_epoch + 1):
            loss = self.run_epoch(epoch, self.cfg.mode.stage_for_epoch(epoch))
            self.trace.losses.append(loss)
            if self.query is not None:
                self.trace.accuracies.append(self.query_accuracy())
        return self.trace


def episode_head(extractor: FeatureExtractor, n_way: int, episode_rng: RngStream) -> LinearHead:
    return init_head(extractor.feature_dim, n_way, episode_rng.fork("head"), dtype=extractor.dtype)


def finetune_episode(
    pretrained: FeatureExtractor,
    episode: Episode,
    cfg: FineTuneConfig,
    rng: RngStream,
) -> Tuple[Classifier, TrainTrace]:
    """Fresh head from rng/"head", then cfg.epochs of training on a copy of the extractor."""
    model = Classifier(pretrained.copy(), episode_head(pretrained, episode.n_way, rng))
    trainer = EpisodeTrainer(model, episode.support, cfg, rng.fork("train"), query=episode.query)
    trace = trainer.train()
    return model, trace


# ─── Pre-training ──────────────────────────────────────────────────────────
def pretrain(
    source: Dataset,
    cfg: PretrainConfig,
    net_cfg: NetworkConfig,
    rng: RngStream,
) -> Tuple[FeatureExtractor, LinearHead, TrainTrace]:
    """
    Train h1 o f from scratch on the source set with Base Aug at the configured
    preset and step-decayed SGD. The trace's accuracies are training accuracies
    on the augmented batches.
    """
    if source.n_classes < 2:
        raise ValueError(f"pre-training needs at least 2 classes, got {source.n_classes}")
    _check_input_size(source.images, net_cfg)
    extractor = init_extractor(net_cfg, rng.fork("init"))
    head = init_head(extractor.feature_dim, source.n_classes, rng.fork("head"))
    model = Classifier(extractor, head)
    opt = OptState(cfg.lr, cfg.momentum, cfg.weight_decay)
    policy = AugPolicy.build(AugKind.BASE_AUG, cfg.preset)
    data = LabeledBatch.plain(source.images, source.labels)
    trace = TrainTrace()

    for epoch in range(1, cfg.epochs + 1):
        opt.lr = cfg.lr_at(epoch)
        erng = rng.fork(f"epoch:{epoch}")
        order = erng.fork("shuffle").permutation(len(data))
        aug_rng = erng.fork("aug")
        losses, correct = [], 0
        for b, sl in enumerate(batch_slices(len(data), cfg.batch_size, merge_trailing=True)):
            batch = apply_policy(policy, _take(data, order[sl]), aug_rng.fork(f"batch:{b}"))
            result = forward(model, batch.images, "train")
            loss, grads = loss_and_backward(result.cache, batch)
            commit_running_stats(model, result)
            sgd_step(model.parameters(), grads, opt)
            losses.append(loss * len(batch))
            correct += int(np.count_nonzero(np.argmax(result.logits, axis=1) == batch.label_a))
        trace.losses.append(math.fsum(losses) / len(data))
        trace.accuracies.append(correct / len(data))
        logger.info(
            f"pretrain epoch {epoch}/{cfg.epochs} lr={opt.lr:g} "
            f"loss={trace.losses[-1]:.4f} acc={trace.accuracies[-1]:.4f}"
        )
    return model.extractor, model.head, trace


# ─── Diversity ─────────────────────────────────────────────────────────────
def diversity(
    policy: AugPolicy,
    data: Dataset,
    extractor: FeatureExtractor,
    cfg: FineTuneConfig,
    rng: RngStream,
) -> float:
    """Final-epoch mean training loss of a fresh head trained under `policy` on every epoch."""
    if cfg.epochs < 1:
        raise ValueError("diversity needs at least one training epoch")
    train_cfg = cfg.model_copy(update={"da_policy": policy, "schedule": Schedule(start=1, end=cfg.epochs)})
    head = init_head(extractor.feature_dim, data.n_classes, rng.fork("head"), dtype=extractor.dtype)
    model = Classifier(extractor.copy(), head)
    support = LabeledBatch.plain(data.images, data.labels)
    trace = EpisodeTrainer(model, support, train_cfg, rng.fork("train")).train()
    return trace.losses[-1]
