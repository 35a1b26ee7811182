"""Training loop: Adam with linear warm-up, gradient accumulation,
SpecAugment, per-epoch validation, and lowest-val-loss checkpoint selection."""

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NumericError, Tape, no_grad
from .checkpoint import Checkpoint
from .ctc import ctc_loss
from .data import sample_spec_mask
from .model import AdaptationPlan, apply_plan
from .objective import (
    LidHeads,
    ObjectiveConfig,
    build_lid_target,
    combined_loss,
    lid_ctc_loss,
)

log = logging.getLogger(__name__)

# full-scale reference settings: batch 8, 30000 steps per epoch, 10 epochs,
# peak lr 1e-4, 25000-step warm-up, accumulation every 4 micro-steps
FULL_SCALE_REFERENCE = {
    "epochs": 10,
    "steps_per_epoch": 30000,
    "batch_size": 8,
    "accumulation_every": 4,
    "peak_lr": 1e-4,
    "warmup_steps": 25000,
}

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 4
    steps_per_epoch: int = 0  # 0: one pass over the training split
    batch_size: int = 8
    accumulation_every: int = 4
    peak_lr: float = 1e-3
    warmup_steps: int = 0
    seed: int = 0
    plan: AdaptationPlan = None
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    time_masks: tuple = (0, 0)
    feature_masks: tuple = (0, 0)

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1 or self.accumulation_every < 1:
            raise ValueError("epochs, batch_size, accumulation_every must be >= 1")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        # warm-up applies to frozen and low-rank training, not window fine-tuning
        if (
            self.plan is not None
            and self.plan.mode == AdaptationPlan.FINETUNE
            and self.warmup_steps > 0
        ):
            raise ValueError(
                "warmup_steps > 0 is not allowed with a fine-tune window plan"
            )
        self.objective.validate_against(self.plan)


@dataclass
class TrainResult:
    best: Checkpoint
    log: list
    skipped: int
    diverged: str = None


def learning_rate(update_index, peak_lr, warmup_steps):
    """Linear ramp from 0 to peak over the warm-up, then constant."""
    if warmup_steps > 0 and update_index < warmup_steps:
        return peak_lr * update_index / warmup_steps
    return peak_lr


class Adam:
    def __init__(self, named_params):
        self.named_params = list(named_params)
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.t = 0

    def step(self, lr):
        self.t += 1
        bc1 = 1.0 - ADAM_BETA1 ** self.t
        bc2 = 1.0 - ADAM_BETA2 ** self.t
        for name, p in self.named_params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name] = ADAM_BETA1 * self.m[name] + (1 - ADAM_BETA1) * g
            v = self.v[name] = ADAM_BETA2 * self.v[name] + (1 - ADAM_BETA2) * g * g
            p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None


def _hash_params(named):
    digest = hashlib.sha256()
    for name, p in named:
        digest.update(name.encode())
        digest.update(p.data.tobytes())
    return digest.hexdigest()


class _EpochSampler:
    """Per-epoch shuffle; reshuffles when more draws are requested than the
    corpus holds."""

    def __init__(self, n, rng):
        self.n = n
        self.rng = rng
        self.pool = []

    def start_epoch(self):
        self.pool = list(self.rng.permutation(self.n))

    def draw(self, k):
        while len(self.pool) < k:
            self.pool.extend(self.rng.permutation(self.n))
        out = self.pool[:k]
        del self.pool[:k]
        return out


def _encode_corpus(corpus, vocab, objective):
    entries = []
    for utt in corpus.utterances:
        target = vocab.encode(utt.target)
        lid = build_lid_target(utt, vocab) if objective.beta > 0 else None
        entries.append((utt, target, lid))
    return entries


def _utterance_loss(model, heads, utt, target, lid_target, objective, mask):
    """Combined taped loss for one utterance, or None when the primary
    target is unachievable."""
    log_probs, layer_outputs = model.forward(utt.features, spec_mask=mask)
    primary = ctc_loss(log_probs, target)
    if math.isinf(primary.item()):
        return None
    if objective.beta == 0:
        return primary
    lid_losses = []
    for layer in objective.lid_layers:
        aux = lid_ctc_loss(layer_outputs[layer - 1], heads[layer], lid_target)
        if math.isfinite(aux.item()):
            lid_losses.append(aux)
    if not lid_losses:
        # LID target unachievable at every tapped layer: primary loss only
        return primary
    return combined_loss(primary, lid_losses, objective.beta)


def _validation_loss(model, heads, entries, objective):
    total = 0.0
    used = 0
    skipped = 0
    with no_grad():
        for utt, target, lid_target in entries:
            value = _utterance_loss(
                model, heads, utt, target, lid_target, objective, None
            )
            if value is None:
                skipped += 1
                continue
            total += value.item()
            used += 1
    if used == 0:
        return float("inf"), skipped
    return total / used, skipped


def _all_named(model, heads):
    named = dict(model.params())
    if heads is not None:
        named.update(dict(heads.params()))
    return named


def run_training(model, heads, trainable, train_corpus, val_corpus, vocab, config):
    """Core loop shared by adaptation training and upstream pretraining."""
    if not train_corpus.utterances:
        raise ValueError("training split is empty")
    objective = config.objective
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    train_entries = _encode_corpus(train_corpus, vocab, objective)
    val_entries = _encode_corpus(val_corpus, vocab, objective)

    named = _all_named(model, heads)
    trainable_ids = {id(p) for _, p in trainable}
    frozen = [(n, p) for n, p in named.items() if id(p) not in trainable_ids]
    frozen_hash = _hash_params(frozen)

    optimizer = Adam(trainable)
    use_masks = config.time_masks[0] > 0 or config.feature_masks[0] > 0
    use_featurizer = (
        model.plan is not None and model.plan.mode == AdaptationPlan.FROZEN
    )

    sampler = _EpochSampler(len(train_entries), rng)
    steps = config.steps_per_epoch or max(
        1, len(train_entries) // config.batch_size
    )
    best = None
    last_good = None
    records = []
    micro_step = 0
    updates = 0
    total_skipped = 0
    scale = 1.0 / config.accumulation_every

    for epoch in range(1, config.epochs + 1):
        sampler.start_epoch()
        epoch_loss = 0.0
        epoch_used = 0
        epoch_skipped = 0
        lr = learning_rate(max(updates, 1), config.peak_lr, config.warmup_steps)
        for _ in range(steps):
            micro_step += 1
            batch = sampler.draw(config.batch_size)
            try:
                with Tape() as tape:
                    losses = []
                    for idx in batch:
                        utt, target, lid_target = train_entries[idx]
                        mask = None
                        if use_masks:
                            mask = sample_spec_mask(
                                utt.features.shape, config.time_masks,
                                config.feature_masks, rng,
                            )
                        value = _utterance_loss(
                            model, heads, utt, target, lid_target, objective,
                            mask,
                        )
                        if value is None:
                            epoch_skipped += 1
                            continue
                        losses.append(value)
                    if losses:
                        batch_loss = losses[0]
                        for term in losses[1:]:
                            batch_loss = batch_loss + term
                        batch_loss = batch_loss / len(losses)
                        if math.isnan(batch_loss.item()):
                            raise NumericError(
                                f"nan loss at micro-step {micro_step}"
                            )
                        epoch_loss += batch_loss.item() * len(losses)
                        epoch_used += len(losses)
                        tape.backward(batch_loss * scale)
            except NumericError as exc:
                msg = f"diverged: {exc}"
                log.error(msg)
                return TrainResult(
                    best=best or last_good, log=records,
                    skipped=total_skipped + epoch_skipped, diverged=msg,
                )
            if micro_step % config.accumulation_every == 0:
                updates += 1
                lr = learning_rate(updates, config.peak_lr, config.warmup_steps)
                optimizer.step(lr)
                optimizer.zero_grad()
                if use_featurizer:
                    drift = abs(model.featurizer.effective_weights.sum() - 1.0)
                    assert drift <= 1e-12, f"featurizer weights drifted: {drift}"

        if _hash_params(frozen) != frozen_hash:
            raise RuntimeError("frozen parameters changed during training")

        val_loss, val_skipped = _validation_loss(model, heads, val_entries, objective)
        record = {
            "epoch": epoch,
            "train_loss": epoch_loss / max(1, epoch_used),
            "val_loss": val_loss,
            "lr": lr,
            "skipped_utts": epoch_skipped,
        }
        records.append(record)
        total_skipped += epoch_skipped
        log.info(
            "epoch %d: train %.4f val %.4f lr %.2e skipped %d (val skipped %d)",
            epoch, record["train_loss"], val_loss, lr, epoch_skipped, val_skipped,
        )
        if math.isfinite(val_loss):
            snap = Checkpoint(
                params={n: p.data.copy() for n, p in named.items()},
                val_loss=val_loss,
                step=updates,
            )
            last_good = snap
            if best is None or val_loss < best.val_loss:
                best = snap

    return TrainResult(
        best=best or last_good, log=records, skipped=total_skipped
    )


def train(model, train_corpus, val_corpus, vocab, config):
    """Adapt a model per `config.plan`; returns the lowest-val-loss
    checkpoint and the per-epoch training log."""
    if config.plan is None:
        raise ValueError("train() requires an adaptation plan")
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 1)))
    trainable = apply_plan(model, config.plan, rng=rng)
    heads = None
    if config.objective.beta > 0:
        heads = LidHeads(
            config.objective.lid_layers,
            model.upstream.dim,
            len(vocab.language_codes),
            rng,
        )
        trainable = trainable + heads.params()
    return run_training(
        model, heads, trainable, train_corpus, val_corpus, vocab, config
    )


def pretrain_upstream(model, train_corpus, val_corpus, vocab, config,
                      few_shot_codes=()):
    """Train the upstream (all layers, plain CTC, temporary head) and return
    a checkpoint holding only the upstream weights."""
    overlap = set(train_corpus.languages()) & set(few_shot_codes)
    if overlap:
        raise ValueError(
            f"pretraining languages overlap few-shot set: {sorted(overlap)}"
        )
    if config.objective.beta != 0:
        raise ValueError("pretraining uses the plain CTC objective")
    cfg_plan = AdaptationPlan.finetune_window(1, model.upstream.n_layers)
    config.plan = cfg_plan
    config.validate()
    trainable = apply_plan(model, cfg_plan)
    result = run_training(
        model, None, trainable, train_corpus, val_corpus, vocab, config
    )
    if result.best is not None:
        result.best.params = {
            name: arr for name, arr in result.best.params.items()
            if name.startswith("upstream.")
        }
    return result
