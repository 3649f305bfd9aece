"""Classifier, objective, optimizer, schedule, and the few-shot training loop.

Per image: the head generates context vectors once, each training class gets
a prompt assembled around them, the frozen encoder maps every prompt to a
class embedding, and logits are temperature-scaled cosine similarities
against the image's global embedding. The loss is mean cross-entropy over
the batch. Plain SGD (momentum and weight decay default to 0) with a
constant warm-up learning rate followed by cosine decay.

Everything is deterministic given (dataset, split, config): shuffling uses
the package PRNG, batching is drop-last-off, and updates are serialized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import featio, prompthead, tensor as tc, textenc
from .errors import ProtocolError, ShapeError, ValidationError
from .rng import Rng
from .tensor import Tensor


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 4
    lr: float = 2e-4
    warmup_lr: float = 1e-5
    warmup_epochs: int = 1
    temperature: float = 0.01
    shots: int = 16
    seed: int = 1
    mode: str = "full"
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr <= 0 or self.warmup_lr <= 0 or self.temperature <= 0:
            raise ValidationError("lr, warmup_lr, and temperature must be positive")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")


@dataclass
class TrainState:
    head: prompthead.PromptHead
    steps: int = 0
    loss_log: list[tuple[int, int, float, float]] = field(default_factory=list)  # step, epoch, lr, loss


def class_embeddings(
    context: Tensor | None,
    class_token_ids: list[list[int]],
    weights: textenc.TextEncoderWeights,
    enc_config: textenc.TextEncoderConfig,
) -> Tensor:
    """Encode one prompt per class around the shared context -> [C, out]."""
    embeds = []
    for ids in class_token_ids:
        prompt = textenc.assemble_prompt(ids, context, weights, enc_config)
        embeds.append(textenc.encode(prompt, weights, enc_config))
    return tc.concat_rows(embeds)


def class_logits(
    record: featio.FeatureRecord,
    head: prompthead.PromptHead | None,
    weights: textenc.TextEncoderWeights,
    enc_config: textenc.TextEncoderConfig,
    class_token_ids: list[list[int]],
    temperature: float,
    mode: str = "full",
    context_override: Tensor | None = None,
) -> Tensor:
    """Temperature-scaled cosine logits [1, C] for one record.

    ``context_override`` replaces the generated context (zero-shot baseline
    and the static-prompt classifier); ``head`` may then be None.
    """
    if context_override is not None:
        context = context_override
    else:
        if head is None:
            raise ProtocolError("class_logits needs a head or a context_override")
        context = prompthead.generate_context(record, head, mode)
    embeds = class_embeddings(context, class_token_ids, weights, enc_config)
    g = np.asarray(record.global_embed, dtype=np.float32).reshape(1, -1)
    if g.shape[1] != int(embeds.shape[1]):
        raise ShapeError(
            f"global embed dim {g.shape[1]} vs encoder output dim {embeds.shape[1]}"
        )
    image = tc.l2_normalize_rows(Tensor(g))
    classes = tc.l2_normalize_rows(embeds)
    cosines = tc.matmul(image, tc.permute(classes, (1, 0)))
    return tc.scale(cosines, 1.0 / temperature)


def loss_batch(
    records: list[featio.FeatureRecord],
    labels: list[int],
    head: prompthead.PromptHead,
    weights: textenc.TextEncoderWeights,
    enc_config: textenc.TextEncoderConfig,
    class_token_ids: list[list[int]],
    config: TrainConfig,
) -> Tensor:
    """Mean cross-entropy of per-record logits over the batch."""
    n_classes = len(class_token_ids)
    for lab in labels:
        if not 0 <= int(lab) < n_classes:
            raise ProtocolError(f"label {lab} outside the training class set (C={n_classes})")
    rows = [
        class_logits(rec, head, weights, enc_config, class_token_ids,
                     config.temperature, config.mode)
        for rec in records
    ]
    logits = tc.concat_rows(rows)
    return tc.cross_entropy(logits, labels)


def sgd_step(head: prompthead.PromptHead, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0, velocities: dict | None = None,
             active: set[str] | None = None) -> None:
    """w <- w - lr * g for every trainable leaf; gradients cleared after.

    ``active`` names the tensors the current ablation mode puts in the
    graph; the rest are skipped rather than required. Default: all.
    """
    for name, t in head.trainable():
        if active is not None and name not in active:
            t.zero_grad()
            continue
        if t.grad is None:
            raise ProtocolError(f"sgd_step before backward: {name} has no gradient")
        g = t.grad
        if weight_decay:
            g = g + np.float32(weight_decay) * t.data
        if momentum and velocities is not None:
            v = velocities.get(name)
            v = g if v is None else np.float32(momentum) * v + g
            velocities[name] = v
            g = v
        t.data -= np.float32(lr) * g
        t.zero_grad()


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Constant warm-up, then cosine decay to zero at config.epochs."""
    if not 0 <= epoch <= config.epochs:
        raise ValidationError(f"epoch {epoch} outside [0, {config.epochs}]")
    if epoch < config.warmup_epochs:
        return config.warmup_lr
    span = config.epochs - config.warmup_epochs
    progress = (epoch - config.warmup_epochs) / span if span > 0 else 1.0
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def training_class_ids(split: featio.SplitSpec) -> list[int]:
    """Classes the source training runs over, ascending."""
    return sorted(split.base_class_ids)


def build_head(
    manifest: featio.DatasetManifest,
    weights: textenc.TextEncoderWeights,
    head_config: prompthead.PromptHeadConfig,
    seed: int,
) -> prompthead.PromptHead:
    """Head with query tokens initialized from the manifest's template ids
    (cycled/truncated to m rows)."""
    base = list(manifest.template_token_ids)
    if not base:
        raise ValidationError("manifest has no template_token_ids for query init")
    ids = [base[i % len(base)] for i in range(head_config.m)]
    query = prompthead.init_query_tokens(weights, ids)
    return prompthead.init_head(head_config, seed=seed, query_init=query.data)


def train(
    reader: featio.DatasetReader,
    manifest: featio.DatasetManifest,
    split: featio.SplitSpec,
    weights: textenc.TextEncoderWeights,
    enc_config: textenc.TextEncoderConfig,
    config: TrainConfig,
    head_config: prompthead.PromptHeadConfig | None = None,
) -> TrainState:
    """Seeded few-shot training over the split's sampled shots."""
    if head_config is None:
        head_config = prompthead.PromptHeadConfig(
            d_vis=manifest.d_vis, d_cap=manifest.d_cap,
            d=enc_config.width, heads=4, m=len(manifest.template_token_ids) or 4,
        )
    # the split owns shot sampling; eval recomputes the identical set to
    # exclude it from base-class test records
    pool = featio.sample_shots(reader.class_ids, split)
    if not pool:
        raise ProtocolError("training pool is empty for this split")
    class_ids = training_class_ids(split)
    position = {cid: i for i, cid in enumerate(class_ids)}
    token_ids = [manifest.class_token_ids[cid] for cid in class_ids]

    head = build_head(manifest, weights, head_config, config.seed)
    state = TrainState(head=head)
    shuffler = Rng(config.seed, stream=7)
    velocities: dict = {}
    active = prompthead.gradient_active_fields(config.mode)
    for epoch in range(config.epochs):
        order = list(pool)
        shuffler.shuffle(order)
        lr = lr_at(epoch, config)
        for start in range(0, len(order), config.batch_size):
            batch_idx = order[start : start + config.batch_size]
            records = [reader.record(i) for i in batch_idx]
            labels = []
            for rec in records:
                if rec.class_id not in position:
                    raise ProtocolError(
                        f"record {rec.image_id} has class {rec.class_id} outside the training set"
                    )
                labels.append(position[rec.class_id])
            loss = loss_batch(records, labels, head, weights, enc_config, token_ids, config)
            value = float(loss.data)
            if not math.isfinite(value):
                raise ProtocolError(f"non-finite loss at step {state.steps}")
            tc.backward(loss)
            sgd_step(head, lr, config.momentum, config.weight_decay, velocities, active)
            state.loss_log.append((state.steps, epoch, lr, value))
            state.steps += 1
    return state


def loss_log_text(state: TrainState) -> str:
    """Tab-separated step log: step, epoch, lr, loss."""
    lines = ["step\tepoch\tlr\tloss"]
    for step, epoch, lr, loss in state.loss_log:
        lines.append(f"{step}\t{epoch}\t{lr:.8g}\t{loss:.8g}")
    return "\n".join(lines) + "\n"
