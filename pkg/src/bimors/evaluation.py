"""Evaluation regimes and metrics: base-to-new, cross-dataset, and
single-source-multi-target, plus the zero-shot baseline and ablations.

Base-to-new classifies each partition against its own label space (base
test records over base prompts, new records over new prompts) and reports
the harmonic mean of the two accuracies. Transfer regimes classify target
records over the target's class list (full list for cross-dataset, the
manifest-declared shared subset for multi-target). The zero-shot baseline
replaces generated context with the fixed template embedding rows.
Predictions reduce in record-index order; ties break to the lowest index.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import featio, prompthead, textenc, training
from .errors import ProtocolError
from .tensor import Tensor


@dataclass
class EvalReport:
    regime: str  # B2N | CD | SSMT
    dataset: str
    seed: int
    zero_shot: bool = False
    mode: str = "full"
    base_acc: float | None = None
    new_acc: float | None = None
    hmean: float | None = None
    target_acc: float | None = None
    n_base: int = 0
    n_new: int = 0
    n_records: int = 0
    trainable_params: int = 0

    def to_kv(self) -> dict:
        out = {
            "regime": self.regime,
            "dataset": self.dataset,
            "seed": self.seed,
            "zero_shot": int(self.zero_shot),
            "mode": self.mode,
            "trainable_params": self.trainable_params,
        }
        if self.regime == "B2N":
            out.update(
                base_acc=f"{self.base_acc:.4f}",
                new_acc=f"{self.new_acc:.4f}",
                hmean=f"{self.hmean:.4f}",
                n_base=self.n_base,
                n_new=self.n_new,
            )
        else:
            out.update(target_acc=f"{self.target_acc:.4f}", n_records=self.n_records)
        return out


def top1_accuracy(predictions, labels) -> float:
    """Percent of positions where prediction equals label."""
    predictions = list(predictions)
    labels = list(labels)
    if not predictions or len(predictions) != len(labels):
        raise ProtocolError(
            f"accuracy needs equal nonempty inputs, got {len(predictions)}/{len(labels)}"
        )
    correct = sum(1 for p, y in zip(predictions, labels) if int(p) == int(y))
    return 100.0 * correct / len(labels)


def harmonic_mean(base: float, new: float) -> float:
    """2bn/(b+n) on percentages; zero when both are zero."""
    if base < 0 or new < 0:
        raise ProtocolError(f"harmonic_mean needs nonnegative inputs, got {base}, {new}")
    if base + new == 0:
        return 0.0
    return 2.0 * base * new / (base + new)


def zero_shot_context(
    manifest: featio.DatasetManifest, weights: textenc.TextEncoderWeights
) -> Tensor:
    """Fixed template embedding rows (the untouched prompt context)."""
    ids = manifest.template_token_ids
    if not ids:
        raise ProtocolError("manifest has no template_token_ids for the zero-shot baseline")
    return Tensor(weights.token_embedding.data[np.asarray(ids, dtype=np.int64)])


def predict(
    reader: featio.DatasetReader,
    record_indices: list[int],
    class_ids: list[int],
    manifest: featio.DatasetManifest,
    head: prompthead.PromptHead | None,
    weights: textenc.TextEncoderWeights,
    enc_config: textenc.TextEncoderConfig,
    temperature: float,
    mode: str = "full",
    context_override: Tensor | None = None,
    threads: int = 1,
) -> list[int]:
    """Predicted positions (into class_ids) per record, index order kept."""
    token_ids = [manifest.class_token_ids[c] for c in class_ids]

    def classify(index: int) -> int:
        rec = reader.record(index)
        logits = training.class_logits(
            rec, head, weights, enc_config, token_ids, temperature,
            mode=mode, context_override=context_override,
        )
        row = logits.data[0]
        return int(np.argmax(row))  # argmax returns the lowest index on ties

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(classify, record_indices))
    return [classify(i) for i in record_indices]


def b2n_test_indices(
    reader: featio.DatasetReader, split: featio.SplitSpec
) -> tuple[list[int], list[int]]:
    """Base-class records minus the training shots; all new-class records."""
    shot_set = set(featio.sample_shots(reader.class_ids, split))
    base_set = set(split.base_class_ids)
    new_set = set(split.new_class_ids)
    base_idx = [
        i for i, c in enumerate(reader.class_ids) if c in base_set and i not in shot_set
    ]
    new_idx = [i for i, c in enumerate(reader.class_ids) if c in new_set]
    return base_idx, new_idx


def eval_b2n(
    reader: featio.DatasetReader,
    manifest: featio.DatasetManifest,
    split: featio.SplitSpec,
    head: prompthead.PromptHead | None,
    weights: textenc.TextEncoderWeights,
    enc_config: textenc.TextEncoderConfig,
    config: training.TrainConfig,
    threads: int = 1,
) -> EvalReport:
    """Evaluate both partitions; ``head=None`` runs the zero-shot baseline."""
    if split.mode != "B2N":
        raise ProtocolError(f"eval_b2n needs a B2N split, got mode {split.mode!r}")
    base_idx, new_idx = b2n_test_indices(reader, split)
    if not base_idx or not new_idx:
        raise ProtocolError("a partition has no test records")
    override = zero_shot_context(manifest, weights) if head is None else None

    report = EvalReport(
        regime="B2N",
        dataset=manifest.dataset_name,
        seed=split.seed,
        zero_shot=head is None,
        mode=config.mode,
        n_base=len(base_idx),
        n_new=len(new_idx),
        trainable_params=prompthead.parameter_count(head) if head else 0,
    )
    for part, indices, classes in (
        ("base", base_idx, sorted(split.base_class_ids)),
        ("new", new_idx, sorted(split.new_class_ids)),
    ):
        position = {c: i for i, c in enumerate(classes)}
        preds = predict(
            reader, indices, classes, manifest, head, weights, enc_config,
            config.temperature, mode=config.mode, context_override=override,
            threads=threads,
        )
        labels = [position[reader.class_ids[i]] for i in indices]
        acc = top1_accuracy(preds, labels)
        if part == "base":
            report.base_acc = acc
        else:
            report.new_acc = acc
    report.hmean = harmonic_mean(report.base_acc, report.new_acc)
    return report


def eval_transfer(
    head: prompthead.PromptHead | None,
    reader: featio.DatasetReader,
    manifest: featio.DatasetManifest,
    regime: str,
    weights: textenc.TextEncoderWeights,
    enc_config: textenc.TextEncoderConfig,
    config: training.TrainConfig,
    threads: int = 1,
) -> EvalReport:
    """Classify every target record over the target's class list (CD) or its
    manifest-declared shared subset (SSMT)."""
    if regime not in ("CD", "SSMT"):
        raise ProtocolError(f"transfer regime must be CD or SSMT, got {regime!r}")
    if regime == "SSMT":
        shared = manifest.shared_class_names or list(manifest.class_names)
        if not shared:
            raise ProtocolError("SSMT target declares an empty shared class list")
        class_ids = sorted(manifest.class_names.index(name) for name in shared)
    else:
        class_ids = list(range(len(manifest.class_names)))
    keep = set(class_ids)
    indices = [i for i, c in enumerate(reader.class_ids) if c in keep]
    if not indices:
        raise ProtocolError("target dataset has no records in the evaluated classes")
    override = zero_shot_context(manifest, weights) if head is None else None
    position = {c: i for i, c in enumerate(class_ids)}
    preds = predict(
        reader, indices, class_ids, manifest, head, weights, enc_config,
        config.temperature, mode=config.mode, context_override=override, threads=threads,
    )
    labels = [position[reader.class_ids[i]] for i in indices]
    return EvalReport(
        regime=regime,
        dataset=manifest.dataset_name,
        seed=config.seed,
        zero_shot=head is None,
        mode=config.mode,
        target_acc=top1_accuracy(preds, labels),
        n_records=len(indices),
        trainable_params=prompthead.parameter_count(head) if head else 0,
    )


@dataclass
class AblationRow:
    mode: str
    report: EvalReport
    final_loss: float
    param_count: int
    grad_inactive: list[str] = field(default_factory=list)


def run_ablation_suite(
    reader: featio.DatasetReader,
    manifest: featio.DatasetManifest,
    split: featio.SplitSpec,
    weights: textenc.TextEncoderWeights,
    enc_config: textenc.TextEncoderConfig,
    config: training.TrainConfig,
    head_config: prompthead.PromptHeadConfig | None = None,
    threads: int = 1,
) -> list[AblationRow]:
    """Train + evaluate each context-generation mode; one row per mode."""
    rows = []
    for mode in prompthead.MODES:
        mode_config = training.TrainConfig(
            epochs=config.epochs, batch_size=config.batch_size, lr=config.lr,
            warmup_lr=config.warmup_lr, warmup_epochs=config.warmup_epochs,
            temperature=config.temperature, shots=config.shots, seed=config.seed,
            mode=mode, momentum=config.momentum, weight_decay=config.weight_decay,
        )
        state = training.train(
            reader, manifest, split, weights, enc_config, mode_config, head_config
        )
        report = eval_b2n(
            reader, manifest, split, state.head, weights, enc_config, mode_config,
            threads=threads,
        )
        inactive = sorted(
            set(n for n, _ in state.head.trainable())
            - prompthead.gradient_active_fields(mode)
        )
        rows.append(
            AblationRow(
                mode=mode,
                report=report,
                final_loss=state.loss_log[-1][3],
                param_count=prompthead.parameter_count(state.head),
                grad_inactive=inactive,
            )
        )
    return rows


def aggregate_reports(reports: list[EvalReport]) -> dict:
    """Per-seed values plus arithmetic means; mean H is the mean of per-seed
    H values, never the H of mean accuracies."""
    if not reports:
        raise ProtocolError("no reports to aggregate")
    out: dict = {
        "regime": reports[0].regime,
        "dataset": reports[0].dataset,
        "seeds": [r.seed for r in reports],
    }
    if reports[0].regime == "B2N":
        out["per_seed_base"] = [r.base_acc for r in reports]
        out["per_seed_new"] = [r.new_acc for r in reports]
        out["per_seed_h"] = [r.hmean for r in reports]
        out["mean_base"] = float(np.mean(out["per_seed_base"]))
        out["mean_new"] = float(np.mean(out["per_seed_new"]))
        out["mean_h"] = float(np.mean(out["per_seed_h"]))
    else:
        out["per_seed_target"] = [r.target_acc for r in reports]
        out["mean_target"] = float(np.mean(out["per_seed_target"]))
    return out
