"""Command-line entry point.

Subcommands: ingest-validate, train, eval-b2n, eval-cd, eval-ssmt, ablate,
gradcheck, param-count, zero-shot. Long option names only. A --config
key=value file overrides flag values; both are recorded in the run
manifest. Exit codes: 0 success, 1 check/assertion failure, 2 usage or
configuration error. BIMORS_THREADS is equivalent to --threads.

Every command writes its artifacts plus run_manifest.txt listing each
artifact with its SHA-256; reruns with identical inputs produce identical
artifact checksums (the manifest itself carries wall-clock and is the one
non-reproducible file).
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluation, featio, gradcheck, prompthead, reporting, textenc, training
from .errors import FormatError, ProtocolError, ValidationError

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2

CONFIG_KEYS = {
    "epochs": int, "batch_size": int, "lr": float, "warmup_lr": float,
    "warmup_epochs": int, "temperature": float, "shots": int, "mode": str,
    "momentum": float, "weight_decay": float, "threads": int,
    "attention_heads": int, "context_tokens": int,
}


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _threads(args) -> int:
    env = os.environ.get("BIMORS_THREADS")
    if args.threads is not None:
        return max(1, args.threads)
    if env:
        return max(1, int(env))
    return 1


def _apply_config_file(args) -> dict:
    """A --config file's key=value pairs override parsed flags."""
    overrides = {}
    if getattr(args, "config", None):
        kv = featio.parse_kv_text(Path(args.config).read_text(encoding="utf-8"))
        for key, raw in kv.items():
            if key not in CONFIG_KEYS:
                raise ValidationError(f"unknown config key {key!r}")
            value = CONFIG_KEYS[key](raw)
            setattr(args, key, value)
            overrides[key] = value
    return overrides


def write_run_manifest(out_dir: Path, command: str, args, artifacts: list[Path],
                       seeds: list[int], started: float, overrides: dict) -> Path:
    lines = [
        "format=bimors-run",
        f"command={command}",
        f"seeds={' '.join(str(s) for s in seeds)}",
        f"output_dir={out_dir}",
        f"wall_clock_seconds={time.time() - started:.3f}",
    ]
    for key in sorted(vars(args)):
        if key in ("func", "config"):
            continue
        lines.append(f"arg.{key}={getattr(args, key)}")
    for key, value in sorted(overrides.items()):
        lines.append(f"config_override.{key}={value}")
    for artifact in sorted(artifacts, key=str):
        lines.append(f"artifact.{Path(artifact).name}={_sha256(artifact)}")
    path = out_dir / "run_manifest.txt"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _encoder_config(path) -> textenc.TextEncoderConfig:
    kv = featio.parse_kv_text(Path(path).read_text(encoding="utf-8"))
    try:
        return textenc.TextEncoderConfig(
            vocab_size=int(kv["vocab_size"]),
            context_length=int(kv["context_length"]),
            width=int(kv["width"]),
            heads=int(kv["heads"]),
            layers=int(kv["layers"]),
            embed_out_dim=int(kv["embed_out_dim"]),
        )
    except KeyError as exc:
        raise FormatError(f"encoder config missing key {exc}")


def encoder_config_text(config: textenc.TextEncoderConfig) -> str:
    return (
        f"vocab_size={config.vocab_size}\ncontext_length={config.context_length}\n"
        f"width={config.width}\nheads={config.heads}\nlayers={config.layers}\n"
        f"embed_out_dim={config.embed_out_dim}\n"
    )


def _load_world(args):
    try:
        manifest, reader = featio.read_dataset(args.dataset)
    except (FormatError, FileNotFoundError) as exc:
        raise FormatError(f"--dataset: {exc}")
    try:
        enc_config = _encoder_config(args.encoder_config)
    except (FormatError, FileNotFoundError) as exc:
        raise FormatError(f"--encoder-config: {exc}")
    try:
        weights = textenc.load_weights(args.weights, enc_config)
    except (FormatError, FileNotFoundError) as exc:
        raise FormatError(f"--weights: {exc}")
    return manifest, reader, enc_config, weights


def _train_config(args, seed: int) -> training.TrainConfig:
    return training.TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
        warmup_lr=args.warmup_lr, warmup_epochs=args.warmup_epochs,
        temperature=args.temperature, shots=args.shots, seed=seed,
        mode=args.mode, momentum=args.momentum, weight_decay=args.weight_decay,
    )


def _head_config(args, manifest, enc_config) -> prompthead.PromptHeadConfig:
    m = args.context_tokens or len(manifest.template_token_ids) or 4
    return prompthead.PromptHeadConfig(
        d_vis=manifest.d_vis, d_cap=manifest.d_cap, d=enc_config.width,
        heads=args.attention_heads, m=m,
    )


def _resolve_split(args, manifest, mode: str, seed: int) -> featio.SplitSpec:
    if args.split:
        split = featio.read_split(args.split)
        if split.mode != mode:
            raise ProtocolError(f"split file has mode {split.mode}, command needs {mode}")
        return split
    if mode == "B2N":
        return featio.make_b2n_split(manifest, seed=seed, shots=args.shots)
    return featio.make_transfer_split(manifest, seed=seed, shots=args.shots, mode=mode)


def _seed_list(text: str) -> list[int]:
    return [int(tok) for tok in text.replace(",", " ").split()]


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest_validate(args) -> int:
    manifest, reader = featio.read_dataset(args.dataset)
    for i in range(len(reader)):
        reader.record(i)
    per_class = {name: 0 for name in manifest.class_names}
    for cid in reader.class_ids:
        per_class[manifest.class_names[cid]] += 1
    print(f"dataset {manifest.dataset_name}: {len(reader)} records, "
          f"{len(manifest.class_names)} classes, dims d_vis={manifest.d_vis} "
          f"d_clip={manifest.d_clip} d_cap={manifest.d_cap}")
    for name, count in per_class.items():
        print(f"  {name}: {count}")
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    overrides = _apply_config_file(args)
    manifest, reader, enc_config, weights = _load_world(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    head_config = _head_config(args, manifest, enc_config)
    seeds = _seed_list(args.seeds)
    artifacts: list[Path] = []
    final_losses = []
    for seed in seeds:
        split = _resolve_split(args, manifest, args.split_mode, seed)
        split_path = out_dir / f"split_seed{seed}.txt"
        featio.write_split(split, split_path)
        config = _train_config(args, seed)
        state = training.train(reader, manifest, split, weights, enc_config, config, head_config)
        ckpt = out_dir / f"head_seed{seed}.bmtw"
        prompthead.save_head(state.head, ckpt)
        log_path = out_dir / f"loss_seed{seed}.tsv"
        log_path.write_text(training.loss_log_text(state), encoding="utf-8")
        fig_path = out_dir / f"loss_seed{seed}.png"
        reporting.render_loss_curve(state.loss_log, fig_path)
        artifacts += [split_path, ckpt, log_path, fig_path]
        final_losses.append(state.loss_log[-1][3])
        print(f"seed {seed}: {state.steps} steps, final loss {final_losses[-1]:.4f}")
    summary = out_dir / "train_summary.kv"
    summary.write_text(
        reporting.kv_text({
            "seeds": " ".join(str(s) for s in seeds),
            "final_losses": " ".join(f"{l:.6f}" for l in final_losses),
            "mean_final_loss": f"{float(np.mean(final_losses)):.6f}",
            "trainable_params": prompthead.parameter_count(
                prompthead.init_head(head_config, seed=0)
            ),
        }),
        encoding="utf-8",
    )
    artifacts.append(summary)
    write_run_manifest(out_dir, "train", args, artifacts, seeds, started, overrides)
    return EXIT_OK


def _eval_command(args, regime: str) -> int:
    started = time.time()
    overrides = _apply_config_file(args)
    manifest, reader, enc_config, weights = _load_world(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    threads = _threads(args)
    artifacts: list[Path] = []
    reports = []
    seeds = []
    if args.checkpoint is None and args.checkpoint_dir is None and not args.zero_shot:
        raise ProtocolError("evaluation needs --checkpoint, --checkpoint-dir, or --zero-shot")
    checkpoints = _seed_list(args.seeds) if args.checkpoint is None else [None]
    for seed_or_none in checkpoints:
        if args.checkpoint is not None:
            head = None if args.zero_shot else prompthead.load_head(args.checkpoint)
            seed = args.seed
        else:
            seed = seed_or_none
            if args.zero_shot:
                head = None
            else:
                head = prompthead.load_head(Path(args.checkpoint_dir) / f"head_seed{seed}.bmtw")
        seeds.append(seed)
        config = _train_config(args, seed)
        if regime == "B2N":
            split = _resolve_split(args, manifest, "B2N", seed)
            report = evaluation.eval_b2n(
                reader, manifest, split, head, weights, enc_config, config, threads=threads
            )
        else:
            report = evaluation.eval_transfer(
                head, reader, manifest, regime, weights, enc_config, config, threads=threads
            )
        reports.append(report)
        artifacts += reporting.write_report_files(report, out_dir)
    table = reporting.b2n_table(reports) if regime == "B2N" else reporting.transfer_table(reports)
    print(table, end="")
    table_path = out_dir / f"{regime.lower()}_{manifest.dataset_name}_table.txt"
    table_path.write_text(table, encoding="utf-8")
    artifacts.append(table_path)
    if len(reports) > 1:
        agg = evaluation.aggregate_reports(reports)
        agg_path = out_dir / f"{regime.lower()}_{manifest.dataset_name}_aggregate.kv"
        agg_path.write_text(
            reporting.kv_text({k: v for k, v in agg.items()}), encoding="utf-8"
        )
        fig_path = out_dir / f"{regime.lower()}_{manifest.dataset_name}_seeds.png"
        reporting.render_seed_summary(reports, fig_path)
        artifacts += [agg_path, fig_path]
    write_run_manifest(out_dir, f"eval-{regime.lower()}", args, artifacts, seeds, started, overrides)
    return EXIT_OK


def cmd_eval_b2n(args) -> int:
    return _eval_command(args, "B2N")


def cmd_eval_cd(args) -> int:
    return _eval_command(args, "CD")


def cmd_eval_ssmt(args) -> int:
    return _eval_command(args, "SSMT")


def cmd_zero_shot(args) -> int:
    args.zero_shot = True
    args.checkpoint = None
    args.checkpoint_dir = None
    args.seeds = str(args.seed)
    return _eval_command(args, args.regime)


def cmd_ablate(args) -> int:
    started = time.time()
    overrides = _apply_config_file(args)
    manifest, reader, enc_config, weights = _load_world(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    head_config = _head_config(args, manifest, enc_config)
    split = _resolve_split(args, manifest, "B2N", args.seed)
    config = _train_config(args, args.seed)
    rows = evaluation.run_ablation_suite(
        reader, manifest, split, weights, enc_config, config, head_config,
        threads=_threads(args),
    )
    table = reporting.ablation_table(rows)
    print(table, end="")
    artifacts = []
    table_path = out_dir / f"ablation_{manifest.dataset_name}_seed{args.seed}.txt"
    table_path.write_text(table, encoding="utf-8")
    artifacts.append(table_path)
    kv_path = out_dir / f"ablation_{manifest.dataset_name}_seed{args.seed}.kv"
    kv_lines = {}
    for row in rows:
        kv_lines[f"{row.mode}.base_acc"] = f"{row.report.base_acc:.4f}"
        kv_lines[f"{row.mode}.new_acc"] = f"{row.report.new_acc:.4f}"
        kv_lines[f"{row.mode}.hmean"] = f"{row.report.hmean:.4f}"
        kv_lines[f"{row.mode}.final_loss"] = f"{row.final_loss:.6f}"
        kv_lines[f"{row.mode}.param_count"] = row.param_count
        kv_lines[f"{row.mode}.grad_inactive"] = ",".join(row.grad_inactive) or "-"
    kv_path.write_text(reporting.kv_text(kv_lines), encoding="utf-8")
    artifacts.append(kv_path)
    fig_path = out_dir / f"ablation_{manifest.dataset_name}_seed{args.seed}.png"
    reporting.render_ablation_figure(rows, fig_path)
    artifacts.append(fig_path)
    write_run_manifest(out_dir, "ablate", args, artifacts, [args.seed], started, overrides)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    per_op, e2e, failing = gradcheck.run_suite(
        tolerance=args.tolerance,
        e2e_tolerance=args.e2e_tolerance,
        corrupt_op=args.corrupt_op,
    )
    for name, err in per_op.items():
        status = "ok" if err < args.tolerance else "FAIL"
        print(f"{name:24s} worst rel err {err:.3e}  [{status}]")
    worst_e2e = max(e2e.values())
    status = "ok" if worst_e2e < args.e2e_tolerance else "FAIL"
    print(f"{'end_to_end':24s} worst rel err {worst_e2e:.3e}  [{status}]")
    for name, err in sorted(e2e.items()):
        print(f"  loss grad wrt {name:16s} {err:.3e}")
    if failing:
        print(f"failing checks: {', '.join(failing)}")
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_param_count(args) -> int:
    config = prompthead.PromptHeadConfig(
        d_vis=args.d_vis, d_cap=args.d_cap, d=args.d, heads=args.attention_heads,
        m=args.context_tokens,
    )
    head = prompthead.init_head(config, seed=0)
    total = prompthead.parameter_count(head)
    print(f"config: d_vis={config.d_vis} d_cap={config.d_cap} d={config.d} "
          f"heads={config.heads} m={config.m}")
    for name, t in head.trainable():
        print(f"  {name:16s} {str(tuple(t.shape)):14s} {t.size}")
    print(f"total trainable scalars: {total}")
    print(f"note: the four attention projections alone hold {4 * config.d * config.d} "
          f"scalars at d={config.d}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_world_flags(p, checkpoint: bool):
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--weights", required=True, help="encoder weight container (.bmtw)")
    p.add_argument("--encoder-config", required=True, help="encoder config key=value file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--split", default=None, help="split spec file (default: derive)")
    p.add_argument("--config", default=None, help="key=value file overriding flags")
    p.add_argument("--threads", type=int, default=None)
    if checkpoint:
        p.add_argument("--checkpoint", default=None, help="head checkpoint (.bmtw)")
        p.add_argument("--checkpoint-dir", default=None,
                       help="directory of head_seed<N>.bmtw files for --seeds")
        p.add_argument("--zero-shot", action="store_true",
                       help="use the fixed template context instead of a head")


def _add_protocol_flags(p):
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=4)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--warmup-lr", dest="warmup_lr", type=float, default=1e-5)
    p.add_argument("--warmup-epochs", dest="warmup_epochs", type=int, default=1)
    p.add_argument("--temperature", type=float, default=0.01)
    p.add_argument("--shots", type=int, default=16)
    p.add_argument("--mode", default="full",
                   choices=["full", "visual_only", "text_only", "no_ca"])
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=0.0)
    p.add_argument("--attention-heads", dest="attention_heads", type=int, default=4)
    p.add_argument("--context-tokens", dest="context_tokens", type=int, default=0,
                   help="query tokens m (default: template length)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bimors",
        description="Bi-modal prompt learning over frozen backbones: train, "
                    "evaluate, ablate, and verify gradients.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest-validate", help="validate a dataset container")
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_ingest_validate)

    p = sub.add_parser("train", help="train the prompt head")
    _add_world_flags(p, checkpoint=False)
    _add_protocol_flags(p)
    p.add_argument("--seeds", default="1", help="comma-separated seeds")
    p.add_argument("--split-mode", dest="split_mode", default="B2N",
                   choices=["B2N", "CD", "SSMT"])
    p.set_defaults(func=cmd_train)

    for name, func in (("eval-b2n", cmd_eval_b2n), ("eval-cd", cmd_eval_cd),
                       ("eval-ssmt", cmd_eval_ssmt)):
        p = sub.add_parser(name, help=f"evaluate ({name.split('-')[1]})")
        _add_world_flags(p, checkpoint=True)
        _add_protocol_flags(p)
        p.add_argument("--seed", type=int, default=1)
        p.add_argument("--seeds", default="1", help="seeds for --checkpoint-dir mode")
        p.set_defaults(func=func)

    p = sub.add_parser("zero-shot", help="zero-shot baseline evaluation")
    _add_world_flags(p, checkpoint=False)
    _add_protocol_flags(p)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--regime", default="B2N", choices=["B2N", "CD", "SSMT"])
    p.set_defaults(func=cmd_zero_shot)

    p = sub.add_parser("ablate", help="run the four context-generation modes")
    _add_world_flags(p, checkpoint=False)
    _add_protocol_flags(p)
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--e2e-tolerance", dest="e2e_tolerance", type=float, default=1e-2)
    p.add_argument("--corrupt-op", dest="corrupt_op", default=None,
                   help="testing hook: corrupt one check's analytic gradient")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("param-count", help="audit trainable parameter counts")
    p.add_argument("--d-vis", dest="d_vis", type=int, default=768)
    p.add_argument("--d-cap", dest="d_cap", type=int, default=768)
    p.add_argument("--d", type=int, default=512)
    p.add_argument("--attention-heads", dest="attention_heads", type=int, default=4)
    p.add_argument("--context-tokens", dest="context_tokens", type=int, default=4)
    p.set_defaults(func=cmd_param_count)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FormatError, ValidationError, ProtocolError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AssertionError as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
