import hashlib
from pathlib import Path

import pytest

from bimors import cli, featio, textenc

import synth


@pytest.fixture(scope="module")
def world_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cliworld")
    weights = synth.tiny_weights(0)
    synth.build_dataset(root / "ds", weights)
    textenc.save_weights(weights, root / "enc.bmtw")
    (root / "enc.kv").write_text(cli.encoder_config_text(synth.TINY_ENC), encoding="utf-8")
    return root


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


def train_args(root, out, seeds="1", extra=()):
    return [
        "train", "--dataset", root / "ds", "--weights", root / "enc.bmtw",
        "--encoder-config", root / "enc.kv", "--out", out, "--seeds", seeds,
        "--lr", synth.LR, "--warmup-lr", synth.WARMUP_LR,
        "--attention-heads", 2, "--context-tokens", 2, "--epochs", 2,
        *extra,
    ]


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class TestUsageErrors:
    def test_missing_dataset_path_exit_2_names_flag(self, world_dir, tmp_path, capsys):
        code = run_cli(
            "train", "--dataset", tmp_path / "missing", "--weights",
            world_dir / "enc.bmtw", "--encoder-config", world_dir / "enc.kv",
            "--out", tmp_path / "out",
        )
        assert code == 2
        assert "--dataset" in capsys.readouterr().err

    def test_unknown_subcommand_exit_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run_cli("frobnicate")
        assert exc.value.code == 2
        assert "usage" in capsys.readouterr().err.lower()

    def test_missing_required_flag_names_it(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run_cli("train", "--out", "/tmp/x")
        assert exc.value.code == 2
        assert "--dataset" in capsys.readouterr().err


class TestIngestValidate:
    def test_valid_dataset(self, world_dir, capsys):
        assert run_cli("ingest-validate", "--dataset", world_dir / "ds") == 0
        out = capsys.readouterr().out
        assert "100 records" in out
        assert "5 classes" in out

    def test_corrupt_dataset(self, world_dir, tmp_path, capsys):
        bad = tmp_path / "bad"
        bad.mkdir()
        for name in (featio.MANIFEST_NAME, featio.BLOB_NAME):
            (bad / name).write_bytes((world_dir / "ds" / name).read_bytes())
        blob = bytearray((bad / featio.BLOB_NAME).read_bytes())
        blob[0] ^= 0xFF
        (bad / featio.BLOB_NAME).write_bytes(bytes(blob))
        assert run_cli("ingest-validate", "--dataset", bad) == 2


class TestTrain:
    def test_multi_seed_checkpoints_and_reports(self, world_dir, tmp_path):
        out = tmp_path / "out"
        assert run_cli(*train_args(world_dir, out, seeds="1,2,3")) == 0
        for seed in (1, 2, 3):
            assert (out / f"head_seed{seed}.bmtw").is_file()
            assert (out / f"loss_seed{seed}.tsv").is_file()
            assert (out / f"loss_seed{seed}.png").is_file()
        assert (out / "train_summary.kv").is_file()
        manifest_text = (out / "run_manifest.txt").read_text()
        assert "head_seed2.bmtw" in manifest_text
        # distinct seeds give distinct checkpoints
        digests = {sha(out / f"head_seed{s}.bmtw") for s in (1, 2, 3)}
        assert len(digests) == 3

    def test_rerun_identical_checksums(self, world_dir, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert run_cli(*train_args(world_dir, out_a)) == 0
        assert run_cli(*train_args(world_dir, out_b)) == 0
        for name in ("head_seed1.bmtw", "loss_seed1.tsv", "loss_seed1.png", "split_seed1.txt"):
            assert sha(out_a / name) == sha(out_b / name), name

    def test_inputs_unmodified(self, world_dir, tmp_path):
        before = {
            p.name: sha(p) for p in (world_dir / "ds").iterdir()
        }
        before["enc.bmtw"] = sha(world_dir / "enc.bmtw")
        assert run_cli(*train_args(world_dir, tmp_path / "out")) == 0
        after = {p.name: sha(p) for p in (world_dir / "ds").iterdir()}
        after["enc.bmtw"] = sha(world_dir / "enc.bmtw")
        assert before == after

    def test_config_file_overrides_flags(self, world_dir, tmp_path):
        cfg = tmp_path / "run.kv"
        cfg.write_text("epochs=1\n", encoding="utf-8")
        out = tmp_path / "out"
        assert run_cli(*train_args(world_dir, out, extra=["--config", cfg])) == 0
        log = (out / "loss_seed1.tsv").read_text().strip().split("\n")
        epochs_seen = {line.split("\t")[1] for line in log[1:]}
        assert epochs_seen == {"0"}
        assert "config_override.epochs=1" in (out / "run_manifest.txt").read_text()


@pytest.fixture(scope="module")
def trained_dir(world_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    code = cli.main([str(a) for a in train_args(world_dir, out, seeds="1", extra=["--epochs", "10"])])
    assert code == 0
    return out


class TestEval:
    def test_eval_b2n_table_and_files(self, world_dir, trained_dir, tmp_path, capsys):
        out = tmp_path / "eval"
        code = run_cli(
            "eval-b2n", "--dataset", world_dir / "ds", "--weights", world_dir / "enc.bmtw",
            "--encoder-config", world_dir / "enc.kv", "--out", out,
            "--checkpoint", trained_dir / "head_seed1.bmtw",
            "--split", trained_dir / "split_seed1.txt",
            "--attention-heads", 2, "--context-tokens", 2, "--seed", 1,
        )
        assert code == 0
        table = capsys.readouterr().out
        assert "base" in table and "new" in table and "H" in table
        files = sorted(p.name for p in out.iterdir())
        assert any(n.endswith(".kv") for n in files)
        assert any(n.endswith(".png") for n in files)
        assert "run_manifest.txt" in files

    def test_eval_cd_source_as_target(self, world_dir, trained_dir, tmp_path, capsys):
        out = tmp_path / "cd"
        code = run_cli(
            "eval-cd", "--dataset", world_dir / "ds", "--weights", world_dir / "enc.bmtw",
            "--encoder-config", world_dir / "enc.kv", "--out", out,
            "--checkpoint", trained_dir / "head_seed1.bmtw",
            "--attention-heads", 2, "--context-tokens", 2, "--seed", 1,
        )
        assert code == 0
        assert "target_acc" in capsys.readouterr().out

    def test_eval_needs_some_head_source(self, world_dir, tmp_path, capsys):
        code = run_cli(
            "eval-b2n", "--dataset", world_dir / "ds", "--weights", world_dir / "enc.bmtw",
            "--encoder-config", world_dir / "enc.kv", "--out", tmp_path / "x",
        )
        assert code == 2

    def test_zero_shot_command(self, world_dir, tmp_path, capsys):
        out = tmp_path / "zs"
        code = run_cli(
            "zero-shot", "--dataset", world_dir / "ds", "--weights", world_dir / "enc.bmtw",
            "--encoder-config", world_dir / "enc.kv", "--out", out,
            "--attention-heads", 2, "--context-tokens", 2, "--seed", 1,
        )
        assert code == 0
        assert any(p.name.endswith("_zeroshot.kv") for p in out.iterdir())

    def test_threads_env_matches_flag(self, world_dir, tmp_path, monkeypatch, capsys):
        def zero_shot(out, extra=(), env=None):
            if env:
                monkeypatch.setenv("BIMORS_THREADS", env)
            else:
                monkeypatch.delenv("BIMORS_THREADS", raising=False)
            code = run_cli(
                "zero-shot", "--dataset", world_dir / "ds", "--weights",
                world_dir / "enc.bmtw", "--encoder-config", world_dir / "enc.kv",
                "--out", out, "--attention-heads", 2, "--context-tokens", 2,
                "--seed", 1, *extra,
            )
            assert code == 0
            capsys.readouterr()
            return next(p for p in out.iterdir() if p.name.endswith("_zeroshot.kv")).read_text()

        via_flag = zero_shot(tmp_path / "flag", extra=["--threads", 3])
        via_env = zero_shot(tmp_path / "env", env="3")
        assert via_flag == via_env

    def test_split_regime_mismatch(self, world_dir, trained_dir, tmp_path):
        split = featio.make_transfer_split(
            featio.read_dataset(world_dir / "ds")[0], seed=1, shots=4, mode="CD"
        )
        featio.write_split(split, tmp_path / "cd的split.txt")
        code = run_cli(
            "eval-b2n", "--dataset", world_dir / "ds", "--weights", world_dir / "enc.bmtw",
            "--encoder-config", world_dir / "enc.kv", "--out", tmp_path / "out",
            "--checkpoint", trained_dir / "head_seed1.bmtw",
            "--split", tmp_path / "cd的split.txt",
            "--attention-heads", 2, "--context-tokens", 2,
        )
        assert code == 2


class TestAblate:
    def test_four_rows_and_artifacts(self, world_dir, tmp_path, capsys):
        out = tmp_path / "abl"
        code = run_cli(
            "ablate", "--dataset", world_dir / "ds", "--weights", world_dir / "enc.bmtw",
            "--encoder-config", world_dir / "enc.kv", "--out", out,
            "--lr", synth.LR, "--warmup-lr", synth.WARMUP_LR,
            "--attention-heads", 2, "--context-tokens", 2,
            "--epochs", 2, "--shots", 4, "--seed", 1,
        )
        assert code == 0
        table = capsys.readouterr().out
        for mode in ("full", "visual_only", "text_only", "no_ca"):
            assert mode in table
        assert any(p.name.endswith(".png") for p in out.iterdir())
        kv = next(p for p in out.iterdir() if p.name.endswith(".kv")).read_text()
        assert "text_only.grad_inactive" in kv
        assert "w_pv" in kv


class TestGradcheck:
    def test_default_run_passes(self, capsys):
        assert run_cli("gradcheck") == 0
        out = capsys.readouterr().out
        assert "matmul" in out and "end_to_end" in out
        assert "FAIL" not in out

    def test_corrupted_gradient_fails_naming_op(self, capsys):
        assert run_cli("gradcheck", "--corrupt-op", "softmax_lastdim") == 1
        out = capsys.readouterr().out
        assert "softmax_lastdim" in out and "failing checks" in out

    def test_zero_tolerance_fails(self, capsys):
        assert run_cli("gradcheck", "--tolerance", "0") == 1


class TestParamCount:
    def test_default_config_reported(self, capsys):
        assert run_cli("param-count") == 0
        out = capsys.readouterr().out
        assert "2101760" in out.replace(",", "")

    def test_small_config(self, capsys):
        assert run_cli(
            "param-count", "--d-vis", 4, "--d-cap", 4, "--d", 2,
            "--attention-heads", 1, "--context-tokens", 1,
        ) == 0
        assert "48" in capsys.readouterr().out
