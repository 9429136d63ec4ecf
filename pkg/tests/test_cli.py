"""Config parsing, checkpoint format, CSV schema, and end-to-end subcommands."""

import csv
import os
import subprocess
import sys

import numpy as np
import pytest

from spex.checkpoint import (
    CheckpointError,
    load_checkpoint,
    network_from_config,
    save_checkpoint,
)
from spex.cli import aggregate, main
from spex.config import (
    ConfigError,
    parse_config,
    parse_config_file,
    serialize_config,
)
from spex.numerics import RngState
from spex.rayleigh_ritz import RRTransform

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "configs")

SMOKE = """
seed = 1
kernel.kind = legendre
kernel.p = 1
kernel.r = 2
model.layers = 1
model.width = 8
model.d = 1
train.objective = scl
train.steps = 40
train.batch = 16
train.trace_every = 10
eval.samples = 2000
nesting.mode = none
"""


class TestConfig:
    def test_parse_and_defaults(self):
        cfg = parse_config(SMOKE)
        assert cfg.kernel_r == 2 and cfg.train_steps == 40
        assert cfg.train_lr == 1e-3  # untouched default
        assert cfg.penalty_mu == 10.0 and cfg.penalty_nu == 30.0

    def test_unknown_key_names_line(self):
        with pytest.raises(ConfigError, match="line 3"):
            parse_config("seed = 1\nkernel.kind = legendre\nbogus.key = 2\n")

    def test_malformed_line(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config("seed = 1\nnot a pair\n")

    def test_bad_value_names_key(self):
        with pytest.raises(ConfigError, match="seed"):
            parse_config("seed = banana\n")

    def test_serialize_roundtrip(self):
        cfg = parse_config(SMOKE)
        text = serialize_config(cfg)
        again = parse_config(text)
        assert again == cfg
        assert serialize_config(again) == text

    def test_comments_and_blanks_ignored(self):
        cfg = parse_config("# hello\n\nseed = 7 # trailing\n")
        assert cfg.seed == 7

    def test_shipped_configs_parse(self):
        for root, _, names in os.walk(CONFIG_DIR):
            for name in names:
                if name.endswith(".txt"):
                    cfg = parse_config_file(os.path.join(root, name))
                    assert cfg.train_lr == 1e-3  # the stated protocol

    def test_nesting_dims_validation(self):
        with pytest.raises(ConfigError):
            parse_config(SMOKE + "nesting.dims = 1,2\n")  # model.d is 1


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        cfg = parse_config(SMOKE)
        net = network_from_config(cfg)
        path = str(tmp_path / "ck.spex")
        save_checkpoint(path, cfg, net)
        cfg2, net2, transform = load_checkpoint(path)
        assert transform is None
        assert serialize_config(cfg2) == serialize_config(cfg)
        for a, b in zip(net.parameter_arrays(), net2.parameter_arrays()):
            assert np.array_equal(a, b)

    def test_roundtrip_with_transform(self, tmp_path):
        cfg = parse_config(SMOKE.replace("model.d = 1", "model.d = 2"))
        net = network_from_config(cfg)
        t = RRTransform(
            mode="scl",
            u=np.linalg.qr(RngState(0).generator().standard_normal((2, 2)))[0],
            eigenvalues=np.array([0.5, 0.25]),
            scale=np.array([np.sqrt(2.0), 2.0]),
        )
        path = str(tmp_path / "ck.spex")
        save_checkpoint(path, cfg, net, t)
        _, _, t2 = load_checkpoint(path)
        assert t2.mode == "scl"
        assert np.array_equal(t.u, t2.u)
        assert np.array_equal(t.scale, t2.scale)
        assert t2.mean is None

    def test_byte_identical_rewrite(self, tmp_path):
        cfg = parse_config(SMOKE)
        net = network_from_config(cfg)
        p1, p2 = str(tmp_path / "a.spex"), str(tmp_path / "b.spex")
        save_checkpoint(p1, cfg, net)
        save_checkpoint(p2, cfg, net)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_version_mismatch_rejected(self, tmp_path):
        cfg = parse_config(SMOKE)
        net = network_from_config(cfg)
        path = str(tmp_path / "ck.spex")
        save_checkpoint(path, cfg, net)
        raw = bytearray(open(path, "rb").read())
        raw[5] = 99  # bump the version field
        open(path, "wb").write(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = str(tmp_path / "junk.spex")
        open(path, "wb").write(b"NOPE!" + bytes(16))
        with pytest.raises(CheckpointError, match="SPEX1"):
            load_checkpoint(path)


class TestAggregate:
    def test_matches_hand_computation(self):
        values = [0.11, 0.14, 0.08]
        mean, stderr = aggregate(values)
        assert mean == pytest.approx(np.mean(values), abs=1e-12)
        assert stderr == pytest.approx(np.std(values, ddof=1) / np.sqrt(3), abs=1e-12)

    def test_single_value(self):
        assert aggregate([0.5]) == (0.5, 0.0)


def write_smoke_config(tmp_path, text=SMOKE):
    path = tmp_path / "smoke.txt"
    path.write_text(text + f"out.dir = {tmp_path / 'run'}\n")
    return str(path)


class TestSubcommands:
    def test_train_rr_eval_pipeline(self, tmp_path):
        cfg_path = write_smoke_config(tmp_path)
        assert main(["train", "--config", cfg_path]) == 0
        run_dir = str(tmp_path / "run")
        ck = os.path.join(run_dir, "checkpoint.spex")
        assert os.path.exists(ck)
        assert os.path.exists(os.path.join(run_dir, "loss.csv"))
        assert os.path.exists(os.path.join(run_dir, "loss.png"))
        assert os.path.exists(os.path.join(run_dir, "config.txt"))
        _, _, transform = load_checkpoint(ck)
        assert transform is None

        assert main(["rr", "--checkpoint", ck, "--samples", "4000"]) == 0
        _, _, transform = load_checkpoint(ck)
        assert transform is not None and transform.mode == "scl"
        # idempotent re-run overwrites the section
        assert main(["rr", "--checkpoint", ck, "--samples", "4000"]) == 0

        assert main(["eval", "--checkpoint", ck, "--truncation"]) == 0
        metrics = os.path.join(run_dir, "metrics.csv")
        with open(metrics) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == (
            "run_id,seed,kernel,p,r,d,objective,nesting,extractor,index,"
            "ef_mse,ev_rae,lambda_hat,lambda_true,steps,wall_ms"
        ).split(",")
        assert rows[1][9] == "1" and rows[-1][9] == "mean"
        # 12+ significant digits on numeric fields
        assert len(rows[1][10].replace(".", "").replace("-", "").lstrip("0")) >= 12
        assert os.path.exists(os.path.join(run_dir, "eigenfunctions.png"))
        assert os.path.exists(os.path.join(run_dir, "truncation.csv"))

    def test_checkpoint_deterministic_across_runs(self, tmp_path):
        cfg_path = write_smoke_config(tmp_path)
        assert main(["train", "--config", cfg_path]) == 0
        first = open(tmp_path / "run" / "checkpoint.spex", "rb").read()
        assert main(["train", "--config", cfg_path]) == 0
        second = open(tmp_path / "run" / "checkpoint.spex", "rb").read()
        assert first == second

    def test_malformed_config_exit_2(self, tmp_path, capsys):
        path = tmp_path / "bad.txt"
        path.write_text("seed = 1\nwhat.is = this\n")
        assert main(["train", "--config", str(path)]) == 2
        assert "what.is" in capsys.readouterr().err

    def test_divergent_run_exit_3(self, tmp_path):
        # a step of size ~1e80 overflows the squared-gram term immediately
        text = SMOKE.replace(
            "train.steps = 40", "train.steps = 40\ntrain.lr = 1e80"
        )
        cfg_path = write_smoke_config(tmp_path, text)
        with np.errstate(all="ignore"):
            code = main(["train", "--config", cfg_path])
        assert code == 3
        # the rescue checkpoint still loads
        load_checkpoint(str(tmp_path / "run" / "checkpoint.spex"))

    def test_oracle_subcommand(self, tmp_path):
        cfg_path = write_smoke_config(tmp_path)
        assert main(["oracle", "--config", cfg_path, "--nodes", "256"]) == 0
        with open(tmp_path / "run" / "oracle.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2
        assert float(rows[0]["abs_err"]) <= 1e-8

    def test_sample_subcommand(self, tmp_path):
        cfg_path = write_smoke_config(tmp_path)
        assert main(["sample", "--config", cfg_path, "--count", "5000"]) == 0
        stats = list(csv.DictReader(open(tmp_path / "run" / "pool_stats.csv")))
        assert len(stats) == 2
        moment = float(stats[1]["moment"])
        target = float(stats[1]["target"])
        stderr = float(stats[1]["stderr"])
        assert abs(moment - target) <= 4 * stderr

    def test_table1_fast_grid(self, tmp_path):
        # a tiny two-cell grid exercising both extractor paths end to end
        for name, nest in (("cell_jn.txt", "joint"), ("cell_rr.txt", "none")):
            (tmp_path / name).write_text(
                SMOKE.replace("model.d = 1", "model.d = 1")
                .replace("nesting.mode = none", f"nesting.mode = {nest}")
                + f"out.dir = {tmp_path / name.replace('.txt', '')}\n"
            )
        out = str(tmp_path / "agg")
        assert main(
            ["table1", "--config-dir", str(tmp_path), "--out", out, "--seeds", "2"]
        ) == 0
        rows = list(csv.DictReader(open(os.path.join(out, "table1.csv"))))
        assert {r["cell"] for r in rows} == {"cell_jn", "cell_rr"}
        assert {r["extractor"] for r in rows} == {"direct", "rr"}
        for r in rows:
            assert r["seeds"] == "2"
            assert float(r["ef_mse_stderr"]) >= 0.0
        assert os.path.exists(os.path.join(out, "table1.png"))

    def test_console_entry_point(self, tmp_path):
        cfg_path = write_smoke_config(tmp_path)
        proc = subprocess.run(
            [sys.executable, "-m", "spex.cli", "train", "--config", cfg_path],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0, proc.stderr

    def test_lora_svd_two_encoder_pipeline(self, tmp_path):
        text = SMOKE.replace("train.objective = scl", "train.objective = lora_svd")
        cfg_path = write_smoke_config(tmp_path, text)
        assert main(["train", "--config", cfg_path]) == 0
        ck = str(tmp_path / "run" / "checkpoint.spex")
        cfg, net, _ = load_checkpoint(ck)
        from spex.nn import EncoderPair

        assert isinstance(net, EncoderPair)
        # parameters differ between the two encoders (separate init streams)
        assert not np.array_equal(net.phi.weights[0], net.psi.weights[0])
        assert main(["eval", "--checkpoint", ck, "--extractor", "direct"]) == 0
        # Rayleigh-Ritz is undefined for the two-encoder objective
        assert main(["rr", "--checkpoint", ck]) == 2

    def test_rr_rank_deficiency_exit_4(self, tmp_path):
        text = SMOKE.replace("model.d = 1", "model.d = 2")
        cfg_path = write_smoke_config(tmp_path, text)
        assert main(["train", "--config", cfg_path]) == 0
        ck = str(tmp_path / "run" / "checkpoint.spex")
        cfg, net, _ = load_checkpoint(ck)
        # collapse the encoder to a constant: the scl moment is rank one
        for w in net.weights:
            w[:] = 0.0
        net.biases[-1][:] = [1.0, 0.0]
        net.output_offset[:] = 0.0
        save_checkpoint(ck, cfg, net)
        assert main(["rr", "--checkpoint", ck, "--samples", "500"]) == 4
