"""Command-line surface: exit codes, report grammar, API equivalence."""

import json
import subprocess
import sys

import numpy as np
import pytest

from voxmae import (
    PhantomSpec,
    load_volume,
    make_phantom,
    token_count_report,
    tokenize,
    variance_map,
    write_raw_volume,
)
from voxmae.complexity import read_complexity_map


def run_cli(*args, **kw):
    return subprocess.run(
        [sys.executable, "-m", "voxmae.cli", *map(str, args)],
        capture_output=True, text=True, **kw,
    )


@pytest.fixture(scope="module")
def phantom_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "p.vol"
    write_raw_volume(make_phantom(PhantomSpec(edge=32, frames=4, seed=3)), path)
    return path


class TestPhantomCommand:
    def test_deterministic_output(self, tmp_path):
        a, b = tmp_path / "a.vol", tmp_path / "b.vol"
        assert run_cli("phantom", "--edge", 16, "--frames", 2, "--seed", 9, "--out", a).returncode == 0
        assert run_cli("phantom", "--edge", 16, "--frames", 2, "--seed", 9, "--out", b).returncode == 0
        assert a.read_bytes() == b.read_bytes()

    def test_matches_library(self, tmp_path):
        out = tmp_path / "c.vol"
        run_cli("phantom", "--edge", 16, "--frames", 2, "--seed", 4, "--out", out)
        vol = load_volume(out)
        ref = make_phantom(PhantomSpec(edge=16, frames=2, seed=4))
        assert np.array_equal(vol.data, ref.data)

    def test_global_flag_position_flexible(self, tmp_path):
        out = tmp_path / "d.vol"
        res = run_cli("--seed", 4, "phantom", "--edge", 16, "--frames", 2, "--out", out)
        assert res.returncode == 0
        ref = make_phantom(PhantomSpec(edge=16, frames=2, seed=4))
        assert np.array_equal(load_volume(out).data, ref.data)


class TestComplexityCommand:
    def test_scores_match_library_bit_exactly(self, phantom_file, tmp_path):
        out = tmp_path / "v.cmap.json"
        res = run_cli("complexity", "--input", phantom_file, "--metric", "variance",
                      "--coarse-edge", 8, "--out", out)
        assert res.returncode == 0
        got = read_complexity_map(out)
        want = variance_map(load_volume(phantom_file), 8)
        assert np.array_equal(got.scores, want.scores)

    def test_constant_volume_all_zero(self, tmp_path):
        from voxmae import Volume4D

        path = tmp_path / "const.vol"
        write_raw_volume(Volume4D(np.full((2, 8, 8, 8), 3.0, dtype=np.float32)), path)
        for metric in ("variance", "entropy", "laplacian", "mse"):
            out = tmp_path / f"{metric}.cmap.json"
            res = run_cli("complexity", "--input", path, "--metric", metric,
                          "--coarse-edge", 4, "--out", out)
            assert res.returncode == 0
            scores = np.asarray(json.loads(out.read_text())["scores"])
            assert np.abs(scores).max() < 1e-10

    def test_bad_metric_lists_choices(self, phantom_file, tmp_path):
        res = run_cli("complexity", "--input", phantom_file, "--metric", "fractal",
                      "--out", tmp_path / "x.json")
        assert res.returncode == 2
        for name in ("variance", "entropy", "laplacian", "mse"):
            assert name in res.stderr

    def test_unknown_flag_is_error(self, phantom_file, tmp_path):
        res = run_cli("complexity", "--input", phantom_file, "--out", tmp_path / "x.json",
                      "--frobnicate", 1)
        assert res.returncode == 2


class TestTokenizeCommand:
    def test_report_grammar_and_library_equivalence(self, phantom_file, tmp_path):
        out = tmp_path / "t.tokens.json"
        res = run_cli("tokenize", "--input", phantom_file, "--tau", 0.25, "--out", out)
        assert res.returncode == 0
        line = res.stdout.strip().splitlines()[-1]
        fields = dict(part.split("=") for part in line.split())
        assert set(fields) == {"tokens", "fine", "coarse", "uniform_fine", "reduction"}

        layout = tokenize(load_volume(phantom_file), tau=0.25)
        rep = token_count_report(layout)
        assert int(fields["tokens"]) == rep.total
        assert int(fields["fine"]) == rep.per_scale[0]
        assert int(fields["coarse"]) == rep.total - rep.per_scale[0]
        assert int(fields["uniform_fine"]) == rep.uniform_fine_total
        assert float(fields["reduction"]) == rep.reduction_ratio

        written = json.loads(out.read_text())
        assert written["tokens"] == [
            {"o": list(t.origin), "s": t.scale} for t in layout.tokens
        ]

    def test_huge_tau_keeps_everything_coarse(self, phantom_file, tmp_path):
        res = run_cli("tokenize", "--input", phantom_file, "--tau", 1e18,
                      "--out", tmp_path / "t.json")
        fields = dict(p.split("=") for p in res.stdout.strip().splitlines()[-1].split())
        assert fields["fine"] == "0"
        layout = tokenize(load_volume(phantom_file), tau=1e18)
        assert int(fields["coarse"]) == layout.fg_cells

    def test_tau_sweep_monotone(self, phantom_file, tmp_path):
        totals = []
        for tau in (0.1, 0.2, 0.25, 0.3):
            res = run_cli("tokenize", "--input", phantom_file, "--tau", tau,
                          "--out", tmp_path / f"t{tau}.json")
            fields = dict(p.split("=") for p in res.stdout.strip().splitlines()[-1].split())
            totals.append(int(fields["tokens"]))
        assert all(a >= b for a, b in zip(totals, totals[1:]))

    def test_missing_input_exits_2(self, tmp_path):
        res = run_cli("tokenize", "--input", tmp_path / "nope.vol", "--out", tmp_path / "t.json")
        assert res.returncode == 2
        assert res.stderr.strip()


class TestPretrainCommand:
    def test_paper_dry_run_echoes_reference_settings(self):
        res = run_cli("pretrain", "--profile", "paper", "--dry-run")
        assert res.returncode == 0
        echoed = dict(
            line.split(" = ") for line in res.stdout.strip().splitlines() if " = " in line
        )
        assert echoed["optimizer"] == "AdamW"
        assert float(echoed["beta1"]) == 0.9
        assert float(echoed["beta2"]) == 0.95
        assert echoed["lr_schedule"] == "warmup cosine"
        assert float(echoed["learning_rate"]) == 2e-4
        assert float(echoed["min_learning_rate"]) == 1e-6
        assert float(echoed["weight_decay"]) == 0.05
        assert int(echoed["warmup_epochs"]) == 5
        assert int(echoed["epochs"]) == 35
        assert int(echoed["encoder_depth"]) == 12
        assert int(echoed["encoder_heads"]) == 12
        assert int(echoed["embed_dim"]) == 768
        assert int(echoed["decoder_depth"]) == 8
        assert int(echoed["decoder_heads"]) == 16
        assert int(echoed["decoder_dim"]) == 512
        assert float(echoed["mask_ratio"]) == 0.75
        assert float(echoed["tau"]) == 0.25
        assert int(echoed["num_scales"]) == 2
        assert int(echoed["base_edge"]) == 4
        assert float(echoed["bg_thresh"]) == 1e-3
        assert int(echoed["batch_size"]) == 24

    def test_paper_without_force_refused(self, tmp_path):
        res = run_cli("pretrain", "--profile", "paper", "--data", tmp_path, "--out", tmp_path)
        assert res.returncode == 2
        assert "--force" in res.stderr

    def test_toy_run_reproducible_csv(self, tmp_path):
        data_dir = tmp_path / "data"
        data_dir.mkdir()
        for s in range(2):
            vol = make_phantom(PhantomSpec(edge=8, frames=2, seed=s, n_blobs=1, noise_sigma=0.01))
            write_raw_volume(vol, data_dir / f"v{s}.vol")
        outs = []
        for name in ("runA", "runB"):
            out = tmp_path / name
            res = run_cli("pretrain", "--profile", "toy", "--epochs", 5, "--seed", 7,
                          "--data", data_dir, "--out", out, "--quiet")
            assert res.returncode == 0, res.stderr
            outs.append((out / "loss.csv").read_text())
        assert outs[0] == outs[1]
        assert (tmp_path / "runA" / "checkpoint.bin").exists()

    def test_empty_data_dir_exits_2(self, tmp_path):
        (tmp_path / "empty").mkdir()
        res = run_cli("pretrain", "--profile", "toy", "--epochs", 1,
                      "--data", tmp_path / "empty", "--out", tmp_path / "o")
        assert res.returncode == 2


class TestGradcheckCommand:
    def test_pass_exit_zero(self):
        res = run_cli("gradcheck", "--config", "toy", "--tol", 1e-6, "--budget", 150)
        assert res.returncode == 0, res.stdout + res.stderr
        assert "PASS" in res.stdout

    def test_injected_fault_exit_one(self):
        res = run_cli("gradcheck", "--config", "toy", "--tol", 1e-6, "--budget", 150,
                      "--inject-fault")
        assert res.returncode == 1
        assert "FAIL" in res.stdout
        assert "psi." in res.stdout

    def test_patch_norm_path_passes(self):
        res = run_cli("gradcheck", "--config", "toy", "--tol", 1e-6, "--budget", 150,
                      "--patch-norm")
        assert res.returncode == 0


class TestThreadsFlag:
    def test_threads_do_not_change_output(self, phantom_file, tmp_path):
        outs = []
        for threads in (1, 4):
            out = tmp_path / f"t{threads}.json"
            res = run_cli("--threads", threads, "tokenize", "--input", phantom_file,
                          "--out", out)
            assert res.returncode == 0
            outs.append((res.stdout, out.read_text()))
        assert outs[0] == outs[1]

    def test_bad_thread_count(self):
        res = run_cli("--threads", 0, "phantom", "--out", "/tmp/x.vol")
        assert res.returncode == 2
