import csv
import json

import numpy as np
import pytest

from kvbudget.cli import main
from kvbudget.traceio import SynthSpec, generate_synth, load_report, save_trace


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run(*argv):
    return main([str(a) for a in argv])


class TestProfile:
    def test_uniform_trace_flat(self, tmp_path):
        trace = tmp_path / "u.ndjson"
        save_trace(generate_synth(SynthSpec(4, 2, 64, 8, [64] * 4, seed=0, hot_mass=0.0)), trace)
        assert run("profile", "--trace", trace, "--window", 8, "--out", tmp_path / "o") == 0
        report = load_report(tmp_path / "o" / "profile_seed0.json")
        assert len(set(report.lmba)) == 1

    def test_kappa_ramp_monotone(self, tmp_path):
        out = tmp_path / "o"
        code = run("profile", "--kappa", "1,4,16,64,256", "--seq-len", 256, "--heads", 4,
                   "--seed", "0,1", "--out", out)
        assert code == 0
        for seed in (0, 1):
            lmba = load_report(out / f"profile_seed{seed}.json").lmba
            assert all(a <= b for a, b in zip(lmba, lmba[1:]))
        assert (out / "manifest.json").exists()

    def test_toy_model_with_lmbo(self, tmp_path):
        out = tmp_path / "o"
        code = run("profile", "--layers", 2, "--heads", 2, "--head-dim", 4, "--seq-len", 24,
                   "--window", 4, "--lmbo", "--out", out)
        assert code == 0
        report = json.loads((out / "profile_seed0.json").read_text())
        assert len(report["per_layer"]["lmbo"]) == 2
        assert all(5 <= b <= 24 for b in report["per_layer"]["lmbo"])

    def test_lmbo_on_trace_is_capability_error(self, tmp_path, capsys):
        trace = tmp_path / "t.ndjson"
        save_trace(generate_synth(SynthSpec(2, 2, 32, 4, [1, 32])), trace)
        assert run("profile", "--trace", trace, "--window", 4, "--lmbo", "--out", tmp_path) == 2
        assert "LMBO" in capsys.readouterr().err


class TestCompare:
    def test_fullkv_zero_losses(self, tmp_path):
        out = tmp_path / "o"
        code = run("compare", "--policy", "fullkv", "--budget", "32,64", "--seq-len", 32,
                   "--layers", 2, "--heads", 2, "--head-dim", 4, "--window", 4, "--out", out)
        assert code == 0
        for row in read_csv(out / "summary.csv"):
            assert float(row["mean_attn_loss"]) == 0.0
            assert float(row["mean_out_loss"]) == 0.0
            assert float(row["mean_attn_loss_mass"]) < 1e-12

    def test_bounded_and_unbounded_cells(self, tmp_path):
        out = tmp_path / "o"
        code = run("compare", "--policy", "zigzag", "--policy",
                   "zigzag:b_bound=0,allow_undersized=true", "--kappa", "1,1,1,128",
                   "--seq-len", 128, "--budget", 32, "--out", out)
        assert code == 0
        rows = read_csv(out / "summary.csv")
        assert {r["policy"] for r in rows} == {"zigzag", "zigzag-bound0"}
        a = load_report(out / "zigzag_B32_seed0.json")
        b = load_report(out / "zigzag-bound0_B32_seed0.json")
        assert a.b_bound == 16 and b.b_bound == 0
        assert a.layer_budgets != b.layer_budgets

    def test_summary_counts_skipped(self, tmp_path):
        out = tmp_path / "o"
        # B=6 does not exceed the window: SnapKV and ZigZag skip, StreamingLLM runs
        code = run("compare", "--policy", "snapkv", "--policy", "zigzag", "--policy", "streamingllm",
                   "--budget", "6,16", "--seed", "0,1", "--kappa", "2,8", "--seq-len", 64,
                   "--out", out)
        assert code == 0
        summary, skipped = read_csv(out / "summary.csv"), read_csv(out / "skipped.csv")
        assert len(skipped) == 4
        assert len(summary) == 3 * 2 * 2 - len(skipped)
        assert [int(r["rank"]) for r in summary] == list(range(1, len(summary) + 1))
        losses = [float(r["mean_attn_loss"]) for r in summary]
        assert losses == sorted(losses)

    def test_config_file_and_flag_override(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"policies": ["snapkv"], "budgets": [12], "kappa": [1, 64],
                                   "seq_len": 64, "seeds": [3]}))
        out = tmp_path / "o"
        assert run("compare", "--config", cfg, "--budget", 20, "--out", out) == 0
        assert (out / "snapkv_B20_seed3.json").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["budgets"] == [20]

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"budgetz": [1]}))
        assert run("compare", "--config", cfg, "--out", tmp_path) == 2

    def test_manifest_reproduces_bytes(self, tmp_path):
        first = tmp_path / "a"
        assert run("compare", "--policy", "h2o", "--policy", "pyramidkv", "--budget", 40,
                   "--layers", 2, "--heads", 2, "--head-dim", 4,
                   "--window", 4, "--seed", 5, "--seq-len", 80, "--out", first) == 0
        config = json.loads((first / "manifest.json").read_text())["config"]
        config["out"] = str(tmp_path / "b")
        cfg = tmp_path / "replay.json"
        cfg.write_text(json.dumps(config))
        assert run("compare", "--config", cfg) == 0
        for name in ("summary.csv", "h2o_B40_seed5.json", "pyramidkv_B40_seed5.json"):
            assert (first / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_thread_pool_matches_serial(self, tmp_path, monkeypatch):
        args = ["compare", "--policy", "snapkv", "--budget", 16, "--kappa", "1,8,64",
                "--seq-len", 64, "--seed", "0,1,2,3"]
        assert run(*args, "--out", tmp_path / "serial") == 0
        monkeypatch.setenv("ZIGZAG_THREADS", "4")
        assert run(*args, "--out", tmp_path / "pool") == 0
        serial = (tmp_path / "serial" / "summary.csv").read_bytes()
        assert serial == (tmp_path / "pool" / "summary.csv").read_bytes()


class TestNeedle:
    def test_needle_in_window(self, tmp_path):
        out = tmp_path / "o"
        code = run("needle", "--policy", "snapkv", "--policy", "zigzag", "--budget", 16,
                   "--lengths", "64,128", "--depths", "1.0", "--out", out)
        assert code == 0
        assert all(float(r["retention"]) == 1.0 for r in read_csv(out / "needle.csv"))

    def test_fullkv_all_ones(self, tmp_path):
        out = tmp_path / "o"
        assert run("needle", "--policy", "fullkv", "--lengths", "64,128", "--out", out) == 0
        matrix = read_csv(out / "needle_fullkv_B16.csv")
        assert len(matrix) == 5
        assert all(float(v) == 1.0 for row in matrix for k, v in row.items() if k != "depth")

    def test_zigzag_beats_streaming_everywhere(self, tmp_path):
        out = tmp_path / "o"
        code = run("needle", "--policy", "zigzag", "--policy", "streamingllm", "--budget", 24,
                   "--lengths", "64,128,256", "--depths", "0.1,0.3,0.5,0.7,0.9",
                   "--seed", "0,1", "--out", out)
        assert code == 0
        rows = read_csv(out / "needle.csv")
        by = {(r["policy"], r["length"], r["depth"]): float(r["retention"]) for r in rows}
        cells = {(l, d) for _, l, d in by}
        assert len(cells) == 15
        for l, d in cells:
            assert by[("zigzag", l, d)] >= by[("streamingllm", l, d)]

    def test_position_outside_context(self, tmp_path, capsys):
        assert run("needle", "--lengths", 64, "--positions", 64, "--out", tmp_path) == 2
        assert "outside" in capsys.readouterr().err


class TestTraceCommands:
    def test_gen_and_validate(self, tmp_path, capsys):
        path = tmp_path / "t.ndjson"
        assert run("gen-trace", path, "--kappa", "1,32", "--seq-len", 32, "--window", 4) == 0
        assert run("validate-trace", path) == 0
        model_path = tmp_path / "m.ndjson"
        assert run("gen-trace", model_path, "--from-model", "--layers", 2, "--seq-len", 20) == 0
        assert run("validate-trace", model_path) == 0
        assert "ok" in capsys.readouterr().out

    def test_validate_reports_bad_row(self, tmp_path, capsys):
        path = tmp_path / "t.ndjson"
        assert run("gen-trace", path, "--kappa", "1,32", "--seq-len", 32, "--window", 4) == 0
        lines = path.read_text().splitlines()
        rec = json.loads(lines[3])
        rec["values"] = (np.array(rec["values"]) * 0.8).tolist()
        lines[3] = json.dumps(rec)
        path.write_text("\n".join(lines) + "\n")
        assert run("validate-trace", path) == 1
        assert f"layer {rec['layer']} head {rec['head']} row {rec['row']}" in capsys.readouterr().err

    def test_gen_same_seed_same_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for p in (a, b):
            assert run("gen-trace", p, "--kappa", "2,8", "--seq-len", 32, "--seed", 9) == 0
        assert a.read_bytes() == b.read_bytes()
