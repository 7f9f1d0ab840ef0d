import json
import subprocess
import sys

import numpy as np
import pytest

import blockdiff.decode as dec
from blockdiff.cli import main
from blockdiff.model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from blockdiff.train import AnnealSchedule, anneal_block_size

SMALL = ["--vocab", "16", "--dim", "16", "--heads", "2", "--layers", "1"]


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


@pytest.fixture
def corpus(tmp_path):
    out = tmp_path / "data"
    assert main(["gen-data", "--out", str(out), "--vocab", "16", "--samples", "24", "--seed", "3"]) == 0
    return out / "corpus.jsonl"


@pytest.fixture
def ckpt(tmp_path, corpus):
    out = tmp_path / "train"
    assert main(["train", "--corpus", str(corpus), "--out", str(out), "--steps", "12",
                 "--batch-size", "2", "--bd", "4", "--no-plots", *SMALL]) == 0
    return out / "model.ckpt"


# --- gen-data -----------------------------------------------------------------------


def test_gen_data_record_count(corpus):
    assert len(corpus.read_text().splitlines()) == 24
    m = manifest(corpus.parent)
    assert m["command"] == "gen-data" and m["metrics"]["records"] == 24
    assert m["artifacts"]["corpus"] == str(corpus)


def test_gen_data_byte_identical(tmp_path, corpus):
    out = tmp_path / "again"
    main(["gen-data", "--out", str(out), "--vocab", "16", "--samples", "24", "--seed", "3"])
    assert (out / "corpus.jsonl").read_bytes() == corpus.read_bytes()
    assert (out / "manifest.json").read_text().replace(str(out), "X") == \
        (corpus.parent / "manifest.json").read_text().replace(str(corpus.parent), "X")


def test_gen_data_invalid_vocab(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path), "--vocab", "7"]) == 1
    assert "vocab_size" in capsys.readouterr().err


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--bogus"])
    assert exc.value.code == 1


# --- train ---------------------------------------------------------------------------


def test_train_zero_steps_equals_init(tmp_path, corpus):
    out = tmp_path / "t0"
    assert main(["train", "--corpus", str(corpus), "--out", str(out), "--steps", "0",
                 "--seed", "5", *SMALL]) == 0
    cfg = ModelConfig(vocab_size=16, model_dim=16, num_heads=2, num_layers=1, ffn_dim=64)
    save_checkpoint(init_params(cfg, 5), tmp_path / "init.ckpt")
    assert (out / "model.ckpt").read_bytes() == (tmp_path / "init.ckpt").read_bytes()


def test_train_history_and_determinism(tmp_path, corpus, ckpt):
    hist = jsonl(ckpt.parent / "history.jsonl")
    assert [h["block_size"] for h in hist] == [anneal_block_size(AnnealSchedule(4), s / 12) for s in range(12)]
    assert set(hist[0]) == {"step", "block_size", "total", "diff", "causal"}
    out = tmp_path / "rerun"
    main(["train", "--corpus", str(corpus), "--out", str(out), "--steps", "12", "--batch-size", "2",
          "--bd", "4", "--no-plots", *SMALL])
    assert (out / "model.ckpt").read_bytes() == ckpt.read_bytes()


def test_train_writes_loss_plot(tmp_path, corpus):
    out = tmp_path / "plot"
    assert main(["train", "--corpus", str(corpus), "--out", str(out), "--steps", "3", *SMALL]) == 0
    assert (out / "loss.png").read_bytes()[:4] == b"\x89PNG"
    assert manifest(out)["artifacts"]["loss_plot"].endswith("loss.png")


def test_train_missing_corpus_is_io_error(tmp_path):
    assert main(["train", "--corpus", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)]) == 3


def test_train_malformed_corpus_is_format_error(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"tokens": [1]}\n')
    assert main(["train", "--corpus", str(bad), "--out", str(tmp_path)]) == 3


def test_train_vocab_too_small_for_corpus(tmp_path, corpus):
    assert main(["train", "--corpus", str(corpus), "--out", str(tmp_path), "--vocab", "8",
                 "--dim", "16", "--heads", "2"]) == 1


# --- decode --------------------------------------------------------------------------


def run_decode(tmp_path, ckpt, name, *extra):
    out = tmp_path / name
    assert main(["decode", "--ckpt", str(ckpt), "--out", str(out), "--max-new", "20", *extra]) == 0
    return manifest(out)["metrics"], out


def test_decode_ar_vs_spec_identical(tmp_path, ckpt):
    ar, _ = run_decode(tmp_path, ckpt, "a", "--prompt", "1,2,3", "--mode", "ar")
    for mode in ("spec_linear", "spec_quadratic"):
        sp, _ = run_decode(tmp_path, ckpt, mode, "--prompt", "1,2,3", "--mode", mode)
        assert sp["tokens"] == ar["tokens"]


def test_decode_block_one_matches_ar(tmp_path, ckpt):
    ar, _ = run_decode(tmp_path, ckpt, "a", "--prompt", "4,5", "--mode", "ar")
    for mode in ("mdm", "spec_linear", "spec_quadratic"):
        m, _ = run_decode(tmp_path, ckpt, f"b{mode}", "--prompt", "4,5", "--mode", mode, "--block", "1")
        assert m["tokens"] == ar["tokens"]


def test_decode_mdm_tau_one_trace(tmp_path):
    ckpt = tmp_path / "rand.ckpt"
    save_checkpoint(init_params(ModelConfig(vocab_size=16, model_dim=16, num_heads=2, num_layers=1), 4), ckpt)
    m, out = run_decode(tmp_path, ckpt, "mdm", "--prompt", "3,1,4", "--mode", "mdm", "--tau", "1.0")
    assert set(m["reveals_per_denoise"]) == {1}
    steps = [r for r in jsonl(out / "trace.jsonl") if r.get("phase") == "denoise"]
    assert len(steps) >= 7 and all(r["revealed"] == 1 for r in steps)


def test_decode_corpus_prompt_reports_match(tmp_path, ckpt, corpus):
    m, _ = run_decode(tmp_path, ckpt, "c", "--corpus", str(corpus), "--index", "2", "--mode", "mdm")
    assert "exact_match" in m and m["reference"][-1] == 14


def test_decode_tau_with_non_mdm_mode_conflicts(tmp_path, ckpt):
    assert main(["decode", "--ckpt", str(ckpt), "--prompt", "1", "--mode", "spec_linear",
                 "--tau", "0.5", "--out", str(tmp_path)]) == 1


def test_decode_needs_one_prompt_source(tmp_path, ckpt):
    assert main(["decode", "--ckpt", str(ckpt), "--out", str(tmp_path)]) == 1


def test_decode_prompt_out_of_vocab(tmp_path, ckpt):
    assert main(["decode", "--ckpt", str(ckpt), "--prompt", "15", "--out", str(tmp_path)]) == 1


def test_decode_corrupt_checkpoint(tmp_path, ckpt):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXX" + ckpt.read_bytes()[4:])
    assert main(["decode", "--ckpt", str(bad), "--prompt", "1", "--out", str(tmp_path)]) == 3


# --- bench ---------------------------------------------------------------------------


def test_bench_constant_model(tmp_path):
    out = tmp_path / "bench"
    assert main(["bench", "--constant", "3", "--out", str(out), "--samples", "2", "--max-new", "128",
                 "--blocks", "2,4,8", "--taus", "1.0,0.7", "--min-len", "32", *SMALL]) == 0
    rows = jsonl(out / "bench.jsonl")
    assert all(r["tokens_per_nfe"] == 1.0 for r in rows if r["mode"] == "ar")
    for mode in ("spec_linear", "spec_quadratic"):
        vals = [next(r for r in rows if r["mode"] == mode and r["block"] == b)["tokens_per_nfe"]
                for b in (2, 4, 8)]
        assert vals == sorted(vals) and vals[0] < vals[-1]
    assert len({r["tau"] for r in rows}) == 2
    assert (out / "tokens_per_nfe.png").exists() and (out / "tau_sweep.png").exists()


def test_bench_table_has_one_column_per_tau(tmp_path, capsys):
    taus = "1.0,0.9,0.7,0.4,0.2"
    main(["bench", "--constant", "3", "--out", str(tmp_path), "--samples", "1", "--blocks", "2",
          "--taus", taus, "--min-len", "0", "--no-plots", *SMALL])
    lines = capsys.readouterr().out.splitlines()
    header = next(line for line in lines if line.startswith("mode"))
    assert header.count("tau=") == 5
    assert len(next(line for line in lines if line.startswith("ar")).split()) == 2 + 5


def test_bench_min_len_filter_absent(tmp_path, capsys):
    main(["bench", "--constant", "3", "--out", str(tmp_path), "--samples", "1", "--blocks", "2",
          "--max-new", "8", "--min-len", "32", "--modes", "ar", "--no-plots", *SMALL])
    assert all(r["tokens_per_nfe"] is None for r in jsonl(tmp_path / "bench.jsonl"))
    assert "lower --min-len" in capsys.readouterr().out


def test_bench_needs_model(tmp_path):
    assert main(["bench", "--out", str(tmp_path)]) == 1


# --- verify-spec / grad-check ----------------------------------------------------------


def test_verify_spec_passes(tmp_path):
    assert main(["verify-spec", "--trials", "10", "--out", str(tmp_path)]) == 0
    assert manifest(tmp_path)["metrics"]["status"] == "pass"


def test_verify_spec_zero_trials(tmp_path, capsys):
    assert main(["verify-spec", "--trials", "0", "--out", str(tmp_path)]) == 0
    assert "no trials" in capsys.readouterr().out
    assert manifest(tmp_path)["metrics"]["status"] == "no trials"


def test_verify_spec_mutation_fails(tmp_path, monkeypatch, capsys):
    orig = dec.linear_accept_length
    monkeypatch.setattr(dec, "linear_accept_length", lambda a, d: min(orig(a, d) + 1, len(d)))
    assert main(["verify-spec", "--trials", "15", "--out", str(tmp_path)]) == 2
    text = capsys.readouterr().out
    assert "mismatch seed=" in text and "step" in text
    recs = jsonl(tmp_path / "verify.jsonl")
    assert recs and {"seed", "block", "mode", "index", "step"} <= recs[0].keys()


def test_grad_check_reports_h_sweep(tmp_path, capsys):
    args = ["grad-check", "--out", str(tmp_path), "--max-entries", "8", "--seed", "2"]
    assert main(args) == 0
    rows = jsonl(tmp_path / "gradcheck.jsonl")
    assert [r["h"] for r in rows] == [1e-4, 1e-5, 1e-6]
    assert manifest(tmp_path)["metrics"]["max_rel_error"]["1e-05"] < 1e-4
    first = (tmp_path / "gradcheck.jsonl").read_text()
    main(args)
    assert (tmp_path / "gradcheck.jsonl").read_text() == first


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "blockdiff.cli", "verify-spec", "--trials", "0",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0 and "no trials" in proc.stdout
