import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from streamvqa.config import ConfigError, RunConfig, config_fingerprint, load_config, \
    parse_config_text, serialize_config, validate_config

# -- config ------------------------------------------------------------------------


def test_roundtrip_is_identity():
    cfg = RunConfig(enc_dim=32, enc_heads=2, tau_select=0.25, similarity="dot",
                    grad_through_selection=False)
    text = serialize_config(cfg)
    again = parse_config_text(text)
    assert again == cfg
    assert serialize_config(again) == text


def test_parse_accepts_comments_and_blanks():
    cfg = parse_config_text("# a comment\n\nenc_dim = 32\nenc_heads = 2\n")
    assert cfg.enc_dim == 32


def test_unknown_key_is_field_precise():
    with pytest.raises(ConfigError, match="unknown config key 'enc_dimm'"):
        parse_config_text("enc_dimm = 32")


def test_bad_value_type():
    with pytest.raises(ConfigError, match="tau_select"):
        parse_config_text("tau_select = soon")


def test_cross_field_validation_messages():
    with pytest.raises(ConfigError, match="select_count"):
        parse_config_text("select_count = 40")
    with pytest.raises(ConfigError, match="tap_layer"):
        parse_config_text("tap_layer = 9")
    with pytest.raises(ConfigError, match="summary_tokens"):
        parse_config_text("summary_tokens = 16")
    with pytest.raises(ConfigError, match="similarity"):
        parse_config_text("similarity = euclid")
    with pytest.raises(ConfigError, match="alphabet_size"):
        parse_config_text("alphabet_size = 26\nframe_channels = 4")


def test_overrides_win_over_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("enc_dim = 32\nenc_heads = 2\n")
    cfg = load_config(p, {"enc_dim": "64", "enc_heads": "4"})
    assert cfg.enc_dim == 64 and cfg.enc_heads == 4


def test_missing_config_file():
    with pytest.raises(ConfigError, match="not found"):
        load_config("/nonexistent/run.cfg")


def test_fingerprint_tracks_encoder_shape_only():
    a = RunConfig()
    assert config_fingerprint(a) == config_fingerprint(RunConfig())
    assert config_fingerprint(a) != config_fingerprint(RunConfig(tap_layer=3))
    # selection count does not change what the encoder produced
    assert config_fingerprint(a) == config_fingerprint(RunConfig(select_count=2))


# -- CLI ----------------------------------------------------------------------------

TINY = {
    "clips_per_video": "4", "frames_per_clip": "4", "frame_tokens": "16",
    "frame_channels": "8", "enc_dim": "32", "enc_layers": "2", "enc_heads": "2",
    "tap_layer": "1", "reader_dim": "32", "reader_layers": "2", "reader_heads": "2",
    "summary_tokens": "2", "select_count": "2", "events_min": "2", "events_max": "2",
    "alphabet_size": "6", "train_qa_target": "16", "heldout_videos": "1",
    "stage1_samples": "8", "stage1_batch": "4", "epochs_align": "1",
    "epochs_stage1": "1", "epochs_warmup": "1", "epochs_joint": "0",
}


def run_cli(*args):
    return subprocess.run(
        [sys.executable, "-m", "streamvqa.cli", *args],
        capture_output=True, text=True)


def tiny_args():
    out = []
    for k, v in TINY.items():
        out += ["--set", f"{k}={v}"]
    return out


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    ckpt = root / "model.vstt"
    r = run_cli("gen-data", "--out", str(data), *tiny_args())
    assert r.returncode == 0, r.stderr
    r = run_cli("train", "--stage", "all", "--data", str(data),
                "--out", str(ckpt), *tiny_args())
    assert r.returncode == 0, r.stderr
    return root, data, ckpt


def test_gen_data_layout(workspace):
    _, data, _ = workspace
    assert (data / "qa.jsonl").exists()
    assert (data / "videos.jsonl").exists()
    assert (data / "config.txt").exists()  # effective config echoed
    streams = list((data / "streams").glob("*.vsds"))
    assert streams


def test_encode_then_ask_matches_in_process(workspace, tmp_path):
    root, data, ckpt = workspace
    video = json.loads((data / "videos.jsonl").read_text().splitlines()[0])["stream"]
    bank = tmp_path / "bank.vsmb"
    r = run_cli("encode", "--ckpt", str(ckpt), "--video", str(data / video),
                "--out", str(bank), *tiny_args())
    assert r.returncode == 0, r.stderr

    qa = json.loads((data / "qa.jsonl").read_text().splitlines()[0])
    r1 = run_cli("ask", "--ckpt", str(ckpt), "--bank", str(bank),
                 "--question", qa["question_text"], *tiny_args())
    assert r1.returncode == 0, r1.stderr
    r2 = run_cli("ask", "--ckpt", str(ckpt), "--bank", str(bank),
                 "--question", qa["question_text"], *tiny_args())
    assert r1.stdout == r2.stdout  # deterministic

    # in-process reference: encode + answer without persistence
    from streamvqa.config import RunConfig
    from streamvqa.pipeline import VideoQaModel, answer
    from streamvqa.synthdata import load_stream
    from streamvqa.tokenizer import Vocab
    cfg = load_config(None, TINY)
    vocab = Vocab(cfg.alphabet_size, cfg.max_clips)
    model = VideoQaModel.load(ckpt, cfg, vocab)
    stream = load_stream(data / video)
    res = answer(model, model.encode(stream), vocab.encode(qa["question_text"]))
    assert f"answer: {res.text}" in r1.stdout


def test_eval_command(workspace, tmp_path):
    root, data, ckpt = workspace
    report = tmp_path / "eval.jsonl"
    r = run_cli("eval", "--ckpt", str(ckpt), "--data", str(data),
                "--split", "heldout", "--report", str(report), *tiny_args())
    assert r.returncode == 0, r.stderr
    assert "hit=" in r.stdout and "mIoP=" in r.stdout
    lines = [json.loads(l) for l in report.read_text().splitlines()]
    assert lines and {"kind", "iop", "similarities"} <= set(lines[0])
    summary = json.loads((report.parent / (report.name + ".summary.json")).read_text())
    assert "config" in summary  # provenance echoed


def test_report_budget(workspace, tmp_path):
    _, _, ckpt = workspace
    out = tmp_path / "budget.json"
    r = run_cli("report-budget", "--clip-counts", "4,8", "--repeats", "1",
                "--report", str(out), *tiny_args())
    assert r.returncode == 0, r.stderr
    rows = json.loads(out.read_text())["rows"]
    assert [row["K"] for row in rows] == [4, 8]
    assert all(row["reader_memory_tokens"] == 16 for row in rows)  # V*T*P


def test_ablate_selection(workspace, tmp_path):
    _, data, ckpt = workspace
    out = tmp_path / "ablate.json"
    r = run_cli("ablate", "--axis", "selection", "--data", str(data),
                "--ckpt", str(ckpt), "--report", str(out), *tiny_args())
    assert r.returncode == 0, r.stderr
    rows = json.loads(out.read_text())["rows"]
    assert [row["variant"] for row in rows] == ["selection=adaptive", "selection=last-V"]


# -- exit codes -----------------------------------------------------------------------


def test_exit_code_config_error():
    r = run_cli("gen-data", "--out", "/tmp/x", "--set", "enc_dim=13", "--set",
                "enc_heads=4")
    assert r.returncode == 2
    assert r.stderr.startswith("error: config:")


def test_exit_code_data_error(workspace):
    _, _, ckpt = workspace
    r = run_cli("eval", "--ckpt", str(ckpt), "--data", "/nonexistent", *tiny_args())
    assert r.returncode == 3
    assert r.stderr.startswith("error: data:")


def test_exit_code_checkpoint_error(workspace):
    _, data, _ = workspace
    r = run_cli("eval", "--ckpt", "/nonexistent.vstt", "--data", str(data), *tiny_args())
    assert r.returncode == 4
    assert r.stderr.startswith("error: checkpoint:")


def test_fingerprint_mismatch_is_data_error(workspace, tmp_path):
    root, data, ckpt = workspace
    video = json.loads((data / "videos.jsonl").read_text().splitlines()[0])["stream"]
    bank = tmp_path / "bank.vsmb"
    r = run_cli("encode", "--ckpt", str(ckpt), "--video", str(data / video),
                "--out", str(bank), *tiny_args())
    assert r.returncode == 0
    # ask under a different tap layer: the bank no longer matches
    args = tiny_args() + ["--set", "tap_layer=2"]
    r = run_cli("ask", "--ckpt", str(ckpt), "--bank", str(bank),
                "--question", "When does A appear?", *args)
    assert r.returncode == 3
    assert "different configuration" in r.stderr


def test_bank_with_wrong_magic_is_data_error(workspace, tmp_path):
    _, _, ckpt = workspace
    bad = tmp_path / "bad.vsmb"
    bad.write_bytes(b"JUNKJUNKJUNK")
    r = run_cli("ask", "--ckpt", str(ckpt), "--bank", str(bad),
                "--question", "When does A appear?", *tiny_args())
    assert r.returncode == 3
