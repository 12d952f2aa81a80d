import json
import subprocess
import sys

import pytest

from shared_ape.cli import main
from shared_ape.corpus import write_parallel_files
from shared_ape.synthetic import post_editing_corpus

SUBCOMMANDS = ["bpe-learn", "bpe-apply", "build-vocab", "train", "translate", "evaluate", "attn-stats", "attn-plot"]

TINY = ["--word-dim", "8", "--enc-hidden", "8", "--dec-hidden", "8", "--enc-layers", "1", "--dec-layers", "1",
        "--epochs", "2", "--batch-size", "5"]


def run(*args, stdin=None):
    return subprocess.run([sys.executable, "-m", "shared_ape", *args], input=stdin, capture_output=True,
                          text=True, encoding="utf-8")


@pytest.fixture
def data(tmp_path):
    write_parallel_files(post_editing_corpus(50, seed=0), tmp_path / "train")
    write_parallel_files(post_editing_corpus(10, seed=1), tmp_path / "dev")
    return tmp_path


def test_evaluate_identity(tmp_path, capsys):
    path = tmp_path / "h.txt"
    path.write_text("the cat sat\na b c d e\n", encoding="utf-8")
    assert main(["evaluate", "--hyp", str(path), "--ref", str(path), "--metric", "both"]) == 0
    assert capsys.readouterr().out == "TER\t0.00\nBLEU\t100.00\n"


def test_evaluate_length_mismatch(tmp_path, capsys):
    (tmp_path / "h").write_text("a\nb\n", encoding="utf-8")
    (tmp_path / "r").write_text("a\n", encoding="utf-8")
    assert main(["evaluate", "--hyp", str(tmp_path / "h"), "--ref", str(tmp_path / "r")]) == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("shared-ape evaluate: error:") and "\n" not in err


@pytest.mark.parametrize("command", SUBCOMMANDS)
def test_every_subcommand_has_help(command):
    result = run(command, "--help")
    assert result.returncode == 0
    assert "usage:" in result.stdout and "--seed" in result.stdout


def test_missing_file_and_unknown_flag(tmp_path):
    result = run("evaluate", "--hyp", str(tmp_path / "nope"), "--ref", str(tmp_path / "nope"))
    assert result.returncode == 2 and "no such file" in result.stderr
    assert run("evaluate", "--bogus").returncode == 2
    assert run("attn-stats", "--dir", str(tmp_path), "--threshold", "0.5").returncode == 2


def test_bpe_round_trip_through_reverse_filter(data):
    codes = data / "codes.bpe"
    assert run("bpe-learn", "--input", str(data / "train.src"), str(data / "train.pe"), "--merges", "20",
               "--output", str(codes)).returncode == 0
    text = "s1 s10 s11 unseenword\nt3 t0\n"
    segmented = run("bpe-apply", "--codes", str(codes), stdin=text)
    assert segmented.returncode == 0 and "@@" in segmented.stdout
    restored = run("bpe-apply", "--reverse", stdin=segmented.stdout)
    assert restored.stdout == text


def test_bpe_apply_needs_codes(capsys):
    assert main(["bpe-apply", "--input", "-"]) == 1
    assert "--codes" in capsys.readouterr().err


def test_build_vocab(data):
    out = data / "vocab.txt"
    assert main(["build-vocab", "--input", str(data / "train.src"), "--max-size", "5", "--output", str(out)]) == 0
    lines = out.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 5 and all(len(line.split("\t")) == 2 for line in lines)


def train_tiny(data, out, *extra):
    return main(["train", "--train", str(data / "train"), "--valid", str(data / "dev"), "--out", str(out),
                 "--seed", "4", *TINY, *extra])


def test_repeated_runs_are_bit_identical(data):
    outputs = []
    for name in ("a", "b"):
        assert train_tiny(data, data / name, "--dropout", "0.2") == 0
        hyp = data / f"{name}.hyp"
        assert main(["translate", "--model", str(data / name), "--src", str(data / "dev.src"),
                     "--mt", str(data / "dev.mt"), "--output", str(hyp), "--attn-dir", str(data / f"{name}.att"),
                     "--beam", "3", "--threads", "2"]) == 0
        attn = sorted((data / f"{name}.att").glob("*.attn"))
        outputs.append(((data / name / "model.ckpt").read_bytes(), (data / name / "train.log").read_text(),
                        hyp.read_text(), [p.read_text() for p in attn]))
    assert outputs[0] == outputs[1]
    assert len(outputs[0][3]) == 10


def test_config_file_and_flag_override(data):
    cfg = data / "run.cfg"
    cfg.write_text("epochs=1\nword_dim=6\nlr=0.5\n", encoding="utf-8")
    assert main(["train", "--config", str(cfg), "--train", str(data / "train"), "--valid", str(data / "dev"),
                 "--out", str(data / "m"), "--enc-hidden", "4", "--dec-hidden", "4", "--word-dim", "5"]) == 0
    effective = dict(line.split("=", 1) for line in (data / "m" / "effective.cfg").read_text().splitlines())
    assert effective["epochs"] == "1" and effective["lr"] == "0.5" and effective["word_dim"] == "5"
    cfg.write_text("nonsense=1\n", encoding="utf-8")
    assert main(["train", "--config", str(cfg), "--train", str(data / "train"), "--valid", str(data / "dev"),
                 "--out", str(data / "m2")]) == 1


def test_vocab_hash_mismatch(data, capsys):
    assert train_tiny(data, data / "m") == 0
    vocab = data / "m" / "vocab.pe"
    vocab.write_text(vocab.read_text(encoding="utf-8") + "extra\t1\n", encoding="utf-8")
    assert main(["translate", "--model", str(data / "m"), "--src", str(data / "dev.src"),
                 "--mt", str(data / "dev.mt")]) == 1
    assert "hash mismatch" in capsys.readouterr().err


def test_translate_misaligned_inputs(data, capsys):
    assert train_tiny(data, data / "m") == 0
    (data / "short.mt").write_text("t1\n", encoding="utf-8")
    assert main(["translate", "--model", str(data / "m"), "--src", str(data / "dev.src"),
                 "--mt", str(data / "short.mt")]) == 1
    assert "lines" in capsys.readouterr().err


def test_attention_commands(data, capsys):
    assert train_tiny(data, data / "m") == 0
    att = data / "att"
    assert main(["translate", "--model", str(data / "m"), "--src", str(data / "dev.src"),
                 "--mt", str(data / "dev.mt"), "--output", str(data / "hyp"), "--attn-dir", str(att)]) == 0
    capsys.readouterr()
    assert main(["attn-stats", "--dir", str(att), "--threshold", "0.6"]) == 0
    out = dict(line.split("\t") for line in capsys.readouterr().out.splitlines())
    assert set(out) == {"src", "mt", "both", "steps"}
    assert sum(float(out[k]) for k in ("src", "mt", "both")) == pytest.approx(100.0, abs=0.02)
    for suffix in ("svg", "pgm"):
        target = data / f"plot.{suffix}"
        assert main(["attn-plot", "--record", str(att / "000000.attn"), "--out", str(target)]) == 0
        assert target.stat().st_size > 0
    assert main(["attn-stats", "--dir", str(data)]) == 1


@pytest.mark.slow
def test_end_to_end_toy_pipeline(data):
    codes = data / "codes.bpe"
    sides = [str(data / f"train.{s}") for s in ("src", "mt", "pe")]
    assert main(["bpe-learn", "--input", *sides, "--merges", "50", "--output", str(codes)]) == 0
    # the budget is an upper bound: learning stops once no pair occurs twice
    assert 1 < len(codes.read_text(encoding="utf-8").splitlines()) <= 51
    assert main(["train", "--train", str(data / "train"), "--valid", str(data / "train"), "--codes", str(codes),
                 "--out", str(data / "model"), "--seed", "1", "--word-dim", "32", "--enc-hidden", "64",
                 "--dec-hidden", "64", "--enc-layers", "1", "--dec-layers", "1", "--dropout", "0",
                 "--batch-size", "10", "--lr-decay", "1.0", "--epochs", "200"]) == 0
    manifest = json.loads((data / "model" / "model.json").read_text())
    assert manifest["bpe"] == "codes.bpe"
    hyp = data / "train.hyp"
    assert main(["translate", "--model", str(data / "model"), "--src", str(data / "train.src"),
                 "--mt", str(data / "train.mt"), "--output", str(hyp)]) == 0
    assert "@@" not in hyp.read_text(encoding="utf-8")
    result = run("evaluate", "--hyp", str(hyp), "--ref", str(data / "train.pe"), "--metric", "ter")
    assert result.returncode == 0
    assert float(result.stdout.split("\t")[1]) < 5.0
