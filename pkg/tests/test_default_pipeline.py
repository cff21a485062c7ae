"""Integration run: the documented pipeline on stock defaults.

Nothing overridden except the run directory: default world (400 train
clips, 5000 unpaired sentences), default dims (hidden size 256, learned
500-wide embedding), default schedules. The pipeline must finish with exit
code 0 and emit a BLEU report in under ten minutes.
"""

import json
import logging
import time

from capfuse.cli import run

logging.getLogger("capfuse").setLevel(logging.WARNING)


def test_default_pipeline_under_ten_minutes(tmp_path, capsys):
    out = tmp_path / "run"
    data = out / "data"
    started = time.monotonic()
    assert run(["gen-data", "--out", str(out)]) == 0
    assert run(["train-lm", "--data", str(data), "--out", str(out)]) == 0
    assert run([
        "train-captioner", "--data", str(data), "--out", str(out),
        "--lm", str(out / "lm.ckpt"), "--fusion", "deep",
    ]) == 0
    assert run([
        "decode", "--data", str(data), "--out", str(out),
        "--ckpt", str(out / "captioner.ckpt"), "--split", "test",
    ]) == 0
    assert run([
        "eval", "--out", str(out),
        "--candidates", str(out / "captions_test.tsv"),
        "--references", str(data / "test.tsv"),
    ]) == 0
    elapsed = time.monotonic() - started
    assert "BLEU@4" in capsys.readouterr().out
    report = json.loads((out / "bleu.json").read_text())
    assert 0.0 <= report["bleu4"] <= 1.0
    assert elapsed < 600.0, f"default pipeline took {elapsed:.0f}s"
    print(f"\ndefault pipeline completed in {elapsed:.0f}s, BLEU@4 {report['bleu4']:.4f}")
