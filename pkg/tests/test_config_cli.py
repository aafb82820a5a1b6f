import os
from pathlib import Path

import pytest

from irrcurr.cli import main
from irrcurr.config import load_config, parse_config
from irrcurr.errors import ConfigError

ROOT = Path(__file__).resolve().parents[1]
TOY = ROOT / "configs" / "toy.yaml"

BASE = """\
seed: 3
corpus:
  generate: {n_domains: 2, tokens_per_domain: 4000}
  context_len: 16
proxy:
  model: {n_layers: 1, d_model: 8, n_heads: 2}
  train: {total_steps: 20, early_ckpt_step: 5}
main:
  model: {n_layers: 1, d_model: 16, n_heads: 2}
  train: {total_steps: 20, early_ckpt_step: 5}
curriculum:
  lambda0: 0.5
  t_c: 10
"""


def test_parse_defaults_and_inheritance():
    cfg = parse_config(BASE)
    assert cfg.seed == 3
    assert cfg.proxy_train.seed == cfg.main_train.seed == cfg.curriculum.seed == 3
    assert cfg.proxy_model.context_len == 16
    assert cfg.proxy_train.late_ckpt_interval == 1
    assert [n for n, _ in cfg.runs()] == ["curriculum"]
    assert parse_config(BASE, seed=9).curriculum.seed == 9


def test_run_names_with_several_scopes():
    text = BASE + "  modes: [curriculum, uniform]\n  scopes: [per-domain, global]\n"
    runs = parse_config(text).runs()
    assert [n for n, _ in runs] == ["per-domain-curriculum", "per-domain-uniform", "global-curriculum", "global-uniform"]
    assert runs[2][1].scope == "global" and runs[2][1].mode == "curriculum"


def test_digest_ignores_output_location():
    assert parse_config(BASE, out="a").digest() == parse_config(BASE, out="b").digest()
    assert parse_config(BASE).digest() != parse_config(BASE, seed=4).digest()


@pytest.mark.parametrize("edit,line,needle", [
    (("  t_c: 10", "  t_c: 10\n  speed: 3"), 14, "unknown key curriculum.speed"),
    (("  context_len: 16", "  context_len: 16\n  colour: red"), 5, "unknown key corpus.colour"),
    (("seed: 3", "seed: 3\nextra: 1"), 2, "unknown top-level key"),
    (("seed: 3", "seed: three"), 1, "seed must be int"),
    (("  t_c: 10", "  t_c: 10\n  t_c: 11"), 14, "duplicate key"),
    (("{n_layers: 1, d_model: 16", "{n_layers: 1, d_model: 4"), 0, "smaller than the main"),
    (("early_ckpt_step: 5}\nmain", "early_ckpt_step: 50}\nmain"), 7, "early_ckpt_step"),
])
def test_errors_name_the_line(edit, line, needle):
    text = BASE.replace(*edit)
    assert text != BASE
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    msg = str(info.value)
    assert needle in msg
    if line:
        assert f"line {line}:" in msg


def test_missing_seed_and_corpus_source(tmp_path):
    with pytest.raises(ConfigError, match="seed"):
        parse_config(BASE.replace("seed: 3\n", ""))
    assert parse_config(BASE.replace("seed: 3\n", ""), seed=1).seed == 1
    with pytest.raises(ConfigError, match="exactly one"):
        parse_config(BASE.replace("  generate: {n_domains: 2, tokens_per_domain: 4000}\n", ""))
    with pytest.raises(ConfigError, match="does not exist"):
        parse_config(BASE.replace("generate: {n_domains: 2, tokens_per_domain: 4000}", "path: nowhere.tsv"),
                     base_dir=str(tmp_path))
    with pytest.raises(ConfigError, match=r"^line \d+: "):
        parse_config("seed: [1,\n")


def test_load_config_prefixes_path(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(BASE.replace("t_c: 10", "t_c: 0"))
    with pytest.raises(ConfigError) as info:
        load_config(p)
    assert str(info.value).startswith(str(p))


def test_cli_reports_missing_upstream(tmp_path, capsys):
    assert main(["score", "--config", str(TOY), "--out", str(tmp_path / "o"), "-q"]) == 1
    assert "run train-proxy first" in capsys.readouterr().err


def test_cli_bad_config_and_conflicting_stage(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(BASE.replace("t_c: 10", "t_c: -1"))
    assert main(["--config", str(bad), "--out", str(tmp_path / "o"), "-q"]) == 1
    assert "ConfigError" in capsys.readouterr().err
    assert main(["ingest", "--stage", "score", "--config", str(TOY), "--out", str(tmp_path)]) == 2


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    assert main(["--config", str(TOY), "--out", str(out), "-q"]) == 0
    return out


def test_full_toy_run_writes_every_artifact(toy_run):
    expected = [
        "corpus/manifest.csv", "corpus/train.npy", "proxy/early.ckpt", "proxy/late-3.ckpt", "proxy/val_log.csv",
        "scores/learnability.csv", "main/curriculum/final.ckpt", "main/uniform/sharpness.csv",
        "main/anti-curriculum/probe_final.csv", "analysis/comparison.csv", "analysis/flops.csv",
        "analysis/quartiles.csv", "analysis/summary.txt", "analyze.stamp.json",
    ]
    for rel in expected:
        assert (toy_run / rel).exists(), rel
    head = (toy_run / "scores/learnability.csv").read_text().splitlines()
    assert head[0].startswith("# checkpoint_steps: 20 50 55 60")
    val = (toy_run / "main/uniform/val_log.csv").read_text().splitlines()
    assert "step,domain,val_log_ppl" in val and any(",avg," in line for line in val)


def test_rerun_is_skipped_and_force_recomputes(toy_run, caplog):
    before = {p: p.stat().st_mtime_ns for p in toy_run.rglob("*") if p.is_file()}
    with caplog.at_level("INFO", logger="irrcurr"):
        assert main(["--config", str(TOY), "--out", str(toy_run)]) == 0
    assert "analyze: up to date" in caplog.text
    assert {p: p.stat().st_mtime_ns for p in toy_run.rglob("*") if p.is_file()} == before
    score = toy_run / "scores/learnability.csv"
    data = score.read_bytes()
    assert main(["score", "--config", str(TOY), "--out", str(toy_run), "--force", "-q"]) == 0
    assert score.stat().st_mtime_ns != before[score] and score.read_bytes() == data


def test_pipeline_is_deterministic(toy_run, tmp_path):
    out = tmp_path / "again"
    assert main(["--config", str(TOY), "--out", str(out), "-q"]) == 0
    for rel in ("corpus/manifest.csv", "corpus/train.npy", "scores/learnability.csv",
                "main/curriculum/val_log.csv", "main/uniform/sharpness.csv", "analysis/comparison.csv"):
        assert (out / rel).read_bytes() == (toy_run / rel).read_bytes(), rel


def test_seed_override_changes_split(toy_run, tmp_path):
    out = tmp_path / "s1"
    assert main(["ingest", "--config", str(TOY), "--out", str(out), "--seed", "1", "-q"]) == 0
    assert (out / "corpus/manifest.csv").read_bytes() != (toy_run / "corpus/manifest.csv").read_bytes()
    assert os.path.exists(out / "ingest.stamp.json")
