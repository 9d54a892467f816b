import json

import pytest

from solidrec.cli import main, parse_rows
from solidrec.config import ConfigError

TINY = """
data.users = 40
data.items = 30
data.semantics = 3
data.seq_len = 4
data.k_train = 2
data.k_valid = 5
data.k_test = 9
backbone.embed_dim = 8
backbone.mlp_layers = 1
backbone.mlp_hidden = 8
backbone.dynamic_layer_specs = 8x4
generator.z_dim = 6
generator.hidden_dim = 10
train.epochs = 2
train.batch_size = 64
train.lr = 0.01
eval.ks = 3,5
eval.perturbations = 2
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return str(p)


def _tsv(path):
    return path.read_text()


def test_train_then_eval_reproduces_the_test_report(cfg_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", cfg_file, "--output", str(out)]) == 0
    for name in ("run_log.tsv", "test_report.json", "config.txt", "manifest.json", "codebook_usage.tsv"):
        assert (out / name).exists(), name
    assert (out / "run_log.tsv").read_text().startswith("stage\tepoch\ttrain_loss\tvalid_auc\n")
    assert main(["eval", "--checkpoint", str(out / "checkpoint"), "--output", str(out)]) == 0
    a = json.loads((out / "test_report.json").read_text())
    b = json.loads((out / "eval_report.json").read_text())
    assert a == b


@pytest.mark.parametrize("row,flags", [("111", []), ("110", ["--set", "model.scl=false"])])
def test_single_row_ablation_matches_train(cfg_file, tmp_path, row, flags):
    assert main(["train", "--config", cfg_file, "--output", str(tmp_path / "t"), *flags]) == 0
    assert main(["ablate", "--config", cfg_file, "--output", str(tmp_path / "a"), "--rows", row]) == 0
    name = "spg1_sml1_scl" + row[2]
    got = tmp_path / "a" / "modules" / name
    for f in ("test_report.json", "test_report.tsv", "run_log.tsv"):
        assert (got / f).read_bytes() == (tmp_path / "t" / f).read_bytes(), f
    table = (tmp_path / "a" / "ablation_modules.tsv").read_text().splitlines()
    assert table[0].startswith("spg\tsml\tscl\tauc") and table[1].startswith("\t".join(row) + "\t")


def test_grid_cell_matches_train(cfg_file, tmp_path):
    assert main(["grid", "--config", cfg_file, "--output", str(tmp_path / "g"), "--lams", "0.5", "--Ts", "0.02"]) == 0
    assert main(["train", "--config", cfg_file, "--output", str(tmp_path / "t"), "--set", "train.lam=0.5", "--set", "train.T=0.02"]) == 0
    cell = tmp_path / "g" / "lam0.5_T0.02"
    assert (cell / "test_report.json").read_bytes() == (tmp_path / "t" / "test_report.json").read_bytes()
    assert len((tmp_path / "g" / "grid.tsv").read_text().splitlines()) == 2


def test_data_files_pipeline(cfg_file, tmp_path):
    syn = tmp_path / "syn"
    assert main(["gen-synthetic", "--config", cfg_file, "--output", str(syn)]) == 0
    real = [
        "--set", "data.synthetic=false",
        "--set", f"data.path={syn / 'interactions.csv'}",
        "--set", f"data.modalities_dir={syn / 'modalities'}",
    ]
    assert main(["build-data", "--config", cfg_file, "--output", str(tmp_path / "ds"), *real]) == 0
    assert (tmp_path / "ds" / "manifest.json").exists()
    assert main(["train", "--config", cfg_file, "--output", str(tmp_path / "t"), *real]) == 0
    ck = tmp_path / "t" / "checkpoint"
    assert main(["eval", "--checkpoint", str(ck), "--dataset", str(tmp_path / "ds"), "--output", str(tmp_path / "e")]) == 0
    assert main(["stability", "--checkpoint", f"solid={ck}", "--dataset", str(tmp_path / "ds"), "--output", str(tmp_path / "s")]) == 0
    lines = (tmp_path / "s" / "stability.tsv").read_text().splitlines()
    assert len(lines) == 2 and lines[1].startswith("solid\t")


def test_output_root_from_environment(cfg_file, tmp_path, monkeypatch):
    monkeypatch.setenv("SOLIDREC_OUT", str(tmp_path / "root"))
    assert main(["gen-synthetic", "--config", cfg_file]) == 0
    assert (tmp_path / "root" / "synthetic" / "interactions.csv").exists()


@pytest.mark.parametrize(
    "argv,code",
    [
        (["train", "--set", "train.lr=fast"], 2),
        (["train", "--set", "model.spg=false", "--set", "model.sml=true"], 2),
        (["ablate", "--rows", "011"], 2),
        (["train", "--set", "data.synthetic=false", "--set", "data.path=/nope.csv"], 3),
        (["train", "--set", "data.synthetic=false"], 3),
        (["eval", "--checkpoint", "/nope"], 3),
        (["train", "--set", "train.lr=1e30", "--set", "train.batch_size=8"], 4),
    ],
)
def test_exit_codes(cfg_file, tmp_path, argv, code):
    assert main(argv + ["--config", cfg_file, "--output", str(tmp_path / "o")]) == code


def test_parse_rows():
    assert [v.name for v in parse_rows("000, 111")] == ["spg0_sml0_scl0", "spg1_sml1_scl1"]
    with pytest.raises(ConfigError):
        parse_rows("12")
