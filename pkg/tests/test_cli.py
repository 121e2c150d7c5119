import json
from pathlib import Path

import pytest

from mmpoint.cli import main
from mmpoint.dataset import DatasetHandle

from .fake_source import data_dir, write_archive

CONFIG = str(data_dir / "run-config.json")


@pytest.fixture(scope="module")
def generated(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("cli") / "data"
    args = ["gen-data", "--classes", "2", "--per-class", "3", "--points", "64", "--res", "32"]
    assert main([*args, "--seed", "1", "--out", str(out)]) == 0
    return out


def test_gen_data(generated: Path):
    handle = DatasetHandle(generated)
    assert handle.manifest.counts == {"train": 4, "test": 2}
    assert handle.manifest.seed == 1


def test_pretrain_eval_export(tmp_path: Path, generated: Path, capsys):
    run = tmp_path / "run"
    assert main(["pretrain", "--config", CONFIG, "--data", str(generated), "--out", str(run)]) == 0
    assert capsys.readouterr().out.strip() == str(run / "final.ckpt")

    assert main(["eval", "probe", "--ckpt", str(run), "--data", str(generated), "--baseline"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("linear-probe: ")
    assert lines[1].startswith("linear-probe (untrained): ")

    fewshot = ["--n-way", "2", "--k-shot", "1", "--n-query", "1", "--runs", "2"]
    assert main(["eval", "fewshot", "--ckpt", str(run), "--data", str(generated), *fewshot]) == 0
    assert capsys.readouterr().out.startswith("2-way 1-shot: ")

    emb = tmp_path / "emb.csv"
    assert main(["export", "--ckpt", str(run), "--data", str(generated), "--out", str(emb)]) == 0
    assert len(emb.read_text().splitlines()) == 6


def test_fewshot_grid(tmp_path: Path, generated: Path, capsys):
    run = tmp_path / "run"
    assert main(["pretrain", "--config", CONFIG, "--data", str(generated), "--out", str(run)]) == 0
    capsys.readouterr()

    base = ["eval", "fewshot", "--ckpt", str(run), "--data", str(generated), "--grid"]
    layout = ["--ways", "2", "--shots", "1,2", "--n-query", "1", "--runs", "2"]
    assert main([*base, *layout]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [line.split(":")[0] for line in lines] == ["2-way 1-shot", "2-way 2-shot"]

    assert main([*base, "--ways", "3", "--n-query", "1"]) == 1

    with pytest.raises(SystemExit) as exc:
        main([*base, "--shots", "one"])
    assert exc.value.code == 2


def test_ablate(tmp_path: Path, generated: Path, capsys):
    args = ["ablate", "--axis", "views", "--values", "1", "--config", CONFIG]
    assert main([*args, "--data", str(generated), "--out", str(tmp_path)]) == 0
    assert capsys.readouterr().out.startswith("views")
    assert (tmp_path / "ablation-views.csv").exists()


def test_ingest(tmp_path: Path):
    archive = write_archive(tmp_path / "modelnet.h5", clouds=6, points=300, classes=3)
    args = ["ingest", "--hdf5", str(archive), "--points", "128", "--res", "32"]
    assert main([*args, "--out", str(tmp_path / "data")]) == 0
    assert DatasetHandle(tmp_path / "data").manifest.counts == {"train": 3, "test": 3}


def test_bad_config_exits_one(tmp_path: Path, generated: Path, caplog):
    config = json.loads(Path(CONFIG).read_text())
    config["proj"]["d_cross"] = [32, 24]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(config))
    argv = ["pretrain", "--config", str(path), "--data", str(generated), "--out", str(tmp_path)]
    assert main(argv) == 1
    assert "non-monotone" in caplog.text


def test_missing_dataset_exits_one(tmp_path: Path):
    args = ["eval", "probe", "--ckpt", str(tmp_path), "--data", str(tmp_path / "nowhere")]
    assert main(args) == 1


def test_pretrain_without_data_is_usage_error(tmp_path: Path):
    with pytest.raises(SystemExit) as exc:
        main(["pretrain", "--out", str(tmp_path)])
    assert exc.value.code == 2


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["gen-data"],
        ["gen-data", "--res", "48", "--out", "x"],
        ["eval", "probe", "--data", "x"],
        ["ablate", "--axis", "depth", "--data", "x"],
    ],
)
def test_usage_errors(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2
