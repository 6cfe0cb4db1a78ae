import numpy as np
import pytest

from pointgpt_nn.cli import main, resolve_config
from pointgpt_nn.data import load_manifest, write_synthetic_dataset
from pointgpt_nn.errors import ConfigError
from pointgpt_nn.io import read_cloud, write_cloud
from pointgpt_nn.npe import read_feature_records

TINY = ["--set", "model.n_tokens=8", "--set", "model.group_size=8", "--set", "model.d_model=12",
        "--set", "model.n_heads=2", "--set", "model.extractor_depth=1", "--set", "model.generator_depth=1",
        "--set", "model.ffn_dim=16", "--set", "model.embed_hidden=8", "--set", "model.head_hidden=8",
        "--set", "model.npe.initial_dim=12", "--set", "model.npe.stages=1",
        "--set", "model.num_classes=3", "--batch", "4", "--lr", "0.001"]


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    return write_synthetic_dataset(root, train_per_grade=3, val_per_grade=1, n_points=64)


def test_preprocess_three_files(tmp_path, capsys):
    src = tmp_path / "raw"
    for i, grade in enumerate([1, 2, 2]):
        (src / str(grade)).mkdir(parents=True, exist_ok=True)
        write_cloud(src / str(grade) / f"s{i}.xyz", np.random.default_rng(i).normal(size=(50, 3)))
    before = sorted((p, p.read_bytes()) for p in src.rglob("*") if p.is_file())
    assert main(["preprocess", str(src), str(tmp_path / "out"), "--points", "20",
                 "--set", "model.num_classes=2"]) == 0
    m = load_manifest(tmp_path / "out" / "manifest.csv", num_classes=2)
    assert len(m.entries) == 3
    for e in m.entries:
        c = read_cloud(e.path)
        assert len(c) == 20 and np.isclose(np.linalg.norm(c.points, axis=1).max(), 1.0, atol=1e-6)
    assert sorted((p, p.read_bytes()) for p in src.rglob("*") if p.is_file()) == before
    first = (tmp_path / "out" / "1" / "s0.ply").read_bytes()
    assert main(["preprocess", str(src), str(tmp_path / "out"), "--points", "20",
                 "--set", "model.num_classes=2"]) == 0
    assert (tmp_path / "out" / "1" / "s0.ply").read_bytes() == first


def test_preprocess_default_target_is_8192():
    assert resolve_config({}).points == 8192


def test_preprocess_empty_dir(tmp_path, capsys):
    (tmp_path / "raw").mkdir()
    assert main(["preprocess", str(tmp_path / "raw"), str(tmp_path / "out")]) == 3
    assert not (tmp_path / "out" / "manifest.csv").exists()
    assert "error[data]" in capsys.readouterr().err


def test_preprocess_reports_bad_files(tmp_path, capsys):
    (tmp_path / "raw" / "1").mkdir(parents=True)
    (tmp_path / "raw" / "1" / "bad.xyz").write_text("1 2\n")
    write_cloud(tmp_path / "raw" / "1" / "small.xyz", np.zeros((3, 3)))
    assert main(["preprocess", str(tmp_path / "raw"), str(tmp_path / "out"), "--points", "10"]) == 3
    err = capsys.readouterr().err
    assert "bad.xyz" in err and "small.xyz" in err
    assert not (tmp_path / "out" / "manifest.csv").exists()


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["train", "--manifest", "m", "--out", "o", "--alpha", "-1"]) == 2
    assert main(["train", "--manifest", "m", "--out", "o", "--set", "model.width=3"]) == 2
    assert main(["train", "--manifest", "m", "--out", "o", "--config", str(tmp_path / "nope.cfg")]) == 2
    assert "error[config]" in capsys.readouterr().err


def test_runconfig_layers(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nmodel.lam=2.0\ntrain.epochs=5\nseed=3\n")
    args = ["pretrain", "--manifest", "m", "--out", "o", "--config", str(cfg), "--epochs", "7",
            "--fusion-mode", "logits"]
    from pointgpt_nn.cli import build_parser, run_config_from_args
    run = run_config_from_args(build_parser().parse_args(args))
    assert run.model.lam == 2.0 and run.schedule.epochs == 7 and run.seed == 3
    assert run.model.fusion_mode == "logit_interpolation"
    assert run.schedule.base_lr == 1e-4 and run.schedule.batch_size == 32
    with pytest.raises(ConfigError):
        resolve_config({"train.speed": "1"})


def test_train_eval_classify_roundtrip(tmp_path, synth, capsys):
    ck = tmp_path / "m.ckpt"
    for log in ("a.csv", "b.csv"):
        assert main(["train", "--manifest", str(synth), "--out", str(ck), "--log", str(tmp_path / log),
                     "--epochs", "2", *TINY]) == 0
    a, b = (tmp_path / "a.csv").read_bytes(), (tmp_path / "b.csv").read_bytes()
    assert a == b
    text = a.decode()
    assert "# model.d_model=12" in text and "# train.epochs=2" in text
    assert [l for l in text.splitlines() if not l.startswith("#")][0] == "epoch,lr,train_loss,val_oa,val_macc"

    assert main(["eval", "--manifest", str(synth), "--checkpoint", str(ck), "--out", str(tmp_path / "e.csv"),
                 *TINY]) == 0
    assert "split,n,oa,macc" in (tmp_path / "e.csv").read_text()

    cloud = next((synth.parent / "1").glob("*.ply"))
    capsys.readouterr()
    assert main(["classify", "--checkpoint", str(ck), str(cloud)]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 1
    fields = out[0].split(",")
    assert fields[0] == cloud.stem and 1 <= int(fields[1]) <= 3 and len(fields) == 5


def test_eval_single_class_model_scores_one(tmp_path):
    for i in range(3):
        write_cloud(tmp_path / f"c{i}.xyz", np.random.default_rng(i).normal(size=(40, 3)))
    (tmp_path / "m.csv").write_text("path,grade,split\n" + "".join(
        f"c{i}.xyz,1,{'val' if i == 0 else 'train'}\n" for i in range(3)))
    ck = tmp_path / "one.ckpt"
    args = [a if a != "model.num_classes=3" else "model.num_classes=1" for a in TINY]
    assert main(["train", "--manifest", str(tmp_path / "m.csv"), "--out", str(ck), "--epochs", "1", *args]) == 0
    assert main(["eval", "--manifest", str(tmp_path / "m.csv"), "--checkpoint", str(ck),
                 "--out", str(tmp_path / "e.csv")]) == 0
    row = (tmp_path / "e.csv").read_text().strip().splitlines()[-1].split(",")
    assert row[:2] == ["val", "1"] and float(row[2]) == 1.0 and float(row[3]) == 1.0


def test_pretrain_then_finetune_restores(tmp_path, synth):
    pre = tmp_path / "pre.ckpt"
    assert main(["pretrain", "--manifest", str(synth), "--out", str(pre), "--log", str(tmp_path / "p.csv"),
                 "--epochs", "1", "--extra-mask-ratio", "0.2", *TINY]) == 0
    assert "extra_mask_ratio" in (tmp_path / "p.csv").read_text()
    assert main(["train", "--manifest", str(synth), "--out", str(tmp_path / "f.ckpt"), "--pretrained", str(pre),
                 "--epochs", "1", *TINY]) == 0


def test_gridsearch_and_ablations(tmp_path, synth):
    raw, summ = tmp_path / "raw.csv", tmp_path / "sum.csv"
    assert main(["gridsearch", "--manifest", str(synth), "--out", str(raw), "--summary", str(summ),
                 "--alphas", "100,1000", "--betas", "50,100", "--epochs", "1", *TINY]) == 0
    body = [l for l in raw.read_text().splitlines() if not l.startswith("#")]
    assert body[0] == "alpha,beta,oa,macc" and len(body) == 5
    assert len([l for l in summ.read_text().splitlines() if not l.startswith("#")]) == 3
    assert main(["ablate", "stages", "--manifest", str(synth), "--out", str(tmp_path / "s.csv"),
                 "--values", "1,2", "--epochs", "1", *TINY]) == 0
    assert main(["ablate", "fusion", "--manifest", str(synth), "--out", str(tmp_path / "f.csv"),
                 "--epochs", "1", *TINY]) == 0
    assert "4x8x12" in (tmp_path / "f.csv").read_text()


def test_feature_dump(tmp_path, synth):
    out = tmp_path / "f.bin"
    assert main(["features", "--manifest", str(synth), "--out", str(out), *TINY]) == 0
    with open(out, "rb") as fh:
        recs = list(read_feature_records(fh))
    assert len(recs) == 12 and all(r[2].shape == (12,) for r in recs)


def test_missing_checkpoint_is_data_error(tmp_path, capsys):
    assert main(["classify", "--checkpoint", str(tmp_path / "none"), "x.ply"]) == 3
