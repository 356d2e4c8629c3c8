import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from promptcount.cli import jet, main, render_overlay, run_eval
from promptcount.config import stub_config
from promptcount.data import make_toy_dataset, read_density
from promptcount.engine import read_checkpoint, resized_shape


def _write_config(path, root, out, **train):
    settings = {"stage1_epochs": 1, "stage2_epochs": 2, "batch_size": 2, "lr_decay_epoch": 1}
    settings.update(train)
    cfg = stub_config(train=settings, data={"root": None if root is None else str(root), "val_split": None},
                      output_dir=str(out))
    path.write_text(json.dumps(cfg.to_dict()))
    return path


def _digest(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(Path(root).rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One short training run shared by the eval/predict tests."""
    base = tmp_path_factory.mktemp("trained")
    root = make_toy_dataset(base / "toy", n_images=4)
    config = _write_config(base / "c.json", root, base / "run")
    assert main(["train", "--config", str(config)]) == 0
    return {"root": root, "config": config, "out": base / "run", "ckpt": base / "run" / "final.ckpt"}


# -- train ----------------------------------------------------------------------


def test_train_smoke(trained, capsys):
    out = trained["out"]
    for name in ("final.ckpt", "last.ckpt", "stage1.ckpt", "stage2.ckpt", "loss_log.csv", "resolved_config.json"):
        assert (out / name).is_file(), name
    rows = list(csv.DictReader((out / "loss_log.csv").open()))
    assert list(rows[0]) == ["epoch", "stage", "loss", "lr"] and len(rows) == 3
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["data"]["root"] == str(trained["root"])
    assert read_checkpoint(trained["ckpt"])[0]["stage"] == 3


def test_missing_dataset_names_the_key(tmp_path, capsys):
    config = _write_config(tmp_path / "c.json", tmp_path / "nowhere", tmp_path / "run")
    assert main(["train", "--config", str(config)]) == 3
    assert "data.root" in capsys.readouterr().err
    config = _write_config(tmp_path / "c.json", None, tmp_path / "run")
    assert main(["train", "--config", str(config)]) == 3


def test_config_errors_exit_2(tmp_path, capsys):
    config = _write_config(tmp_path / "c.json", tmp_path, tmp_path / "run")
    assert main(["train", "--config", str(config), "--set", "train.bogus=1"]) == 2
    assert "train.bogus" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "absent.json")]) == 2


def test_resume_mid_stage_two_matches_uninterrupted(toy_root, tmp_path):
    straight = _write_config(tmp_path / "a.json", toy_root, tmp_path / "a", stage2_epochs=3, lr_decay_epoch=2)
    split = _write_config(tmp_path / "b.json", toy_root, tmp_path / "b", stage2_epochs=3, lr_decay_epoch=2)
    assert main(["train", "--config", str(straight)]) == 0
    assert main(["train", "--config", str(split), "--max-epochs", "3"]) == 0
    manifest, _ = read_checkpoint(tmp_path / "b" / "last.ckpt")
    assert (manifest["stage"], manifest["epoch"]) == (2, 2)
    assert not (tmp_path / "b" / "final.ckpt").exists()
    assert main(["train", "--config", str(split), "--resume", str(tmp_path / "b" / "last.ckpt")]) == 0
    _, a = read_checkpoint(tmp_path / "a" / "final.ckpt")
    _, b = read_checkpoint(tmp_path / "b" / "final.ckpt")
    params = [k for k in a if k.startswith("param/")]
    assert params and all(np.array_equal(a[k], b[k]) for k in params)
    log_a = (tmp_path / "a" / "loss_log.csv").read_text()
    assert log_a == (tmp_path / "b" / "loss_log.csv").read_text()


def test_resume_under_other_config_exits_4(trained, tmp_path):
    config = _write_config(tmp_path / "c.json", trained["root"], tmp_path / "run", seed=5)
    assert main(["train", "--config", str(config), "--resume", str(trained["ckpt"])]) == 4


def test_runs_are_byte_identical(toy_root, tmp_path, monkeypatch):
    artifacts = []
    for name in ("one", "two"):
        work = tmp_path / name
        work.mkdir()
        monkeypatch.chdir(work)
        config = _write_config(work / "c.json", toy_root, "run")
        assert main(["train", "--config", str(config)]) == 0
        assert main(["predict", "--ckpt", "run/final.ckpt", "--image", str(toy_root / "images" / "toy_01.png"),
                     "--prompt", "circle", "--out", "pred"]) == 0
        artifacts.append(_digest(work / "run") | _digest(work / "pred"))
    assert artifacts[0] == artifacts[1]


# -- eval -------------------------------------------------------------------------


def test_eval_writes_json_and_csv(trained, tmp_path, capsys):
    before = _digest(trained["root"]), trained["ckpt"].read_bytes()
    out = tmp_path / "ev"
    assert main(["eval", "--config", str(trained["config"]), "--ckpt", str(trained["ckpt"]), "--split", "test",
                 "--out", str(out)]) == 0
    report = json.loads((out / "eval_test.json").read_text())
    assert set(report) == {"MAE", "RMSE", "N_I"} and report["N_I"] == 4
    assert report["RMSE"] >= report["MAE"] >= 0
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1]) == report
    rows = list(csv.DictReader((out / "eval_test.csv").open()))
    assert len(rows) == 4 and list(rows[0]) == ["image", "class", "pred", "gt"]
    mae = np.mean([abs(float(r["pred"]) - float(r["gt"])) for r in rows])
    assert abs(mae - report["MAE"]) < 1e-9
    assert (_digest(trained["root"]), trained["ckpt"].read_bytes()) == before


def _fixture_predictors(tmp_path):
    root = make_toy_dataset(tmp_path / "two", n_images=2)
    cfg = stub_config(data={"root": str(root)})
    truth = {f"toy_{i:02d}.png": i + 1 for i in range(2)}  # make_toy_dataset puts i+1 objects in image i
    records = {}
    from promptcount.data import load_dataset, load_image

    for rec in load_dataset(root, "test"):
        assert rec.count == truth[Path(rec.image_path).name]
        records[load_image(rec.image_path).tobytes()] = rec.count
    return cfg, lambda img, prompt: float(records[np.asarray(img).tobytes()])


def test_eval_fixture_perfect_and_known_errors(tmp_path):
    cfg, oracle = _fixture_predictors(tmp_path)
    run_eval(cfg, oracle, "test", tmp_path / "perfect")
    assert json.loads((tmp_path / "perfect" / "eval_test.json").read_text()) == {"MAE": 0.0, "RMSE": 0.0, "N_I": 2}
    run_eval(cfg, lambda img, p: oracle(img, p) + 1.0, "test", tmp_path / "off")
    assert json.loads((tmp_path / "off" / "eval_test.json").read_text()) == {"MAE": 1.0, "RMSE": 1.0, "N_I": 2}


def test_eval_incompatible_checkpoint_exits_4(trained, tmp_path):
    other = _write_config(tmp_path / "c.json", trained["root"], tmp_path / "run")
    raw = json.loads(other.read_text())
    raw["decoder"]["channel_schedule"] = [64, 16, 8, 4, 2]
    other.write_text(json.dumps(raw))
    args = ["eval", "--config", str(other), "--ckpt", str(trained["ckpt"]), "--split", "test"]
    assert main(args) == 4
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert main(["eval", "--config", str(trained["config"]), "--ckpt", str(bad), "--split", "test"]) == 4


# -- predict ------------------------------------------------------------------------


def _predict(trained, image, prompt, out, capsys):
    code = main(["predict", "--ckpt", str(trained["ckpt"]), "--image", str(image), "--prompt", prompt,
                 "--out", str(out)])
    return code, capsys.readouterr().out.strip()


def test_predict_blank_image(trained, tmp_path, capsys):
    image = tmp_path / "blank.png"
    Image.fromarray(np.zeros((64, 64, 3), np.uint8)).save(image)
    code, printed = _predict(trained, image, "anything", tmp_path / "p", capsys)
    count = float(printed)
    assert code == 0 and math.isfinite(count) and count >= 0
    density = read_density(tmp_path / "p" / "density.dens")
    assert abs(density.sum() - count) < 1e-3


def test_predict_depends_on_prompt(trained, tmp_path, capsys):
    image = trained["root"] / "images" / "toy_03.png"
    _predict(trained, image, "apple", tmp_path / "a", capsys)
    _predict(trained, image, "banana", tmp_path / "b", capsys)
    assert (tmp_path / "a" / "density.dens").read_bytes() != (tmp_path / "b" / "density.dens").read_bytes()


def test_overlay_has_resized_size(trained, tmp_path, capsys):
    image = tmp_path / "wide.png"
    Image.fromarray(np.full((224, 352, 3), 40, np.uint8)).save(image)
    code, _ = _predict(trained, image, "circle", tmp_path / "p", capsys)
    h, w = resized_shape(224, 352, 64)
    assert code == 0 and (h, w) == (64, 101)
    with Image.open(tmp_path / "p" / "overlay.png") as im:
        assert im.size == (w, h)
    assert read_density(tmp_path / "p" / "density.dens").shape == (h, w)


def test_unreadable_image_exits_3(trained, tmp_path, capsys):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not an image")
    assert _predict(trained, bad, "circle", tmp_path / "p", capsys)[0] == 3
    assert _predict(trained, tmp_path / "missing.png", "circle", tmp_path / "p", capsys)[0] == 3
    assert _predict(trained, trained["root"] / "images" / "toy_00.png", " ", tmp_path / "p", capsys)[0] == 3


def test_render_overlay():
    image = np.random.default_rng(0).random((5, 6, 3))
    assert np.array_equal(render_overlay(image, np.zeros((5, 6))), (image * 255).round().astype(np.uint8))
    np.testing.assert_allclose(jet(np.array([0.0, 0.5, 1.0])), [[0, 0, 0.5], [0.5, 1, 0.5], [0.5, 0, 0]])
    density = np.zeros((5, 6))
    density[2, 3] = 4.0
    out = render_overlay(np.zeros((5, 6, 3)), density)
    assert tuple(out[2, 3]) == (64, 0, 0) and tuple(out[0, 0]) == (0, 0, 64)


# -- prepare-data -------------------------------------------------------------------


def _fsc_fixture(root):
    (root / "images_384_VarV2").mkdir(parents=True)
    for name in ("2.jpg", "7.jpg", "9.jpg"):
        Image.fromarray(np.zeros((16, 20, 3), np.uint8)).save(root / "images_384_VarV2" / name)
    ann = {"2.jpg": {"points": [[1, 1], [5.5, 3]]}, "7.jpg": {"points": [[10, 10]]}, "9.jpg": {"points": []}}
    (root / "annotation_FSC147_384.json").write_text(json.dumps(ann))
    (root / "Train_Test_Val_FSC_147.json").write_text(json.dumps({"train": ["7.jpg", "2.jpg"], "val": [],
                                                                   "test": ["9.jpg"]}))
    (root / "ImageClasses_FSC147.txt").write_text("2.jpg\tapples\n7.jpg\tapples\n9.jpg\tbirds\n")
    return root


GOLDEN_ANNOTATIONS = {
    "2.jpg": {"class": "apples", "image": "images_384_VarV2/2.jpg", "points": [[1, 1], [5.5, 3]]},
    "7.jpg": {"class": "apples", "image": "images_384_VarV2/7.jpg", "points": [[10, 10]]},
    "9.jpg": {"class": "birds", "image": "images_384_VarV2/9.jpg", "points": []},
}
GOLDEN_SPLITS = {"train": ["2.jpg", "7.jpg"], "val": [], "test": ["9.jpg"]}


def test_prepare_fsc147_matches_golden_and_is_idempotent(tmp_path, capsys):
    root = _fsc_fixture(tmp_path / "fsc")
    assert main(["prepare-data", "--layout", "fsc147", "--root", str(root)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report == {"counts": {"train": 2, "val": 0, "test": 1}, "classes_disjoint": True,
                      "classes": {"train": 1, "val": 0, "test": 1}}
    assert json.loads((root / "annotations.json").read_text()) == GOLDEN_ANNOTATIONS
    assert json.loads((root / "splits.json").read_text()) == GOLDEN_SPLITS
    first = _digest(root)
    assert main(["prepare-data", "--layout", "fsc147", "--root", str(root)]) == 0
    assert _digest(root) == first


def test_prepare_with_density_cache(tmp_path, capsys):
    root = _fsc_fixture(tmp_path / "fsc")
    assert main(["prepare-data", "--layout", "fsc147", "--root", str(root), "--density-cache"]) == 0
    ann = json.loads((root / "annotations.json").read_text())
    assert abs(read_density(root / ann["2.jpg"]["density"]).sum() - 2) < 1e-5
    assert read_density(root / ann["9.jpg"]["density"]).shape == (16, 20)


def test_prepare_carpk(tmp_path, capsys):
    root = tmp_path / "carpk"
    (root / "Images").mkdir(parents=True)
    (root / "ImageSets").mkdir()
    (root / "Annotations").mkdir()
    for split, stem in (("train", "a"), ("test", "b")):
        Image.fromarray(np.zeros((20, 20, 3), np.uint8)).save(root / "Images" / f"{stem}.png")
        (root / "ImageSets" / f"{split}.txt").write_text(stem + "\n")
        (root / "Annotations" / f"{stem}.txt").write_text("0 0 4 4 1\n")
    out = tmp_path / "index"
    assert main(["prepare-data", "--layout", "carpk", "--root", str(root), "--out", str(out)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["counts"] == {"train": 1, "test": 1} and report["classes_disjoint"] is False
    assert json.loads((out / "annotations.json").read_text())["test/b.png"]["points"] == [[2.0, 2.0]]


def test_prepare_rejects_unknown_layout(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["prepare-data", "--layout", "coco", "--root", str(tmp_path)])
    assert exc.value.code != 0
    assert main(["prepare-data", "--layout", "fsc147", "--root", str(tmp_path / "nope")]) == 3
    assert main(["prepare-data", "--layout", "fsc147", "--root", str(tmp_path)]) == 3


def test_make_toy(tmp_path, capsys):
    assert main(["make-toy", "--root", str(tmp_path / "t"), "--n", "3"]) == 0
    assert len(list((tmp_path / "t" / "images").glob("*.png"))) == 3
