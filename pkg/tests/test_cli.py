import json

import numpy as np
import pytest
from PIL import Image

from restorender.cli import main


def _cfg(path, **fields):
    path.write_text(json.dumps(fields))
    return str(path)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    scene_cfg = _cfg(root / "scene.json", num_views=10, resolution=[32, 32], layout="sphere-field")
    assert main(["make-scenes", "--out", str(root / "scene"), "--config", scene_cfg, "--seed", "1"]) == 0
    assert main(["corrupt", "--scene", str(root / "scene"), "--kind", "lowlight", "--seed", "2"]) == 0
    train_cfg = _cfg(root / "train.json", steps=3, model="micro", batch_rays=64)
    assert main(["train", "--scene", str(root / "scene"), "--kind", "lowlight,rain", "--out", str(root / "ck"),
                 "--config", train_cfg]) == 0
    return root


def test_make_scenes_and_run_record(work):
    assert (work / "scene" / "poses.json").is_file()
    run = json.loads((work / "scene" / "run.json").read_text())
    assert run["command"] == "make-scenes" and run["status"] == "ok" and run["seed"] == 1
    assert run["resolved"]["scene_config"]["num_views"] == 10


def test_corrupt_is_reproducible(work):
    out = work / "scene-lowlight-s2"
    meta = json.loads((out / "degradation.json").read_text())
    assert meta["kind"] == "lowlight" and meta["seed"] == 2 and len(meta["specs"]) == 10
    assert main(["corrupt", "--scene", str(work / "scene"), "--kind", "lowlight", "--seed", "2",
                 "--out", str(work / "again")]) == 0
    files = sorted(f.relative_to(out) for f in out.rglob("*") if f.is_file() and f.name != "run.json")
    assert files == sorted(f.relative_to(work / "again") for f in (work / "again").rglob("*")
                           if f.is_file() and f.name != "run.json")
    for f in files:
        assert (out / f).read_bytes() == (work / "again" / f).read_bytes(), f


def test_corrupt_composed_kinds(work):
    assert main(["corrupt", "--scene", str(work / "scene"), "--kind", "rain,lowlight", "--out",
                 str(work / "combo")]) == 0
    meta = json.loads((work / "combo" / "degradation.json").read_text())
    assert meta["kind"] == ["rain", "lowlight"]
    assert main(["corrupt", "--scene", str(work / "scene"), "--kind", "rain,rain", "--out", str(work / "x")]) == 1


def test_train_writes_checkpoint_and_log(work):
    for name in ("weights.bin", "latents.json", "config.json", "train_log.jsonl", "run.json"):
        assert (work / "ck" / name).is_file(), name
    assert len((work / "ck" / "train_log.jsonl").read_text().splitlines()) == 3


def _png(path):
    return np.asarray(Image.open(path))


def test_render_and_interp_alpha_one(work):
    common = ["--scene", str(work / "scene-lowlight-s2"), "--checkpoint", str(work / "ck"), "--views", "3"]
    assert main(["render", *common, "--kind", "lowlight", "--out", str(work / "r")]) == 0
    assert main(["interp-render", *common, "--a", "lowlight", "--b", "rain", "--alpha", "1",
                 "--out", str(work / "i")]) == 0
    names = sorted(p.name for p in (work / "r").glob("*.png"))
    assert names == ["0000.png", "0008.png"]
    for n in names:
        assert np.array_equal(_png(work / "r" / n), _png(work / "i" / n))


@pytest.mark.parametrize("argv", [
    ["render", "--kind", "lowlight", "--views", "0"],
    ["render", "--kind", "fog"],
    ["render", "--kind", "lowlight", "--bogus"],
    ["interp-render", "--a", "lowlight", "--b", "rain", "--alpha", "1.5"],
    ["interp-render", "--a", "lowlight", "--b", "snow", "--alpha", "0.5"],
])
def test_usage_errors_exit_one(work, argv):
    argv = argv + ["--scene", str(work / "scene-lowlight-s2"), "--checkpoint", str(work / "ck"),
                   "--out", str(work / "bad")]
    assert main(argv) == 1


def test_missing_inputs_and_no_subcommand(work):
    assert main([]) == 1
    assert main(["render", "--scene", str(work / "nope"), "--checkpoint", str(work / "ck"), "--kind", "lowlight",
                 "--out", str(work / "bad")]) == 1
    assert main(["eval", "--scene", str(work / "scene"), "--checkpoint", str(work / "ck")]) == 1


def test_eval_report(work, capsys):
    assert main(["eval", "--scene", str(work / "scene-lowlight-s2"), "--checkpoint", str(work / "ck"),
                 "--views", "3", "--out", str(work / "ev")]) == 0
    report = json.loads((work / "ev" / "report.json").read_text())
    assert set(report) == {"lowlight"} and report["lowlight"]["n_views"] == 2
    assert "| lowlight |" in capsys.readouterr().out


def test_finetune_new_kind_then_refuses_retrain(work):
    ft = _cfg(work / "ft.json", steps=2, batch_rays=64)
    base = ["finetune", "--scene", str(work / "scene"), "--kind", "snow", "--config", ft]
    assert main([*base, "--checkpoint", str(work / "ck"), "--out", str(work / "ft")]) == 0
    latents = json.loads((work / "ft" / "latents.json").read_text())
    assert "snow" in json.dumps(latents)
    assert main([*base, "--checkpoint", str(work / "ft"), "--out", str(work / "ft2")]) == 1
    override = _cfg(work / "ft_o.json", steps=1, batch_rays=64, override=True)
    assert main(["finetune", "--scene", str(work / "scene"), "--kind", "snow", "--config", override,
                 "--checkpoint", str(work / "ft"), "--out", str(work / "ft3")]) == 0


def test_classify_train_and_predict(work):
    cfg = _cfg(work / "clf.json", channels=[8, 8, 8, 8], patch_size=32, samples_per_kind=8, epochs=1)
    assert main(["classify", "--scene", str(work / "scene"), "--kind", "rain,lowlight", "--config", cfg,
                 "--out", str(work / "clf")]) == 0
    assert main(["classify", "--scene", str(work / "scene-lowlight-s2"), "--checkpoint", str(work / "clf"),
                 "--out", str(work / "pred")]) == 0
    result = json.loads((work / "pred" / "classification.json").read_text())
    assert len(result["views"]) == 10 and result["vote"] in ("rain", "lowlight")
    assert main(["classify", "--scene", str(work / "scene"), "--kind", "rain", "--out", str(work / "c1")]) == 1
