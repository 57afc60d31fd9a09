import json
import shutil

import numpy as np
import pytest

from femurseg import cli, nn, roi
from femurseg.phantom import PhantomParams, generate_dataset, load_manifest
from femurseg.volume import read_volume


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def error_of(err: str) -> dict:
    lines = [l for l in err.splitlines() if l.startswith("{")]
    assert len(lines) == 1
    return json.loads(lines[0])


@pytest.fixture(scope="module")
def small_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_data")
    params = PhantomParams(extents=(32, 32, 32), length_range=(8.0, 10.0), radius_range=(2.0, 2.5),
                           bend=1.0, margin=3.0)
    return generate_dataset(params, 1, 2, root, seed=2)


class TestConfig:
    def test_precedence(self, tmp_path):
        conf = tmp_path / "run.cfg"
        conf.write_text("# comment\ncount = 5\ntest-count = 4\nseed = 9\n")
        cfg = cli.resolve("gen-data", {"config": str(conf), "seed": 1})
        assert cfg["count"] == 5 and cfg["test_count"] == 4 and cfg["seed"] == 1
        assert cfg["extents"] == cli.DEFAULTS["gen-data"]["extents"]

    def test_unknown_key_rejected(self, tmp_path, capsys):
        conf = tmp_path / "run.cfg"
        conf.write_text("count = 2\nlearning_rate = 3\n")
        code, _, err = run(capsys, "gen-data", "--config", conf, "--out", tmp_path / "o")
        assert code == cli.EXIT_CODES["config"]
        assert "learning_rate" in error_of(err)["message"]

    def test_bad_value(self, tmp_path):
        conf = tmp_path / "run.cfg"
        conf.write_text("count = many\n")
        with pytest.raises(cli.ConfigError):
            cli.resolve("gen-data", {"config": str(conf)})

    def test_resolved_config_written(self, tmp_path, capsys):
        code, _, err = run(capsys, "gen-data", "--count", 1, "--test-count", 1, "--out", tmp_path / "d")
        assert code == 0
        assert "resolved config" in err
        saved = json.loads((tmp_path / "d" / "gen-data.config.json").read_text())
        assert saved["count"] == 1 and saved["seed"] == 0


class TestGenData:
    def test_identical_manifests(self, tmp_path, capsys):
        for name in ("a", "b"):
            assert run(capsys, "gen-data", "--seed", 7, "--count", 2, "--test-count", 1,
                       "--out", tmp_path / name)[0] == 0
        assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
        assert len(load_manifest(tmp_path / "a" / "manifest.json")) == 3


class TestErrors:
    def test_missing_checkpoint(self, small_manifest, tmp_path, capsys):
        code, _, err = run(capsys, "infer", "--manifest", small_manifest, "--checkpoint", tmp_path / "none.ck",
                           "--use-gt-roi", "--out", tmp_path)
        assert code == cli.EXIT_CODES["checkpoint_missing"] == 5
        assert error_of(err)["error"] == "checkpoint_missing"

    def test_adversarial_without_checkpoint(self, small_manifest, tmp_path, capsys):
        code, _, err = run(capsys, "finetune-adv", "--manifest", small_manifest, "--out", tmp_path)
        assert code == cli.EXIT_CODES["usage"]

    def test_malformed_manifest(self, tmp_path, capsys):
        bad = tmp_path / "manifest.json"
        bad.write_text('{"not": "a list"}')
        code, _, err = run(capsys, "train-branch", "--manifest", bad, "--out", tmp_path)
        assert code == cli.EXIT_CODES["manifest"] == 4
        assert error_of(err)["exit_code"] == 4
        code, _, _ = run(capsys, "train-branch", "--manifest", tmp_path / "absent.json", "--out", tmp_path)
        assert code == 4

    def test_femur_not_found(self, small_manifest, tmp_path, capsys):
        # an untrained detector predicts background everywhere (output prior 0.05)
        spec = roi.UNet2DSpec()
        P = roi.init_unet2d(spec, np.random.default_rng(0))
        roi.unet2d_forward(P, spec, np.random.default_rng(1).random((2, 1, 16, 16)), train=True)
        nn.save_checkpoint(P, tmp_path / "roi.ck")
        from femurseg.network import BranchNetSpec, init_generator
        G = init_generator(BranchNetSpec(), np.random.default_rng(0))
        nn.save_checkpoint(G, tmp_path / "g.ck")
        code, _, err = run(capsys, "infer", "--manifest", small_manifest, "--checkpoint", tmp_path / "g.ck",
                           "--roi-checkpoint", tmp_path / "roi.ck", "--out", tmp_path / "p")
        assert code == cli.EXIT_CODES["femur_not_found"] == 7
        assert "femur not found" in error_of(err)["message"]

    def test_architecture_mismatch(self, small_manifest, tmp_path, capsys):
        from femurseg.network import BranchNetSpec, init_generator
        G = init_generator(BranchNetSpec(cross_connections=False), np.random.default_rng(0))
        nn.save_checkpoint(G, tmp_path / "g.ck")
        code, _, err = run(capsys, "infer", "--manifest", small_manifest, "--checkpoint", tmp_path / "g.ck",
                           "--use-gt-roi", "--out", tmp_path / "p")
        assert code == cli.EXIT_CODES["architecture_changed"]

    def test_distinct_codes(self):
        codes = [v for k, v in cli.EXIT_CODES.items()]
        assert len(codes) == len(set(codes)) and 0 not in codes

    def test_usage_error(self, capsys):
        assert run(capsys, "no-such-command")[0] == 2


def _gt_predictions(manifest, out_dir):
    out_dir.mkdir()
    for e in load_manifest(manifest):
        if e["split"] != "test":
            continue
        root = manifest.parent
        shutil.copy(root / e["mask"], out_dir / f"{e['id']}_mask.fnv")
        shutil.copy(root / (e["mask"] + ".json"), out_dir / f"{e['id']}_mask.fnv.json")
        gt = read_volume(root / e["mask"])
        box = roi.mask_box(gt.data)
        doc = {"id": e["id"], "roi": {"tight": box.to_dict(), "padded": box.padded(30, gt.extents).to_dict()},
               "landmarks": {"p1": e["p1"], "p2": e["p2"]}}
        (out_dir / f"{e['id']}_endpoints.json").write_text(json.dumps(doc))


class TestEvaluate:
    def test_identity(self, small_manifest, tmp_path, capsys):
        _gt_predictions(small_manifest, tmp_path / "pred")
        code, _, _ = run(capsys, "evaluate", "--manifest", small_manifest, "--predictions", tmp_path / "pred",
                         "--out", tmp_path / "r")
        assert code == 0
        doc = json.loads((tmp_path / "r" / "report.json").read_text())
        agg = doc["aggregates"]
        assert agg["dsc"]["mean"] == 1.0 and agg["jacc"]["mean"] == 1.0
        for k in ("adb_mm", "hdb_mm", "verr_ml", "p1_mm", "p2_mm", "lerr_mm"):
            assert agg[k]["mean"] == 0.0
        assert agg["roi_iou"]["mean"] == 1.0
        assert doc["roi_padded_iou_mean"] == 1.0

    def test_rerun_byte_identical(self, small_manifest, tmp_path, capsys):
        _gt_predictions(small_manifest, tmp_path / "pred")
        for name in ("r1", "r2"):
            run(capsys, "evaluate", "--manifest", small_manifest, "--predictions", tmp_path / "pred",
                "--out", tmp_path / name)
        for f in ("report.json", "cases.csv", "bland_altman_volume.csv"):
            assert (tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes()

    def test_report_table(self, small_manifest, tmp_path, capsys):
        _gt_predictions(small_manifest, tmp_path / "pred")
        run(capsys, "evaluate", "--manifest", small_manifest, "--predictions", tmp_path / "pred",
            "--out", tmp_path / "r")
        code, out, _ = run(capsys, "report", "--report", tmp_path / "r" / "report.json", "--out", tmp_path / "r")
        assert code == 0
        assert "| dsc | 1.0000 | 0.0000 |" in out
        assert (tmp_path / "r" / "report.md").read_text() == out


class TestInfer:
    def test_outputs_written(self, small_manifest, tmp_path, capsys):
        from femurseg.network import BranchNetSpec, forward, init_generator
        spec = BranchNetSpec()
        G = init_generator(spec, np.random.default_rng(0))
        forward(G, spec, np.random.default_rng(1).random((2, 1, 16, 16, 16)), train=True)
        nn.save_checkpoint(G, tmp_path / "g.ck")
        code, _, err = run(capsys, "infer", "--manifest", small_manifest, "--checkpoint", tmp_path / "g.ck",
                           "--use-gt-roi", "--out", tmp_path / "p")
        assert code == 0, err
        ids = json.loads((tmp_path / "p" / "predictions.json").read_text())["cases"]
        assert len(ids) == 2
        for cid in ids:
            mask = read_volume(tmp_path / "p" / f"{cid}_mask.fnv")
            assert mask.extents == (32, 32, 32) and mask.kind == "mask"
            assert read_volume(tmp_path / "p" / f"{cid}_h2.fnv").kind == "heatmap"
            doc = json.loads((tmp_path / "p" / f"{cid}_endpoints.json").read_text())
            assert len(doc["landmarks"]["p1"]) == 3 and "length_mm" in doc["landmarks"]
