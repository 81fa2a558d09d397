import os

import numpy as np
import pytest

from madet import cli, dataset, detection, imageio

TINY_NET = [
    "--set", "network.input_side=17",
    "--set", "network.conv_maps=4,4",
    "--set", "network.conv_filters=5,3",
    "--set", "network.conv_strides=2,1",
    "--set", "network.pool_extents=3,1",
    "--set", "network.pool_strides=2,1",
    "--set", "network.fc_units=8",
    "--set", "network.drop_profile=0,0.1,0.1,0.2",
    "--set", "foveation.r0=4",
]


def run(*args):
    return cli.main(list(args))


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    rc = run("synth", "--n", "4", "--out", str(out), "--seed", "3",
             "--set", "synth.image_size=128", "--set", "synth.ma_count=8",
             "--set", "synth.vessel_count=4")
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    rc = run("train", "--manifest", str(corpus / "manifest.txt"),
             "--out", str(out), "--seed", "1", *TINY_NET,
             "--set", "train.batches=40", "--set", "train.eval_interval=20",
             "--set", "optimizer.batch_size=16")
    assert rc == 0
    return out


class TestSynth:
    def test_manifest_lines_equal_n(self, corpus):
        lines = (corpus / "manifest.txt").read_text().splitlines()
        assert len(lines) == 4

    def test_rerun_is_byte_identical(self, corpus, tmp_path):
        rc = run("synth", "--n", "4", "--out", str(tmp_path), "--seed", "3",
                 "--set", "synth.image_size=128", "--set", "synth.ma_count=8",
                 "--set", "synth.vessel_count=4")
        assert rc == 0
        for name in sorted(os.listdir(corpus)):
            assert (tmp_path / name).read_bytes() == (corpus / name).read_bytes()

    def test_zero_images_empty_manifest(self, tmp_path):
        rc = run("synth", "--n", "0", "--out", str(tmp_path))
        assert rc == 0
        assert (tmp_path / "manifest.txt").read_text() == ""

    def test_corpus_loads_back(self, corpus):
        images = dataset.load_corpus(corpus / "manifest.txt")
        assert len(images) == 4
        assert all(img.labels.any() for img in images)


class TestTrain:
    def test_log_is_csv_with_contracted_header(self, trained):
        lines = (trained / "train_log.csv").read_text().splitlines()
        assert lines[0] == "batch,t,loss,lr,momentum"
        assert len(lines) == 41
        batch, t, loss, lr, mom = lines[1].split(",")
        assert int(batch) == 1 and int(t) == 0
        float(loss), float(lr), float(mom)

    def test_checkpoint_written(self, trained):
        assert (trained / "checkpoint.madnn").stat().st_size > 0

    def test_val_log_written(self, trained):
        lines = (trained / "val_log.csv").read_text().splitlines()
        assert lines[0] == "batch,se,sp"
        assert len(lines) >= 2

    def test_same_seed_identical_outputs(self, corpus, tmp_path_factory):
        a = tmp_path_factory.mktemp("rerun_a")
        b = tmp_path_factory.mktemp("rerun_b")
        args = ("train", "--manifest", str(corpus / "manifest.txt"),
                "--seed", "5", *TINY_NET,
                "--set", "train.batches=12", "--set", "train.eval_interval=6",
                "--set", "optimizer.batch_size=8")
        assert run(*args, "--out", str(a)) == 0
        assert run(*args, "--out", str(b)) == 0
        for name in ("checkpoint.madnn", "train_log.csv", "val_log.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name


class TestPredict:
    def test_outputs_and_rerun_identical(self, corpus, trained, tmp_path_factory):
        a = tmp_path_factory.mktemp("pred_a")
        b = tmp_path_factory.mktemp("pred_b")
        args = ("predict", "--image", str(corpus / "synth_000.ppm"),
                "--checkpoint", str(trained / "checkpoint.madnn"))
        assert run(*args, "--out", str(a)) == 0
        assert run(*args, "--out", str(b)) == 0
        for name in ("synth_000.map", "synth_000.regions.txt",
                     "synth_000_map.pgm"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_map_dims_match_image(self, corpus, trained, tmp_path):
        assert run("predict", "--image", str(corpus / "synth_001.ppm"),
                   "--checkpoint", str(trained / "checkpoint.madnn"),
                   "--out", str(tmp_path)) == 0
        pmap = detection.read_prob_map(tmp_path / "synth_001.map")
        img = imageio.read_image(corpus / "synth_001.ppm")
        assert pmap.prob.shape == img.shape[1:]

    def test_corrupt_checkpoint_refused(self, corpus, trained, tmp_path):
        blob = bytearray((trained / "checkpoint.madnn").read_bytes())
        blob[len(blob) // 2] ^= 0x5A
        bad = tmp_path / "bad.madnn"
        bad.write_bytes(bytes(blob))
        rc = run("predict", "--image", str(corpus / "synth_000.ppm"),
                 "--checkpoint", str(bad), "--out", str(tmp_path))
        assert rc == 2

    def test_blank_image_empty_region_list(self, trained, tmp_path):
        imageio.write_ppm(tmp_path / "blank.ppm", np.zeros((3, 64, 64)))
        assert run("predict", "--image", str(tmp_path / "blank.ppm"),
                   "--checkpoint", str(trained / "checkpoint.madnn"),
                   "--out", str(tmp_path)) == 0
        lines = (tmp_path / "blank.regions.txt").read_text().splitlines()
        assert len(lines) == 1  # just the image comment


class TestEvaluate:
    def test_checkpoint_run_writes_reports(self, corpus, trained, tmp_path):
        rc = run("evaluate", "--manifest", str(corpus / "manifest.txt"),
                 "--checkpoint", str(trained / "checkpoint.madnn"),
                 "--out", str(tmp_path),
                 "--set", "eval.froc_thresholds=0.4,0.6")
        assert rc == 0
        txt = (tmp_path / "metrics.txt").read_text()
        assert "POOLED" in txt
        assert "pixel AUC (pooled):" in txt
        roc = (tmp_path / "roc.csv").read_text().splitlines()
        assert roc[0] == "threshold,one_minus_sp,se"
        froc = (tmp_path / "froc.csv").read_text().splitlines()
        assert len(froc) == 3

    def test_pooled_counts_are_sums(self, corpus, trained, tmp_path):
        rc = run("evaluate", "--manifest", str(corpus / "manifest.txt"),
                 "--checkpoint", str(trained / "checkpoint.madnn"),
                 "--out", str(tmp_path),
                 "--set", "eval.froc_thresholds=0.5")
        assert rc == 0
        rows = [l.split() for l in
                (tmp_path / "metrics.txt").read_text().splitlines()
                if l and not l.startswith("pixel")]
        body = [r for r in rows[1:] if r]
        per_image = [r for r in body if r[0] != "POOLED"]
        pooled = next(r for r in body if r[0] == "POOLED")
        for col in range(1, 5):
            assert int(pooled[col]) == sum(int(r[col]) for r in per_image)

    def test_oracle_maps_give_perfect_auc(self, corpus, tmp_path):
        # feed labels as probability maps through --maps-dir
        maps = tmp_path / "maps"
        maps.mkdir()
        images = dataset.load_corpus(corpus / "manifest.txt")
        for i, img in enumerate(images):
            pm = detection.ProbabilityMap(img.labels.astype(float),
                                          np.zeros_like(img.labels))
            detection.write_prob_map(maps / f"synth_{i:03d}.map", pm)
        out = tmp_path / "eval"
        rc = run("evaluate", "--manifest", str(corpus / "manifest.txt"),
                 "--maps-dir", str(maps), "--out", str(out),
                 "--set", "eval.froc_thresholds=0.5")
        assert rc == 0
        assert "pixel AUC (pooled): 1.0000" in (out / "metrics.txt").read_text()

    def test_needs_exactly_one_source(self, corpus, tmp_path):
        rc = run("evaluate", "--manifest", str(corpus / "manifest.txt"),
                 "--out", str(tmp_path))
        assert rc == 1


class TestExitCodes:
    def test_usage_error(self, capsys):
        assert run("trian") == 1
        assert run() == 1

    def test_unknown_key_is_config_error(self, tmp_path):
        assert run("synth", "--out", str(tmp_path),
                   "--set", "bogus.key=1") == 1

    def test_missing_manifest_is_data_error(self, tmp_path):
        assert run("train", "--manifest", str(tmp_path / "nope.txt"),
                   "--out", str(tmp_path)) == 2

    def test_dump_config(self, capsys):
        assert run("synth", "--dump-config", "--set", "seed=123") == 0
        out = capsys.readouterr().out
        assert "seed = 123" in out
        assert "optimizer.epsilon0 = 0.01" in out

    def test_bad_geometry_is_config_error(self, corpus, tmp_path):
        rc = run("train", "--manifest", str(corpus / "manifest.txt"),
                 "--out", str(tmp_path),
                 "--set", "network.input_side=15")  # 15 does not chain
        assert rc == 1
