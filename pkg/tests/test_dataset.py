import numpy as np
import pytest
from scipy import ndimage

from madet import dataset, imageio
from madet.errors import ConfigError, DataError
from madet.tensor import seeded_rng


@pytest.fixture(scope="module")
def synth_pair():
    return [dataset.synth_generate(dataset.SyntheticConfig(160, 10, 5, 1, seed=s))
            for s in (100, 101)]


class TestImageIO:
    def test_ppm_roundtrip(self, tmp_path):
        rng = seeded_rng(0)
        rgb = np.round(rng.random((3, 12, 17)) * 255) / 255
        path = tmp_path / "img.ppm"
        imageio.write_ppm(path, rgb)
        back = imageio.read_image(path)
        assert np.allclose(back, rgb, atol=0.5 / 255)

    def test_pgm_roundtrip_binary(self, tmp_path):
        raster = seeded_rng(1).random((9, 11)) > 0.5
        path = tmp_path / "m.pgm"
        imageio.write_pgm(path, raster)
        back = imageio.read_raster(path)
        assert np.array_equal(back >= 128, raster)

    def test_pgm16_is_big_endian_per_netpbm(self, tmp_path):
        vals = np.array([[0.0, 1.0], [0.5, 0.25]])
        path = tmp_path / "p.pgm"
        imageio.write_pgm16(path, vals)
        blob = path.read_bytes()
        assert blob.startswith(b"P5\n2 2\n65535\n")
        first = int.from_bytes(blob[-8:-6], "big")
        assert first == 0

    def test_png_read(self, tmp_path):
        from PIL import Image
        arr = (seeded_rng(2).random((7, 8, 3)) * 255).astype(np.uint8)
        path = tmp_path / "img.png"
        Image.fromarray(arr).save(path)
        back = imageio.read_image(path)
        assert back.shape == (3, 7, 8)
        assert np.allclose(back, arr.transpose(2, 0, 1) / 255.0)

    def test_header_comments_parsed(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# a comment\n2 2\n255\n\x00\x10\x20\x30")
        back = imageio.read_raster(path)
        assert np.array_equal(back, [[0, 16], [32, 48]])

    def test_truncated_data_rejected(self, tmp_path):
        path = tmp_path / "t.pgm"
        path.write_bytes(b"P5\n4 4\n255\n\x00\x01")
        with pytest.raises(DataError):
            imageio.read_raster(path)


class TestLoadAnnotated:
    def test_roundtrip_zero_label_loss(self, tmp_path, synth_pair):
        img = synth_pair[0]
        dataset.write_annotated(img, tmp_path / "a.ppm", tmp_path / "a_l.pgm",
                                tmp_path / "a_m.pgm")
        back = dataset.load_annotated(tmp_path / "a.ppm", tmp_path / "a_l.pgm",
                                      tmp_path / "a_m.pgm")
        assert np.array_equal(back.labels, img.labels)
        assert np.array_equal(back.fov_mask, img.fov_mask)
        assert np.allclose(back.rgb, img.rgb)  # generator output is 8-bit exact

    def test_all_zero_labels_give_no_ma_centers(self, tmp_path, synth_pair):
        img = synth_pair[0]
        empty = dataset.AnnotatedImage(img.rgb, img.fov_mask,
                                       np.zeros_like(img.labels))
        with pytest.raises(DataError):
            dataset.build_catalog([empty])

    def test_single_labeled_pixel_single_center(self, synth_pair):
        img = synth_pair[0]
        labels = np.zeros_like(img.labels)
        labels[80, 80] = True
        one = dataset.AnnotatedImage(img.rgb, img.fov_mask, labels)
        cat = dataset.build_catalog([one], dataset.CatalogConfig(seed=1))
        assert cat.ma_centers.shape[0] == 1
        assert tuple(cat.ma_centers[0]) == (0, 80, 80)

    def test_mismatched_sizes_error_names_dimensions(self, tmp_path, synth_pair):
        img = synth_pair[0]
        imageio.write_ppm(tmp_path / "b.ppm", img.rgb)
        imageio.write_pgm(tmp_path / "b_l.pgm", np.zeros((10, 10), dtype=bool))
        with pytest.raises(DataError) as err:
            dataset.load_annotated(tmp_path / "b.ppm", tmp_path / "b_l.pgm")
        assert "(10, 10)" in str(err.value)

    def test_missing_mask_computed(self, tmp_path, synth_pair):
        img = synth_pair[0]
        dataset.write_annotated(img, tmp_path / "c.ppm", tmp_path / "c_l.pgm",
                                tmp_path / "c_m.pgm")
        back = dataset.load_annotated(tmp_path / "c.ppm", tmp_path / "c_l.pgm")
        inter = (back.fov_mask & img.fov_mask).sum()
        assert inter / img.fov_mask.sum() > 0.8  # eroded subset of the disc

    def test_point_annotations(self, tmp_path, synth_pair):
        img = synth_pair[0]
        imageio.write_ppm(tmp_path / "d.ppm", img.rgb)
        imageio.write_pgm(tmp_path / "d_m.pgm", img.fov_mask)
        (tmp_path / "points.txt").write_text(
            "# comment\nd.ppm,80,82\nd.ppm,90,95\nother.ppm,5,5\n")
        back = dataset.load_annotated(tmp_path / "d.ppm", tmp_path / "points.txt",
                                      tmp_path / "d_m.pgm", image_rel="d.ppm")
        assert back.labels.sum() == 2
        assert back.labels[82, 80] and back.labels[95, 90]

    def test_point_annotation_bad_line_rejected(self, tmp_path):
        p = tmp_path / "bad.txt"
        p.write_text("img.ppm,1\n")
        with pytest.raises(DataError):
            dataset.load_point_annotations(p)

    def test_manifest_roundtrip(self, tmp_path, synth_pair):
        lines = []
        for i, img in enumerate(synth_pair):
            stem = f"img_{i}"
            dataset.write_annotated(img, tmp_path / f"{stem}.ppm",
                                    tmp_path / f"{stem}_l.pgm",
                                    tmp_path / f"{stem}_m.pgm")
            lines.append(f"{stem}.ppm,{stem}_l.pgm,{stem}_m.pgm")
        (tmp_path / "manifest.txt").write_text("\n".join(lines) + "\n")
        corpus = dataset.load_corpus(tmp_path / "manifest.txt")
        assert len(corpus) == 2
        assert np.array_equal(corpus[0].labels, synth_pair[0].labels)

    def test_manifest_unlabeled_entry_rejected(self, tmp_path):
        (tmp_path / "manifest.txt").write_text("only_an_image.ppm\n")
        with pytest.raises(DataError):
            dataset.load_corpus(tmp_path / "manifest.txt")


class TestBuildCatalog:
    def test_ratio_respected(self, synth_pair):
        img = synth_pair[0]
        labels = np.zeros_like(img.labels)
        ys, xs = np.nonzero(img.fov_mask)
        pick = seeded_rng(3).choice(ys.size, 100, replace=False)
        labels[ys[pick], xs[pick]] = True
        labels &= img.fov_mask
        n = int(labels.sum())
        one = dataset.AnnotatedImage(img.rgb, img.fov_mask, labels)
        cat = dataset.build_catalog([one], dataset.CatalogConfig(16.0, seed=2))
        assert abs(cat.non_ma_centers.shape[0] - 16 * n) <= 1

    def test_hard_negative_fraction_default(self, synth_pair):
        cat = dataset.build_catalog(synth_pair, dataset.CatalogConfig(seed=4))
        frac = cat.non_ma_centers[:, 3].mean()
        assert abs(frac - 0.8) < 0.01

    def test_all_centers_inside_mask(self, synth_pair):
        cat = dataset.build_catalog(synth_pair, dataset.CatalogConfig(seed=5))
        for rows in (cat.ma_centers, cat.non_ma_centers[:, :3]):
            for img_idx, x, y in rows:
                assert synth_pair[int(img_idx)].fov_mask[int(y), int(x)]

    def test_non_ma_disjoint_from_labels(self, synth_pair):
        cat = dataset.build_catalog(synth_pair, dataset.CatalogConfig(seed=6))
        for img_idx, x, y, _ in cat.non_ma_centers:
            assert not synth_pair[int(img_idx)].labels[int(y), int(x)]

    def test_deterministic_given_seed(self, synth_pair):
        a = dataset.build_catalog(synth_pair, dataset.CatalogConfig(seed=7))
        b = dataset.build_catalog(synth_pair, dataset.CatalogConfig(seed=7))
        assert np.array_equal(a.ma_centers, b.ma_centers)
        assert np.array_equal(a.non_ma_centers, b.non_ma_centers)

    def test_heuristic_hard_negatives_without_generator_hint(self, synth_pair):
        img = synth_pair[0]
        plain = dataset.AnnotatedImage(img.rgb, img.fov_mask, img.labels)
        cat = dataset.build_catalog([plain], dataset.CatalogConfig(seed=8))
        hard = cat.non_ma_centers[cat.non_ma_centers[:, 3] == 1]
        assert hard.shape[0] > 0
        # hard picks should be dark structure: clearly below the image median
        g = img.rgb[1]
        med = np.median(g[img.fov_mask])
        vals = g[hard[:, 2], hard[:, 1]]
        assert np.median(vals) < med


class TestBatchSampler:
    def test_ma_quota_per_batch(self, synth_pair):
        cat = dataset.build_catalog(synth_pair, dataset.CatalogConfig(seed=9))
        stream = dataset.batch_sampler(cat, 128, 0.25, seeded_rng(10), side=9)
        batch = next(stream)
        assert len(batch) == 128
        assert sum(w.label for w in batch) == 32

    def test_same_seed_same_stream(self, synth_pair):
        cat = dataset.build_catalog(synth_pair, dataset.CatalogConfig(seed=11))
        s1 = dataset.batch_sampler(cat, 16, 0.5, seeded_rng(12), side=9)
        s2 = dataset.batch_sampler(cat, 16, 0.5, seeded_rng(12), side=9)
        for _ in range(3):
            b1, b2 = next(s1), next(s2)
            for w1, w2 in zip(b1, b2):
                assert np.array_equal(w1.pixels, w2.pixels)
                assert (w1.center_x, w1.center_y, w1.label) == \
                    (w2.center_x, w2.center_y, w2.label)

    def test_labels_match_raster_over_many_draws(self, synth_pair):
        # single-image catalog: every drawn center is attributable
        img = synth_pair[0]
        cat = dataset.build_catalog([img], dataset.CatalogConfig(seed=13))
        stream = dataset.batch_sampler(cat, 64, 0.5, seeded_rng(14), side=5)
        checked = 0
        while checked < 10 ** 4:
            for w in next(stream):
                assert w.label == int(img.labels[w.center_y, w.center_x])
                checked += 1

    def test_unaugmented_windows_copy_the_image(self, synth_pair):
        img = synth_pair[0]
        cat = dataset.build_catalog([img], dataset.CatalogConfig(seed=15))
        stream = dataset.batch_sampler(cat, 8, 0.5, seeded_rng(16), side=9,
                                       augment=False)
        for w in next(stream):
            from madet.windowing import extract_window
            ref = extract_window(img.rgb, w.center_x, w.center_y, 9)
            assert np.array_equal(w.pixels, ref.pixels)

    def test_empty_class_rejected(self, synth_pair):
        cat = dataset.build_catalog(synth_pair, dataset.CatalogConfig(seed=17))
        empty = dataset.SampleCatalog(cat.images, cat.ma_centers[:0],
                                      cat.non_ma_centers)
        with pytest.raises(DataError):
            next(dataset.batch_sampler(empty, 8, 0.5, seeded_rng(18), side=9))

    def test_bad_fraction_rejected(self, synth_pair):
        cat = dataset.build_catalog(synth_pair, dataset.CatalogConfig(seed=19))
        with pytest.raises(ConfigError):
            next(dataset.batch_sampler(cat, 8, 0.0, seeded_rng(20), side=9))


class TestSplit:
    def test_per_image_split(self):
        train, val = dataset.split_by_image(10, 0.2, seeded_rng(21))
        assert len(train) == 8 and len(val) == 2
        assert not set(train) & set(val)

    def test_zero_fraction_keeps_all(self):
        train, val = dataset.split_by_image(5, 0.0, seeded_rng(22))
        assert len(train) == 5 and len(val) == 0


class TestSynthGenerate:
    def test_zero_ma_count_empty_labels(self):
        img = dataset.synth_generate(dataset.SyntheticConfig(96, 0, 3, 1, seed=0))
        assert not img.labels.any()

    def test_exact_component_count(self):
        img = dataset.synth_generate(dataset.SyntheticConfig(192, 25, 5, 2, seed=1))
        n = ndimage.label(img.labels, structure=np.ones((3, 3)))[1]
        assert n == 25

    def test_ma_contrast_below_vessel_contrast(self):
        # renderer constants order the depths, and the rendered image agrees
        assert dataset.MA_GREEN_DEPTH[1] < dataset.VESSEL_GREEN_DEPTH
        img = dataset.synth_generate(dataset.SyntheticConfig(192, 15, 6, 2, seed=2))
        g = img.rgb[1]
        assert img.hard_negatives.any()
        assert g[img.hard_negatives].min() < g[img.labels].min()

    def test_deterministic(self):
        a = dataset.synth_generate(dataset.SyntheticConfig(seed=33))
        b = dataset.synth_generate(dataset.SyntheticConfig(seed=33))
        assert np.array_equal(a.rgb, b.rgb)
        assert np.array_equal(a.labels, b.labels)

    def test_labels_inside_fov(self):
        img = dataset.synth_generate(dataset.SyntheticConfig(seed=3))
        assert not (img.labels & ~img.fov_mask).any()
