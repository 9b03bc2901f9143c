import colorsys
from collections import Counter

import numpy as np
import pytest

from cffa.boxes import BBox
from cffa.domains import (
    SHAPES,
    DatasetError,
    Sample,
    SceneConfig,
    ShiftConfig,
    apply_shift,
    generate_scene,
    hue_rotate,
    make_domains,
    pixel_statistics,
    read_dataset,
    read_pgm,
    read_ppm,
    write_dataset,
    write_pgm,
    write_ppm,
)
from cffa.evaluation import proxy_a_distance

CFG = SceneConfig()


def family_mask(image, category, cfg=CFG):
    """Pixels whose hue lies in the class's hue band and that are clearly saturated."""
    rgb = image.transpose(1, 2, 0).reshape(-1, 3)
    hsv = np.array([colorsys.rgb_to_hsv(*p) for p in rgb])
    hue = hsv[:, 0] * 360
    delta = np.abs((hue - cfg.class_hues[category] + 180) % 360 - 180)
    ok = (delta <= cfg.hue_jitter + 1) & (hsv[:, 1] >= 0.5)
    return ok.reshape(image.shape[1:])


class TestGenerateScene:
    def test_deterministic(self):
        a, b = generate_scene(7), generate_scene(7)
        assert a.image.tobytes() == b.image.tobytes()
        assert a.annotations == b.annotations

    def test_seeds_differ(self):
        assert generate_scene(1).image.tobytes() != generate_scene(2).image.tobytes()

    @pytest.mark.parametrize("seed", range(30))
    def test_contract(self, seed):
        s = generate_scene(seed)
        assert s.image.shape == (3, 64, 64)
        assert 0 <= s.image.min() and s.image.max() <= 1
        assert len(s.annotations) <= CFG.max_objects
        for box, k in s.annotations:
            assert 0 <= box.x_min < box.x_max <= 64 and 0 <= box.y_min < box.y_max <= 64
            assert box.area >= 16
            assert 0 <= k < CFG.num_classes

    def test_images_are_8bit(self):
        img = generate_scene(3).image
        np.testing.assert_array_equal(np.round(img * 255) / 255, img)

    @pytest.mark.parametrize("seed", range(40))
    def test_pixel_oracle(self, seed):
        s = generate_scene(seed)
        for box, k in s.annotations:
            mask = family_mask(s.image, k)
            x0, y0, x1, y1 = (int(v) for v in box)
            inside = mask[y0:y1, x0:x1]
            fill = inside.mean()
            # a triangle covers at most half of its bounding box
            assert fill >= (0.45 if SHAPES[k] == "triangle" else 0.6)
            # tight: every border row and column of the box touches the object
            assert inside[0].any() and inside[-1].any() and inside[:, 0].any() and inside[:, -1].any()
            # nothing of this object spills into the one-pixel ring around the box
            ring = mask[max(y0 - 1, 0):y1 + 1, max(x0 - 1, 0):x1 + 1].sum() - inside.sum()
            assert ring == 0

    def test_class_balance(self):
        counts = Counter(k for seed in range(300) for _, k in generate_scene(seed).annotations)
        uniform = sum(counts.values()) / CFG.num_classes
        for k in range(CFG.num_classes):
            assert abs(counts[k] - uniform) <= 0.3 * uniform

    def test_crowded_scene_drops_objects(self):
        cfg = SceneConfig(image_size=32, min_objects=8, max_objects=8, min_size=14, max_size=14,
                          placement_retries=3)
        s = generate_scene(0, cfg)
        assert 1 <= len(s.annotations) < 8


class TestShift:
    def sample(self, pixel):
        img = np.broadcast_to(np.asarray(pixel, float)[:, None, None], (3, 4, 4)).copy()
        return Sample(img, [(BBox(0, 0, 2, 2), 1)], "x")

    def test_identity(self):
        s = generate_scene(4)
        out = apply_shift(s, ShiftConfig(fog_intensity=0, noise_sigma=0, hue_rotation=0))
        np.testing.assert_array_equal(out.image, s.image)

    def test_full_fog(self):
        out = apply_shift(generate_scene(4), ShiftConfig(fog_intensity=1, noise_sigma=0, hue_rotation=0))
        np.testing.assert_allclose(out.image, np.broadcast_to(np.array([0.8, 0.8, 0.82])[:, None, None], (3, 64, 64)))

    def test_half_fog_arithmetic(self):
        shift = ShiftConfig(fog_intensity=0.5, fog_color=(1, 1, 1), noise_sigma=0, hue_rotation=0)
        out = apply_shift(self.sample((0.2, 0.4, 0.6)), shift)
        np.testing.assert_allclose(out.image[:, 0, 0], [0.6, 0.7, 0.8], atol=1e-12)

    def test_geometry_preserved(self):
        for seed in range(10):
            s = generate_scene(seed)
            assert apply_shift(s, ShiftConfig(), seed).annotations == s.annotations

    def test_hue_rotation_fixes_grey_and_cycles(self):
        grey = np.full((3, 2, 2), 0.4)
        np.testing.assert_allclose(hue_rotate(grey, 73.0), grey, atol=1e-12)
        img = generate_scene(5).image
        np.testing.assert_allclose(hue_rotate(hue_rotate(img, 120), 240), img, atol=0.02)

    def test_output_range_with_noise(self):
        out = apply_shift(generate_scene(6), ShiftConfig(noise_sigma=0.5), 1)
        assert out.image.min() >= 0 and out.image.max() <= 1


class TestDomains:
    def test_split_sizes_and_ids(self):
        d = make_domains(0, n_source=5, n_target=4, n_test=3)
        assert [len(d[k]) for k in ("source_train", "target_train", "target_test")] == [5, 4, 3]
        ids = [s.id for split in d.values() for s in split]
        assert len(set(ids)) == len(ids)

    def test_deterministic(self):
        a, b = make_domains(3, n_source=3, n_target=3, n_test=3), make_domains(3, n_source=3, n_target=3, n_test=3)
        for k in a:
            for x, y in zip(a[k], b[k]):
                assert x.image.tobytes() == y.image.tobytes() and x.annotations == y.annotations

    def test_linear_probe_separates_domains(self):
        d = make_domains(0, n_source=200, n_target=200, n_test=0)
        _, eps = proxy_a_distance(pixel_statistics(d["source_train"]), pixel_statistics(d["target_train"]))
        assert 1 - eps > 0.9


class TestIO:
    def test_roundtrip(self, tmp_path):
        d = make_domains(1, n_source=6, n_target=0, n_test=0)["source_train"]
        d.append(Sample(np.zeros((3, 64, 64)), [], "empty"))
        write_dataset(d, tmp_path)
        back = read_dataset(tmp_path)
        assert [s.id for s in back] == [s.id for s in d]
        for x, y in zip(d, back):
            assert x.annotations == y.annotations
            assert np.abs(x.image - y.image).max() <= 1 / 255

    def test_unquantized_within_one_level(self, tmp_path, rng):
        img = rng.random((3, 8, 8))
        write_ppm(tmp_path / "a.ppm", img)
        assert np.abs(read_ppm(tmp_path / "a.ppm") - img).max() <= 0.5 / 255 + 1e-12

    def test_manifest_order(self, tmp_path):
        d = make_domains(2, n_source=4, n_target=0, n_test=0)["source_train"][::-1]
        write_dataset(d, tmp_path)
        assert [s.id for s in read_dataset(tmp_path)] == [s.id for s in d]

    def test_malformed_line_reports_line(self, tmp_path):
        write_dataset(make_domains(2, n_source=1, n_target=0, n_test=0)["source_train"], tmp_path)
        (tmp_path / "src00000.txt").write_text("0 1 1 9 9\n1 two 3 4 5\n")
        with pytest.raises(DatasetError, match=r"src00000.txt:2"):
            read_dataset(tmp_path)

    def test_inverted_box_rejected(self, tmp_path):
        write_dataset(make_domains(2, n_source=1, n_target=0, n_test=0)["source_train"], tmp_path)
        (tmp_path / "src00000.txt").write_text("0 9 1 2 9\n")
        with pytest.raises(DatasetError, match=":1"):
            read_dataset(tmp_path)

    def test_missing_image(self, tmp_path):
        write_dataset(make_domains(2, n_source=2, n_target=0, n_test=0)["source_train"], tmp_path)
        (tmp_path / "src00001.ppm").unlink()
        with pytest.raises(DatasetError, match="src00001.ppm"):
            read_dataset(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError):
            read_dataset(tmp_path)

    def test_truncated_image(self, tmp_path):
        write_ppm(tmp_path / "a.ppm", np.zeros((3, 4, 4)))
        raw = (tmp_path / "a.ppm").read_bytes()
        (tmp_path / "a.ppm").write_bytes(raw[:-5])
        with pytest.raises(DatasetError):
            read_ppm(tmp_path / "a.ppm")

    def test_pgm_roundtrip(self, tmp_path, rng):
        g = rng.integers(0, 256, (5, 7)).astype(np.uint8)
        write_pgm(tmp_path / "g.pgm", g)
        np.testing.assert_array_equal(read_pgm(tmp_path / "g.pgm"), g)
