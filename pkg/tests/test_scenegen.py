"""Scene generator: disc geometry oracles, determinism, preset contracts."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpdlab import scenegen as sg
from dpdlab.errors import CapacityError, ConfigError


def disc_membership_oracle(points, h, w):
    """Per-pixel membership test, independent of the renderer."""
    gt = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            for (r, c, rad) in points:
                if (i - r) ** 2 + (j - c) ** 2 <= rad ** 2:
                    gt[i, j] = 1.0
                    break
    return gt


class TestRenderBinaryMap:
    def test_empty_points(self):
        gt = sg.render_binary_map([], (8, 8))
        assert gt.shape == (1, 8, 8) and gt.data.sum() == 0.0

    def test_overlap_union_idempotent(self):
        one = sg.render_binary_map([(4, 4, 2.0)], (9, 9))
        two = sg.render_binary_map([(4, 4, 2.0), (4, 4, 2.0)], (9, 9))
        np.testing.assert_array_equal(one.data, two.data)

    def test_two_discs_match_membership_oracle(self):
        points = [(5, 5, 2.0), (5, 8, 2.0)]
        gt = sg.render_binary_map(points, (12, 14)).data[0]
        ref = disc_membership_oracle(points, 12, 14)
        np.testing.assert_array_equal(gt, ref)

    def test_radius_three_disc_has_29_pixels(self):
        gt = sg.render_binary_map([(10, 10, 3.0)], (32, 32))
        assert gt.data.sum() == 29.0

    def test_out_of_bounds_point_rejected(self):
        with pytest.raises(ConfigError):
            sg.render_binary_map([(40, 2, 1.0)], (8, 8))

    @given(st.lists(st.tuples(st.integers(2, 13), st.integers(2, 13),
                              st.floats(1.0, 2.5)), max_size=4))
    @settings(max_examples=40, deadline=None)
    def test_matches_oracle_on_random_points(self, points):
        gt = sg.render_binary_map(points, (16, 16)).data[0]
        ref = disc_membership_oracle(points, 16, 16)
        np.testing.assert_array_equal(gt, ref)


class TestSampleScene:
    def test_empty_crowd(self):
        spec = sg.DomainSpec(count_range=(0, 0))
        sc = sg.sample_scene(spec, 3)
        assert sc.points == [] and sc.gt_binary.data.sum() == 0.0

    def test_single_head_disc_pixel_count(self):
        spec = sg.DomainSpec(image_size=(32, 32), count_range=(1, 1),
                             head_radius_range=(3.0, 3.0), background_texture="flat")
        for seed in range(5):
            sc = sg.sample_scene(spec, seed)
            assert len(sc.points) == 1
            assert sc.gt_binary.data.sum() == 29.0

    def test_determinism(self):
        spec = sg.DomainSpec()
        a = sg.sample_scene(spec, 17)
        b = sg.sample_scene(spec, 17)
        assert a.points == b.points
        assert a.image.data.tobytes() == b.image.data.tobytes()
        assert a.gt_binary.data.tobytes() == b.gt_binary.data.tobytes()

    def test_style_shift_preserves_geometry(self):
        src, tgt = sg.shift_preset("style_dark")
        for seed in (0, 5, 9):
            a = sg.sample_scene(src, seed)
            b = sg.sample_scene(tgt, seed)
            assert a.points == b.points

    def test_values_in_unit_interval(self):
        for texture in sg.TEXTURES:
            spec = sg.DomainSpec(background_texture=texture, noise_sigma=0.3,
                                 brightness=0.9, contrast=1.8)
            sc = sg.sample_scene(spec, 1)
            assert sc.image.data.min() >= 0.0 and sc.image.data.max() <= 1.0

    def test_gt_is_function_of_points(self):
        spec = sg.DomainSpec()
        sc = sg.sample_scene(spec, 8)
        rebuilt = sg.render_binary_map(sc.points, spec.image_size)
        np.testing.assert_array_equal(sc.gt_binary.data, rebuilt.data)

    def test_points_inside_bounds(self):
        spec = sg.DomainSpec(count_range=(6, 10))
        for seed in range(10):
            sc = sg.sample_scene(spec, seed)
            for (r, c, rad) in sc.points:
                assert 0 <= r < 64 and 0 <= c < 64

    def test_overcrowded_spec_raises_capacity_error(self):
        spec = sg.DomainSpec(image_size=(16, 16), count_range=(50, 50),
                             head_radius_range=(3.0, 3.0))
        with pytest.raises(CapacityError):
            sg.sample_scene(spec, 0)

    def test_heads_separated(self):
        spec = sg.DomainSpec(count_range=(8, 8))
        sc = sg.sample_scene(spec, 2)
        pts = sc.points
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                d = np.hypot(pts[i][0] - pts[j][0], pts[i][1] - pts[j][1])
                assert d >= 2.0  # stated minimum spacing


class TestSpecValidation:
    def test_bad_ranges(self):
        with pytest.raises(ConfigError):
            sg.DomainSpec(count_range=(5, 2))
        with pytest.raises(ConfigError):
            sg.DomainSpec(head_radius_range=(0.5, 2.0))
        with pytest.raises(ConfigError):
            sg.DomainSpec(background_texture="noise")
        with pytest.raises(ConfigError):
            sg.DomainSpec(contrast=0.0)


class TestPresets:
    def test_unknown_name(self):
        with pytest.raises(ConfigError):
            sg.shift_preset("bigger")

    def test_scale_up_only_radius_differs(self):
        src, tgt = sg.shift_preset("scale_up")
        assert tgt.head_radius_range[0] > src.head_radius_range[1]
        for f in ("image_size", "count_range", "brightness", "contrast",
                  "noise_sigma", "background_texture", "seed_stream"):
            assert getattr(src, f) == getattr(tgt, f)

    def test_style_dark_only_brightness_differs(self):
        src, tgt = sg.shift_preset("style_dark")
        assert tgt.brightness < src.brightness
        for f in ("image_size", "count_range", "head_radius_range", "contrast",
                  "noise_sigma", "background_texture", "seed_stream"):
            assert getattr(src, f) == getattr(tgt, f)

    def test_density_up_only_count_differs(self):
        src, tgt = sg.shift_preset("density_up")
        assert tgt.count_range[0] > src.count_range[1]

    def test_resolution_down_only_size_differs(self):
        src, tgt = sg.shift_preset("resolution_down")
        assert tgt.image_size[0] < src.image_size[0]

    def test_mixed_differs_in_at_least_three_fields(self):
        src, tgt = sg.shift_preset("mixed")
        diffs = sum(getattr(src, f) != getattr(tgt, f)
                    for f in ("image_size", "count_range", "head_radius_range",
                              "brightness", "contrast", "noise_sigma",
                              "background_texture"))
        assert diffs >= 3

    def test_all_presets_generate(self):
        for name in sg.PRESET_NAMES:
            src, tgt = sg.shift_preset(name)
            sg.sample_scene(src, 0)
            sg.sample_scene(tgt, 0)

    def test_midpoint_proxy_valid(self):
        for name in sg.PRESET_NAMES:
            spec = sg.proxy_spec_for(name)
            assert spec.image_size[0] % 4 == 0
            sg.sample_scene(spec, 0)


class TestPersistence:
    def test_scene_roundtrip_bit_exact(self, tmp_path):
        sc = sg.sample_scene(sg.DomainSpec(), 4)
        path = tmp_path / "scene.bin"
        sg.save_scene(path, sc)
        back = sg.load_scene(path)
        assert back.points == sc.points
        assert back.image.data.tobytes() == sc.image.data.tobytes()
        assert back.gt_binary.data.tobytes() == sc.gt_binary.data.tobytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTASCENE")
        with pytest.raises(ConfigError):
            sg.load_scene(path)

    def test_ppm_header(self, tmp_path):
        sc = sg.sample_scene(sg.DomainSpec(), 0)
        path = tmp_path / "scene.ppm"
        sg.save_ppm(path, sc.image)
        data = path.read_bytes()
        assert data.startswith(b"P6\n64 64\n255\n")
        assert len(data) == len(b"P6\n64 64\n255\n") + 3 * 64 * 64

    def test_save_set(self, tmp_path):
        scenes = sg.generate_set(sg.DomainSpec(), 3, 0)
        sg.save_set(tmp_path / "scenes", scenes, with_ppm=True)
        assert len(list((tmp_path / "scenes").glob("*.bin"))) == 3
        assert len(list((tmp_path / "scenes").glob("*.ppm"))) == 3


class TestCrop:
    def test_crop_shape_and_alignment(self):
        sc = sg.sample_scene(sg.DomainSpec(), 6)
        rng = np.random.default_rng(0)
        img, gt = sg.random_crop(sc, 32, rng)
        assert img.shape == (3, 32, 32) and gt.shape == (1, 32, 32)

    def test_crop_too_large(self):
        sc = sg.sample_scene(sg.DomainSpec(image_size=(16, 16), count_range=(1, 1)), 0)
        with pytest.raises(ConfigError):
            sg.random_crop(sc, 32, np.random.default_rng(0))
