import math
import tempfile
import unittest
import numpy as np

from collections import Counter
from dataclasses import replace
from pathlib import Path
from scipy import ndimage
from dsolocate.exceptions import ArtifactIOError, ConfigurationError, DomainError
from dsolocate.geometry import rasterize
from dsolocate.synthgen import (
    KIND_WEIGHTS, KINDS, MIN_VISIBLE_FRACTION, PATCH_SIZE, PROFILES, DsoKind, DsoSpec, InstrumentProfile, Label,
    build_dataset, get_profile, label_for, load_dataset, random_dso_specs, random_scene_specs, render_dso,
    render_scene, render_starfield, split_sizes, write_dataset,
)
from dsolocate.utils import derive_seed, polygon_area
from tests.fake_logger import FakeLogger
from tests.helpers import TINY_PROFILE, tiny_split

QUIET = replace(TINY_PROFILE, read_noise_sigma=0.0, sky_gradient_max=0.0)

class TestProfiles(unittest.TestCase):

    def test_builtin_profiles_are_valid(self):

        for name in ("desk", "stellina", "vespera"):
            try:
                get_profile(name).validate()
            except Exception as e:
                self.fail(e)
        self.assertEqual((PROFILES["stellina"].width, PROFILES["stellina"].height), (3096, 2080))
        self.assertEqual((PROFILES["vespera"].width, PROFILES["vespera"].height), (1920, 1080))
        self.assertRaises(ConfigurationError, get_profile, "hubble")

    def test_invalid_profiles(self):

        self.assertRaises(ConfigurationError, InstrumentProfile(width=100, height=300).validate)
        self.assertRaises(ConfigurationError, InstrumentProfile(psf_fwhm=0.0).validate)
        self.assertRaises(ConfigurationError, InstrumentProfile(read_noise_sigma=-0.1).validate)
        try:
            InstrumentProfile(width=100, height=100, full_frame=False).validate()
        except Exception as e:
            self.fail(e)

class TestStarfield(unittest.TestCase):

    def test_without_sources_the_background_is_uniform(self):

        image = render_starfield(QUIET, star_count=0, seed=1)
        self.assertEqual(image.pixels.shape, (256, 256, 3))
        self.assertTrue(np.all(image.pixels == image.pixels[0, 0]))

    def test_same_seed_same_image(self):

        a = render_starfield(TINY_PROFILE, star_count=20, seed=42)
        b = render_starfield(TINY_PROFILE, star_count=20, seed=42)
        c = render_starfield(TINY_PROFILE, star_count=20, seed=43)

        self.assertTrue(np.array_equal(a.pixels, b.pixels))
        self.assertFalse(np.array_equal(a.pixels, c.pixels))
        self.assertEqual(a.seed, 42)

    def test_every_star_is_one_local_maximum(self):

        profile = replace(get_profile("desk"), read_noise_sigma=0.0, sky_gradient_max=0.0)
        image = render_starfield(profile, star_count=50, seed=7)
        lum = image.pixels.mean(axis=2)

        # strict 3 x 3 maxima standing out of the sky
        peaks = (lum == ndimage.maximum_filter(lum, size=3)) & (lum > profile.sky_level + 0.01)
        self.assertEqual(int(peaks.sum()), 50)

    def test_intensities_are_clipped(self):

        profile = replace(TINY_PROFILE, read_noise_sigma=0.5)
        image = render_starfield(profile, star_count=10, seed=0)
        self.assertGreaterEqual(float(image.pixels.min()), 0.0)
        self.assertLessEqual(float(image.pixels.max()), 1.0)

    def test_invalid_arguments(self):

        self.assertRaises(ConfigurationError, render_starfield, TINY_PROFILE, -1, 0)
        self.assertRaises(ConfigurationError, render_starfield, InstrumentProfile(psf_fwhm=-1.0), 10, 0)
        # far too many stars for their minimum separation
        self.assertRaises(ConfigurationError, render_starfield, TINY_PROFILE, 2000, 0)

class TestDso(unittest.TestCase):

    def test_zero_brightness_renders_nothing(self):

        overlay, mask = render_dso(DsoSpec.galaxy(center=(128, 128), scale=30, brightness=0.0), TINY_PROFILE, seed=0)
        self.assertTrue(np.all(overlay.pixels == 0.0))
        self.assertFalse(mask.any())

    def test_round_galaxy_mask_is_a_disc(self):

        spec = DsoSpec.galaxy(center=(128.0, 128.0), scale=40.0, brightness=0.6)
        overlay, mask = render_dso(spec, TINY_PROFILE, seed=0)

        yy, xx = np.mgrid[0:256, 0:256]
        r = np.hypot(xx - 128.0, yy - 128.0)
        self.assertTrue(np.all(mask[r <= 39.0]))
        self.assertFalse(np.any(mask[r >= 41.0]))
        self.assertTrue(np.array_equal(mask, mask.T))
        self.assertAlmostEqual(float(overlay.pixels[128, 128, 0]), 0.6, places=5)

    def test_nebula_mask_area(self):

        spec = DsoSpec.nebula(center=(128.0, 128.0), scale=50.0, brightness=0.5)
        _, mask = render_dso(spec, TINY_PROFILE, seed=11)
        expected = math.pi * 50.0 ** 2
        self.assertLess(abs(int(mask.sum()) - expected) / expected, 0.2)

    def test_cluster_is_bright_in_the_core(self):

        spec = DsoSpec.cluster(center=(128.0, 128.0), scale=40.0, brightness=0.5)
        overlay, mask = render_dso(spec, TINY_PROFILE, seed=3)
        self.assertTrue(mask[128, 128])
        self.assertAlmostEqual(float(overlay.pixels[..., 0].max()), 0.5, places=5)

    def test_cluster_mask_covers_the_halo(self):

        spec = DsoSpec.cluster(center=(128.0, 128.0), scale=40.0, brightness=0.5)
        _, mask = render_dso(spec, TINY_PROFILE, seed=3)
        expected = math.pi * 40.0 ** 2
        self.assertLess(abs(int(mask.sum()) - expected) / expected, 0.05)

    def test_invalid_specs(self):

        for spec in [
            DsoSpec.galaxy(center=(300.0, 10.0), scale=10.0, brightness=0.5),
            DsoSpec.galaxy(center=(10.0, 10.0), scale=0.0, brightness=0.5),
            DsoSpec.galaxy(center=(10.0, 10.0), scale=10.0, brightness=1.5),
            DsoSpec.galaxy(center=(10.0, 10.0), scale=10.0, brightness=0.5, ellipticity=1.0),
            DsoSpec.nebula(center=(10.0, 10.0), scale=10.0, brightness=0.5, octaves=0),
            DsoSpec.cluster(center=(10.0, 10.0), scale=10.0, brightness=0.5, star_count=-3),
        ]:
            with self.assertRaises(DomainError):
                render_dso(spec, TINY_PROFILE, seed=0)

class TestScenes(unittest.TestCase):

    def test_empty_scene_has_no_objects(self):

        image, annotation = render_scene(TINY_PROFILE, [], seed=0, image_id="empty")
        self.assertEqual(len(annotation.objects), 0)
        self.assertEqual(annotation.image, "empty")
        self.assertEqual((annotation.width, annotation.height), (256, 256))

    def test_one_galaxy_one_polygon_around_its_center(self):

        spec = DsoSpec.galaxy(center=(100.0, 140.0), scale=30.0, brightness=0.5, ellipticity=0.4, angle=0.7)
        _, annotation = render_scene(TINY_PROFILE, [spec], seed=4)

        self.assertEqual(len(annotation.objects), 1)
        inside = rasterize(annotation.objects[0].polygon, (256, 256))
        self.assertTrue(inside[140, 100])
        self.assertEqual(annotation.objects[0].label, "dso")

    def test_two_nebulae_two_polygons_matching_their_masks(self):

        specs = [
            DsoSpec.nebula(center=(60.0, 60.0), scale=25.0, brightness=0.5),
            DsoSpec.nebula(center=(190.0, 190.0), scale=30.0, brightness=0.4),
        ]
        _, annotation = render_scene(TINY_PROFILE, specs, seed=9, label_mode="kind")
        self.assertEqual(len(annotation.objects), 2)

        for obj, spec, i in zip(annotation.objects, specs, range(2)):
            _, mask = render_dso(spec, TINY_PROFILE, seed=derive_seed(9, "dso", i))
            self.assertLess(abs(polygon_area(obj.polygon) - mask.sum()) / mask.sum(), 0.05)
            self.assertEqual(obj.label, DsoKind.NEBULA.value)

    def test_overlapping_objects_share_a_polygon(self):

        specs = [
            DsoSpec.galaxy(center=(110.0, 128.0), scale=30.0, brightness=0.5),
            DsoSpec.galaxy(center=(140.0, 128.0), scale=30.0, brightness=0.5),
        ]
        _, annotation = render_scene(TINY_PROFILE, specs, seed=1)
        self.assertEqual(len(annotation.objects), 1)

    def test_random_scene_specs_stay_inside(self):

        rng = np.random.default_rng(0)
        for _ in range(20):
            specs = random_scene_specs(rng, TINY_PROFILE)
            self.assertTrue(1 <= len(specs) <= 3)
            for spec in specs:
                try:
                    spec.validate(TINY_PROFILE)
                except Exception as e:
                    self.fail(e)

    def test_random_objects_mix_every_kind(self):

        specs = random_dso_specs(np.random.default_rng(0), get_profile("desk"), 200)
        counts = Counter(spec.kind for spec in specs)

        self.assertTrue(all(isinstance(spec.kind, DsoKind) for spec in specs))
        self.assertEqual(set(counts), set(KINDS))
        for kind, weight in zip(KINDS, KIND_WEIGHTS):
            self.assertLess(abs(counts[kind] - weight * 200), 25)

    def test_invalid_label_mode(self):

        self.assertRaises(ConfigurationError, render_scene, TINY_PROFILE, [], 0, None, "colour")

class TestDataset(unittest.TestCase):

    def test_split_sizes(self):

        self.assertEqual(split_sizes(5000), (4000, 500, 500))
        self.assertEqual(split_sizes(100), (80, 10, 10))
        self.assertEqual(split_sizes(10), (8, 1, 1))
        self.assertEqual(sum(split_sizes(37)), 37)

    def test_label_threshold(self):

        mask = np.zeros((PATCH_SIZE, PATCH_SIZE), dtype=bool)
        needed = int(math.ceil(MIN_VISIBLE_FRACTION * mask.size))
        mask.ravel()[:needed - 1] = True
        self.assertEqual(label_for(mask), Label.DSO_ABSENT)
        mask.ravel()[:needed] = True
        self.assertEqual(label_for(mask), Label.DSO_PRESENT)
        self.assertEqual(label_for(None), Label.DSO_ABSENT)

    def test_balanced_sound_and_disjoint(self):

        split = tiny_split()
        counts = split.counts()

        self.assertEqual([counts[k]["total"] for k in ("train", "val", "test")], [16, 2, 2])
        for name, patches in split.parts().items():
            present = counts[name]["present"]
            self.assertLessEqual(abs(present - counts[name]["absent"]), 1)
            for patch in patches:
                self.assertEqual(patch.pixels.shape, (PATCH_SIZE, PATCH_SIZE, 3))
                self.assertEqual(label_for(patch.truth_mask), patch.label)

        seen = [id(p) for patches in split.parts().values() for p in patches]
        self.assertEqual(len(seen), len(set(seen)))

    def test_same_seed_same_dataset(self):

        logger = FakeLogger()
        a = build_dataset(10, TINY_PROFILE, seed=8, crops_per_frame=4, logger=logger)
        b = build_dataset(10, TINY_PROFILE, seed=8, crops_per_frame=4)
        for pa, pb in zip(a.train + a.val + a.test, b.train + b.val + b.test):
            self.assertTrue(np.array_equal(pa.pixels, pb.pixels))
            self.assertEqual(pa.label, pb.label)
        self.assertEqual(len(logger.infos), 1)

    def test_desk_profile_fills_a_balanced_dataset(self):

        split = build_dataset(200, get_profile("desk"), seed=0)
        counts = split.counts()

        self.assertEqual([counts[k]["total"] for k in ("train", "val", "test")], [160, 20, 20])
        for name in ("train", "val", "test"):
            self.assertLessEqual(abs(counts[name]["present"] - counts[name]["absent"]), 1)

    def test_invalid_dataset_requests(self):

        self.assertRaises(ConfigurationError, build_dataset, 9, TINY_PROFILE, 0)
        self.assertRaises(ConfigurationError, build_dataset, 10, InstrumentProfile(width=100, height=100, full_frame=False), 0)

    def test_written_dataset_loads_back(self):

        split = tiny_split()
        with tempfile.TemporaryDirectory() as tmp:
            manifest = write_dataset(split, Path(tmp) / "dataset")
            loaded = load_dataset(manifest)

            self.assertEqual(loaded.counts(), split.counts())
            self.assertEqual(loaded.seed, split.seed)
            for original, restored in zip(split.train, loaded.train):
                self.assertTrue(np.array_equal(original.pixels, restored.pixels))
                self.assertTrue(np.array_equal(original.truth_mask, restored.truth_mask))
                self.assertEqual(original.label, restored.label)

            (Path(tmp) / "other.json").write_text('{"format": "other"}', encoding="utf-8")
            self.assertRaises(ArtifactIOError, load_dataset, Path(tmp) / "other.json")
