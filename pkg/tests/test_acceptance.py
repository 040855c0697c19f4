"""
End-to-end checks at desk scale. The heavy ones train on 5000 patches and
run detection on 1120 x 1120 scenes; they only run with
DSOLOCATE_ACCEPTANCE=1 in the environment.
"""
import os
import tempfile
import unittest
import numpy as np
import torch

from contextlib import redirect_stderr, redirect_stdout
from functools import lru_cache
from io import StringIO
from pathlib import Path
from dsolocate.cli import EXIT_OK, main
from dsolocate.evaluation import compute_map, evaluate, match_detections
from dsolocate.geometry import Contour, ContourSet
from dsolocate.model import (
    INPUT_SHAPE, TrainingConfig, classification_report, evaluate_accuracy, input_gradient, logits, train,
)
from dsolocate.pipeline import DetectConfig, detect, detect_baseline, stitch, tile
from dsolocate.synthgen import Label, build_dataset, get_profile, random_scene_specs, render_scene
from dsolocate.utils import derive_seed
from dsolocate.xrai import Baseline, integrated_gradients
from tests.test_evaluation import ap_oracle, greedy_oracle, square, truth_of

ACCEPTANCE = os.environ.get("DSOLOCATE_ACCEPTANCE") == "1"

heavy = unittest.skipUnless(ACCEPTANCE, "set DSOLOCATE_ACCEPTANCE=1 to run desk-scale acceptance checks")

DESK = get_profile("desk")

@lru_cache(maxsize=None)
def desk_split():
    return build_dataset(5000, DESK, seed=0)

@lru_cache(maxsize=None)
def desk_model():
    return train(desk_split(), TrainingConfig(epochs=15, early_stop=3, seed=0))

def scenes(count: int, seed: int, max_count: int = 3):
    suite = {}
    for i in range(count):
        rng = np.random.default_rng(derive_seed(seed, "scene", i))
        image_id = f"scene_{i:03d}"
        image, annotation = render_scene(
            DESK, random_scene_specs(rng, DESK, max_count=max_count), derive_seed(seed, "scene-render", i), image_id=image_id,
        )
        suite[image_id] = (image, annotation)
    return suite

class TestMapOracle(unittest.TestCase):

    def test_map_equals_the_brute_force_oracle(self):

        rng = np.random.default_rng(10)
        for _ in range(1000):
            truths, preds, hits, n_truths = {}, {}, [], 0
            for image in ("a", "b"):
                truth = truth_of(*[
                    square(int(rng.integers(0, 40)), int(rng.integers(0, 40)), int(rng.integers(5, 20)))
                    for _ in range(int(rng.integers(0, 3)))
                ], image=image)
                contours = [
                    Contour(
                        polygon=square(int(rng.integers(0, 40)), int(rng.integers(0, 40)), int(rng.integers(5, 20))),
                        confidence=float(rng.integers(0, 5)) / 4,
                    )
                    for _ in range(int(rng.integers(0, 3)))
                ]
                pred = ContourSet(width=64, height=64, contours=contours, image=image)
                truths[image], preds[image] = truth, pred
                n_truths += len(truth)
                matched = {i for i, _ in greedy_oracle(pred, truth, 0.5)}
                hits += [(-c.confidence, image, i, i in matched) for i, c in enumerate(contours)]

            hits.sort(key=lambda h: h[:3])
            expected = ap_oracle([h[3] for h in hits], n_truths) if n_truths else 0.0
            self.assertAlmostEqual(compute_map(preds, truths), expected, delta=1e-9)

class TestStitchProperties(unittest.TestCase):

    def test_stitched_slots_keep_their_heatmaps(self):

        rng = np.random.default_rng(11)
        for _ in range(100):
            size = int(rng.integers(4, 17))
            image = np.zeros((int(rng.integers(1, 60)), int(rng.integers(1, 60)), 3), dtype=np.float32)
            grid = tile(image, overlap=0, patch_size=size)
            selected = [s for s in grid.slots if rng.random() < 0.6]
            heatmaps = {s.index: rng.normal(size=(size, size)) for s in selected}

            stitched = stitch(heatmaps, grid)
            self.assertEqual(stitched.shape, image.shape[:2])
            for slot in grid.slots:
                h = min(size, grid.height - slot.y)
                w = min(size, grid.width - slot.x)
                if h <= 0 or w <= 0:
                    continue
                region = stitched[slot.y:slot.y + h, slot.x:slot.x + w]
                expected = heatmaps[slot.index][:h, :w] if slot.index in heatmaps else np.zeros((h, w))
                self.assertTrue(np.array_equal(region, expected))

class TestTilingArithmetic(unittest.TestCase):

    def test_3584_square_frame_is_256_slots(self):

        grid = tile(np.zeros((3584, 3584, 3), dtype=np.float32))
        self.assertEqual((grid.rows, grid.cols, len(grid)), (16, 16, 256))
        self.assertEqual((grid.padded_height, grid.padded_width), (3584, 3584))

@heavy
class TestClassifier(unittest.TestCase):

    def test_validation_accuracy(self):

        params, history = desk_model()
        split = desk_split()
        val = evaluate_accuracy(params, split.val)
        test = evaluate_accuracy(params, split.test)
        report = classification_report(params, split.test)

        self.assertGreaterEqual(val, 0.90)
        self.assertLessEqual(abs(val - test), 0.03)
        self.assertGreaterEqual(report[Label.DSO_PRESENT.value]["recall"], 0.90)
        self.assertLess(history.records[-1].train_loss, history.records[0].train_loss)

    def test_gradient_matches_central_differences(self):

        params = desk_model()[0].astype(torch.float64)
        rng = np.random.default_rng(12)
        h = 1e-3
        worst, checked = 0.0, 0
        for patch in desk_split().test[:10]:
            x = np.clip(patch.intensities.astype(np.float64), 2 * h, 1 - 2 * h)
            gradient = input_gradient(params, x)
            candidates = np.argwhere(np.abs(gradient) > 1e-6)
            for y, xx, c in candidates[rng.choice(len(candidates), size=min(10, len(candidates)), replace=False)]:
                estimates = []
                for step in (h, h / 2):
                    batch = np.repeat(x[None], 2, axis=0)
                    batch[0, y, xx, c] += step
                    batch[1, y, xx, c] -= step
                    up, down = logits(params, batch)
                    estimates.append((up - down) / (2 * step))
                if abs(estimates[0] - estimates[1]) > 1e-4 * abs(gradient[y, xx, c]):
                    continue
                checked += 1
                worst = max(worst, abs(estimates[0] - gradient[y, xx, c]) / abs(gradient[y, xx, c]))

        self.assertGreater(checked, 0)
        self.assertLessEqual(worst, 1e-3)

    def test_integrated_gradients_completeness(self):

        params = desk_model()[0].astype(torch.float64)
        rng = np.random.default_rng(13)
        patches = desk_split().test
        for k in rng.choice(len(patches), size=20, replace=False):
            x = patches[int(k)].intensities.astype(np.float64)
            for baseline in ("black", "white"):
                b = Baseline(baseline).image(INPUT_SHAPE)
                total = integrated_gradients(params, x, baseline, steps=128).scores.sum()
                f_x, f_b = logits(params, np.stack([x, b]))
                self.assertLessEqual(abs(total - (f_x - f_b)), 0.02 * abs(f_x - f_b) + 1e-4)

@heavy
class TestLocalization(unittest.TestCase):

    def test_detection_beats_the_baseline(self):

        params, _ = desk_model()
        suite = scenes(10, seed=100)
        truths = {k: annotation for k, (_, annotation) in suite.items()}
        predicted, baseline = {}, {}
        for image_id, (image, _) in suite.items():
            _, contours, stats = detect(image, params, DetectConfig())
            self.assertLessEqual(stats.attribution_calls, stats.slot_count)
            predicted[image_id] = contours
            baseline[image_id], _ = detect_baseline(image)

        report = evaluate(predicted, truths)
        baseline_map = compute_map(baseline, truths)
        self.assertGreaterEqual(report.map, 0.5)
        self.assertGreater(report.recall, 0.3)
        self.assertGreater(report.map, baseline_map)
        for image_id, contours in predicted.items():
            for m in match_detections(contours, truths[image_id]).matches:
                self.assertGreaterEqual(m.iou, 0.5)

    def test_patch_skipping_saves_attributions(self):

        params, _ = desk_model()
        suite = scenes(10, seed=200, max_count=1)
        truths = {k: annotation for k, (_, annotation) in suite.items()}
        outcome = {}
        for threshold in (0.0, 0.5):
            calls, predicted = 0, {}
            for image_id, (image, _) in suite.items():
                _, contours, stats = detect(image, params, DetectConfig(select_threshold=threshold))
                calls += stats.attribution_calls
                predicted[image_id] = contours
            outcome[threshold] = (calls, compute_map(predicted, truths))

        self.assertLessEqual(outcome[0.5][0], 0.6 * outcome[0.0][0])
        self.assertLessEqual(outcome[0.0][1] - outcome[0.5][1], 0.05)

@heavy
class TestDeterminism(unittest.TestCase):

    @staticmethod
    def pipeline(out: Path):
        def call(argv):
            with redirect_stdout(StringIO()), redirect_stderr(StringIO()):
                return main(argv + ["--seed", "7", "--jobs", "1", "-q"])

        codes = [
            call(["generate", "--n", "100", "--scenes", "1", "--out", str(out / "gen")]),
            call(["train", "--manifest", str(out / "gen" / "dataset" / "manifest.json"), "--epochs", "2", "--out", str(out / "model")]),
            call(["detect", str(out / "gen" / "scenes" / "scene_000.png"), "--checkpoint", str(out / "model" / "checkpoint.json"),
                  "--ig-steps", "8", "--out", str(out / "detect")]),
        ]
        return codes, [
            (out / "gen" / "dataset" / "manifest.json").read_bytes(),
            (out / "model" / "checkpoint.json").read_bytes(),
            (out / "detect" / "scene_000_contours.json").read_bytes(),
        ]

    def test_fixed_seed_runs_are_byte_identical(self):

        with tempfile.TemporaryDirectory() as tmp:
            codes_a, first = self.pipeline(Path(tmp) / "a")
            codes_b, second = self.pipeline(Path(tmp) / "b")

        self.assertEqual(codes_a + codes_b, [EXIT_OK] * 6)
        for a, b in zip(first, second):
            self.assertEqual(a, b)
