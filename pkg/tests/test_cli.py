import json
import tempfile
import unittest
import numpy as np

from contextlib import redirect_stderr, redirect_stdout
from io import StringIO
from pathlib import Path
from dsolocate import io
from dsolocate.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_RUNTIME, build_parser, main
from dsolocate.evaluation import Annotation, AnnotatedObject, save_annotation
from dsolocate.model import save_checkpoint
from tests.helpers import brightness_model, disc, tiny_model

def quiet_main(argv) -> int:
    with redirect_stdout(StringIO()), redirect_stderr(StringIO()):
        return main(argv)

def square_annotation(image: str) -> Annotation:
    return Annotation(
        image=image,
        width=64,
        height=64,
        objects=[AnnotatedObject(label="dso", polygon=[[9.5, 9.5], [29.5, 9.5], [29.5, 29.5], [9.5, 29.5]])],
    )

class TestParser(unittest.TestCase):

    def test_flags_map_to_config_fields(self):

        args = build_parser().parse_args(["train", "--lr", "0.01", "--batch-size", "4", "-vv"])
        self.assertEqual((args.learning_rate, args.batch_size, args.verbose), (0.01, 4, 2))
        self.assertIsNone(args.epochs)

        args = build_parser().parse_args(["bench", "--thresholds", "0", "0.3", "--scales", "1"])
        self.assertEqual((args.thresholds, args.scales), ([0.0, 0.3], [1.0]))

        args = build_parser().parse_args(["detect", "a.png", "b.png", "--baseline", "-q"])
        self.assertEqual((args.images, args.baseline, args.verbose), (["a.png", "b.png"], True, 0))

    def test_unknown_subcommand_is_a_usage_error(self):

        with redirect_stderr(StringIO()):
            with self.assertRaises(SystemExit) as raised:
                build_parser().parse_args(["serve"])
        self.assertEqual(raised.exception.code, 2)

class TestExitCodes(unittest.TestCase):

    def test_configuration_errors(self):

        with tempfile.TemporaryDirectory() as tmp:
            config = Path(tmp) / "run.json"
            config.write_text('{"colour": "red"}', encoding="utf-8")
            self.assertEqual(quiet_main(["detect", "x.png", "--config", str(config), "--out", tmp]), EXIT_CONFIG)
            self.assertEqual(quiet_main(["detect", "x.png", "--baseline", "--select-threshold", "2", "--out", tmp]), EXIT_CONFIG)
            self.assertEqual(quiet_main(["evaluate", "--truths", tmp, "--out", tmp]), EXIT_CONFIG)

            broken = Path(tmp) / "broken.json"
            broken.write_text('{"image": "a", "width": 0, "height": 10, "objects": []}', encoding="utf-8")
            self.assertEqual(quiet_main(["evaluate", "--predictions", str(broken), "--truths", str(broken), "--out", tmp]), EXIT_CONFIG)

    def test_io_errors(self):

        with tempfile.TemporaryDirectory() as tmp:
            self.assertEqual(quiet_main(["train", "--manifest", str(Path(tmp) / "missing.json"), "--out", tmp]), EXIT_IO)
            self.assertEqual(quiet_main(["detect", str(Path(tmp) / "missing.png"), "--baseline", "--out", tmp]), EXIT_IO)

            not_an_image = Path(tmp) / "text.png"
            not_an_image.write_text("hello", encoding="utf-8")
            self.assertEqual(quiet_main(["detect", str(not_an_image), "--baseline", "--out", tmp]), EXIT_IO)

    def test_runtime_errors(self):

        with tempfile.TemporaryDirectory() as tmp:
            save_annotation(Path(tmp) / "preds" / "x.json", square_annotation("x"))
            save_annotation(Path(tmp) / "truths" / "y.json", square_annotation("y"))
            code = quiet_main(["evaluate", "--predictions", str(Path(tmp) / "preds"), "--truths", str(Path(tmp) / "truths"), "--out", tmp])
        self.assertEqual(code, EXIT_RUNTIME)

class TestGenerate(unittest.TestCase):

    def test_same_seed_same_bytes(self):

        with tempfile.TemporaryDirectory() as tmp:
            outputs = [Path(tmp) / "a", Path(tmp) / "b"]
            for out in outputs:
                self.assertEqual(quiet_main(["generate", "--n", "10", "--scenes", "1", "--seed", "4", "--out", str(out), "-q"]), EXIT_OK)

            manifests = [(out / "dataset" / "manifest.json").read_bytes() for out in outputs]
            scenes = [(out / "scenes" / "scene_000.json").read_bytes() for out in outputs]
            images = [(out / "scenes" / "scene_000.png").read_bytes() for out in outputs]
            manifest = json.loads(manifests[0])
            echoed = json.loads((outputs[0] / "run_config.json").read_text(encoding="utf-8"))

        self.assertEqual(manifests[0], manifests[1])
        self.assertEqual(scenes[0], scenes[1])
        self.assertEqual(images[0], images[1])
        self.assertEqual(len(manifest["patches"]), 10)
        self.assertEqual(manifest["seed"], 4)
        self.assertEqual(echoed["seed"], 4)

class TestTrain(unittest.TestCase):

    def test_one_epoch(self):

        with tempfile.TemporaryDirectory() as tmp:
            data, out = Path(tmp) / "data", Path(tmp) / "model"
            self.assertEqual(quiet_main(["generate", "--n", "10", "--scenes", "0", "--out", str(data), "-q"]), EXIT_OK)
            code = quiet_main(["train", "--manifest", str(data / "dataset" / "manifest.json"), "--epochs", "1", "--out", str(out), "-q"])
            self.assertEqual(code, EXIT_OK)

            history = (out / "history.jsonl").read_text(encoding="utf-8").splitlines()
            summary = json.loads((out / "train.json").read_text(encoding="utf-8"))
            echoed = json.loads((out / "run_config.json").read_text(encoding="utf-8"))
            self.assertTrue((out / "checkpoint.json").is_file())

        self.assertEqual(len(history), 1)
        self.assertEqual(summary["epochs"], 1)
        self.assertEqual(len(summary["digest"]), 64)
        self.assertEqual(echoed["training"]["epochs"], 1)
        self.assertEqual(echoed["training"]["learning_rate"], 0.001)
        self.assertEqual(echoed["training"]["batch_size"], 16)

    def test_divergence_exits_as_a_runtime_error(self):

        with tempfile.TemporaryDirectory() as tmp:
            data, out = Path(tmp) / "data", Path(tmp) / "model"
            self.assertEqual(quiet_main(["generate", "--n", "10", "--scenes", "0", "--out", str(data), "-q"]), EXIT_OK)
            code = quiet_main([
                "train", "--manifest", str(data / "dataset" / "manifest.json"), "--epochs", "2",
                "--lr", "1e38", "--out", str(out), "-q",
            ])
            self.assertFalse((out / "checkpoint.json").exists())

        self.assertEqual(code, EXIT_RUNTIME)

class TestDetect(unittest.TestCase):

    @staticmethod
    def frame() -> np.ndarray:
        image = np.full((224, 448, 3), 0.05)
        image[disc((224, 448), (300, 100), 40)] = 0.7
        image += np.random.default_rng(0).normal(0.0, 0.01, size=image.shape)
        return np.clip(image, 0.0, 1.0).astype(np.float32)

    def test_baseline_detection(self):

        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "frame.png"
            io.save_image(path, self.frame())
            out = Path(tmp) / "out"
            self.assertEqual(quiet_main(["detect", str(path), "--baseline", "--out", str(out), "-q"]), EXIT_OK)

            summary = json.loads((out / "detect.json").read_text(encoding="utf-8"))
            contours = json.loads((out / "frame_contours.json").read_text(encoding="utf-8"))
            self.assertTrue((out / "frame_annotated.png").is_file())
            self.assertFalse((out / "frame_heatmap.png").exists())

        self.assertEqual(summary["images"]["frame"]["mode"], "baseline")
        self.assertEqual(contours["image"], "frame")
        self.assertGreaterEqual(len(contours["objects"]), 1)

    def test_zero_threshold_attributes_every_slot(self):

        params, history = tiny_model()
        with tempfile.TemporaryDirectory() as tmp:
            checkpoint = Path(tmp) / "checkpoint.json"
            save_checkpoint(params, checkpoint, history)
            path = Path(tmp) / "frame.png"
            io.save_image(path, self.frame())
            out = Path(tmp) / "out"

            code = quiet_main([
                "detect", str(path), "--checkpoint", str(checkpoint), "--select-threshold", "0",
                "--ig-steps", "4", "--out", str(out), "-q",
            ])
            self.assertEqual(code, EXIT_OK)
            stats = json.loads((out / "frame_stats.json").read_text(encoding="utf-8"))
            self.assertTrue((out / "frame_heatmap.png").is_file())
            self.assertTrue((out / "frame_heatmap.json").is_file())

            small = Path(tmp) / "small.png"
            io.save_image(small, np.zeros((100, 100, 3), dtype=np.float32))
            self.assertEqual(quiet_main(["detect", str(small), "--checkpoint", str(checkpoint), "--out", str(out)]), EXIT_CONFIG)

        self.assertEqual(stats["slot_count"], 2)
        self.assertEqual(stats["attribution_calls"], stats["slot_count"])
        self.assertEqual(stats["gradient_evaluations"], 2 * 4 * 2)

class TestEvaluate(unittest.TestCase):

    def test_identical_and_empty_predictions(self):

        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            save_annotation(root / "truths" / "a.json", square_annotation("a"))
            save_annotation(root / "preds" / "a.json", square_annotation("a"))
            (root / "none").mkdir()

            with redirect_stdout(StringIO()) as printed:
                code = main(["evaluate", "--predictions", str(root / "preds"), "--truths", str(root / "truths"), "--out", str(root / "same"), "-q"])
            self.assertEqual(code, EXIT_OK)
            same = json.loads((root / "same" / "report.json").read_text(encoding="utf-8"))
            self.assertTrue((root / "same" / "report.txt").is_file())

            code = quiet_main(["evaluate", "--predictions", str(root / "none"), "--truths", str(root / "truths"), "--out", str(root / "empty")])
            self.assertEqual(code, EXIT_OK)
            empty = json.loads((root / "empty" / "report.json").read_text(encoding="utf-8"))

        self.assertEqual((same["map"], same["precision"], same["recall"]), (1.0, 1.0, 1.0))
        self.assertIn("mAP", printed.getvalue())
        self.assertEqual((empty["map"], empty["precision"], empty["recall"]), (0.0, 0.0, 0.0))
        self.assertEqual(empty["counts"]["fn"], 1)

class TestBench(unittest.TestCase):

    @staticmethod
    def scene() -> np.ndarray:
        image = np.full((448, 448, 3), 0.04, dtype=np.float32)
        image[disc((448, 448), (112, 112), 50)] = 0.9
        return image

    def test_rows_cover_every_setting(self):

        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            checkpoint = root / "checkpoint.json"
            save_checkpoint(brightness_model(level=0.1), checkpoint)
            for name in ("scene_a", "scene_b"):
                io.save_image(root / "scenes" / f"{name}.png", self.scene())
                save_annotation(root / "scenes" / f"{name}.json", Annotation(
                    image=name,
                    width=448,
                    height=448,
                    objects=[AnnotatedObject(label="dso", polygon=[[62.5, 62.5], [161.5, 62.5], [161.5, 161.5], [62.5, 161.5]])],
                ))

            code = quiet_main([
                "bench", "--checkpoint", str(checkpoint), "--scenes-dir", str(root / "scenes"),
                "--thresholds", "0", "0.5", "--scales", "1", "0.5", "--ig-steps", "4",
                "--out", str(root / "bench"), "-q",
            ])
            self.assertEqual(code, EXIT_OK)
            summary = json.loads((root / "bench" / "bench.json").read_text(encoding="utf-8"))
            self.assertTrue((root / "bench" / "bench.txt").is_file())

        rows = {(row["select_threshold"], row["scale"]): row for row in summary["rows"]}
        self.assertEqual(len(summary["rows"]), 4)
        self.assertEqual(set(rows), {(0.0, 1.0), (0.0, 0.5), (0.5, 1.0), (0.5, 0.5)})
        self.assertEqual(summary["scenes"], ["scene_a", "scene_b"])
        self.assertEqual(summary["rows"][0]["map_delta"], 0.0)
        for scale in (1.0, 0.5):
            self.assertLess(rows[(0.5, scale)]["attribution_calls"], rows[(0.0, scale)]["attribution_calls"])
        for threshold in (0.0, 0.5):
            self.assertLess(rows[(threshold, 0.5)]["slot_count"], rows[(threshold, 1.0)]["slot_count"])
        self.assertEqual(rows[(0.0, 1.0)]["slot_count"], 8)
