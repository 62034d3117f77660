"""End-to-end checks of the dfmad command line: exit codes, outputs, determinism.

usage: test_cli.py <path-to-dfmad> <work-dir>
"""

import csv
import pathlib
import shutil
import subprocess
import sys
import unittest

BINARY = None
WORK = None
CONFIGS = pathlib.Path(__file__).resolve().parent.parent / "configs"
SMOKE = CONFIGS / "smoke.ini"


def run(*args):
    return subprocess.run([str(BINARY), *map(str, args)], capture_output=True, text=True)


def read(path):
    return pathlib.Path(path).read_bytes()


class ExitCodes(unittest.TestCase):
    def test_help_is_success(self):
        self.assertEqual(run("--help").returncode, 0)

    def test_missing_subcommand_is_validation(self):
        self.assertEqual(run().returncode, 2)

    def test_bad_override_is_validation(self):
        r = run("train", "-c", SMOKE, "-s", "train.epochs=-3", "-o", WORK / "bad", "-q")
        self.assertEqual(r.returncode, 2, r.stderr)
        self.assertIn("train.epochs", r.stderr)

    def test_missing_scores_is_io(self):
        r = run("metrics", "-i", WORK / "nope.csv", "-o", WORK / "m")
        self.assertNotEqual(r.returncode, 0)
        self.assertIn(r.returncode, (2, 3))

    def test_malformed_scores_is_validation(self):
        bad = WORK / "bad_scores.csv"
        bad.write_text("pair_id,label\nx,morph\n")
        self.assertEqual(run("metrics", "-i", bad, "-o", WORK / "m").returncode, 2)

    def test_eval_with_wrong_image_size_is_compatibility(self):
        out = WORK / "compat"
        r = run("train", "-c", SMOKE, "-o", out, "-q", "-s", "train.epochs=1")
        self.assertEqual(r.returncode, 0, r.stderr)
        model = out / "smoke" / "model"
        self.assertTrue(model.is_dir())
        r = run("eval", "-c", SMOKE, "-o", out, "-q", "-m", model, "-s", "model.image_size=32", "-s",
                "model.patch_size=16")
        self.assertEqual(r.returncode, 4, r.stderr)

    def test_single_tool_loo_is_protocol(self):
        r = run("protocol", "-c", SMOKE, "-o", WORK / "loo", "-q", "-p", "unknown_attack_loo", "-s",
                "data.loo_tools=landmark_like")
        self.assertEqual(r.returncode, 5, r.stderr)


class Training(unittest.TestCase):
    def test_one_epoch_trace_and_determinism(self):
        outs = []
        for name in ("a", "b"):
            out = WORK / ("det_" + name)
            r = run("train", "-c", SMOKE, "-o", out, "-q", "-s", "train.epochs=1")
            self.assertEqual(r.returncode, 0, r.stderr)
            outs.append(out / "smoke")
        with open(outs[0] / "train_log.csv") as f:
            rows = list(csv.reader(f))
        self.assertEqual(rows[0], ["epoch", "mean_loss"])
        self.assertEqual(len(rows), 2)
        for f in ("scores.csv", "report.txt", "det.csv"):
            self.assertEqual(read(outs[0] / f), read(outs[1] / f), f)

    def test_metrics_matches_train_report(self):
        out = WORK / "metrics_src"
        self.assertEqual(run("train", "-c", SMOKE, "-o", out, "-q", "-s", "train.epochs=1").returncode, 0)
        r = run("metrics", "-i", out / "smoke" / "scores.csv", "-o", WORK / "metrics_out")
        self.assertEqual(r.returncode, 0, r.stderr)
        self.assertEqual(read(out / "smoke" / "report.txt"), read(WORK / "metrics_out" / "report.txt"))

    def test_grid_marks_lowest_mean_d_eer(self):
        out = WORK / "grid"
        r = run("grid", "-c", SMOKE, "-o", out, "-q", "-s", "train.epochs=1")
        self.assertEqual(r.returncode, 0, r.stderr)
        with open(out / "smoke" / "grid.csv") as f:
            rows = [row for row in csv.DictReader(f) if row["status"] == "ok"]
        self.assertEqual(len(rows), 2)
        for row in rows:
            a, b = float(row["A_to_B_d_eer"]), float(row["B_to_A_d_eer"])
            self.assertAlmostEqual(float(row["mean_d_eer"]), (a + b) / 2, places=12)
        lowest = min(float(row["mean_d_eer"]) for row in rows)
        best = [row for row in rows if row["best"] == "true"]
        self.assertEqual(len(best), 1)
        self.assertEqual(float(best[0]["mean_d_eer"]), lowest)


if __name__ == "__main__":
    BINARY = pathlib.Path(sys.argv[1])
    WORK = pathlib.Path(sys.argv[2])
    shutil.rmtree(WORK, ignore_errors=True)
    WORK.mkdir(parents=True)
    unittest.main(argv=sys.argv[:1], verbosity=2)
