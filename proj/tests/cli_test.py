"""Command-line behaviour of the rflow tool.

Usage: cli_test.py <rflow binary> <source dir> <scratch dir>
"""

import json
import os
import shutil
import subprocess
import sys
import unittest
from pathlib import Path

import jsonschema

TOOL = SOURCE = SCRATCH = None

TARGET = {"weights": [0.5, 0.5], "means": [[-2.0, -1.0], [2.0, 1.0]], "variances": [0.25, 0.25]}


def run(*args, env=None):
    full_env = dict(os.environ)
    for key in ("RFLOW_OUT", "RFLOW_THREADS"):
        full_env.pop(key, None)
    full_env.update(env or {})
    return subprocess.run([str(TOOL), *map(str, args)], capture_output=True, text=True, env=full_env)


def write_config(path, body):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(body, indent=2))
    return path


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class CliTest(unittest.TestCase):
    def setUp(self):
        self.dir = SCRATCH / self._testMethodName
        shutil.rmtree(self.dir, ignore_errors=True)
        self.dir.mkdir(parents=True)

    def check_ok(self, proc):
        self.assertEqual(proc.returncode, 0, proc.stderr)

    def train_config(self, iterations=0, **train):
        body = {"seed": 3, "target": TARGET, "model": {"hidden": [8]},
                "train": {"iterations": iterations, "batch": 16, **train}}
        return write_config(self.dir / "train.json", body)

    def test_missing_config_is_config_error(self):
        proc = run("train", "--config", self.dir / "absent.json", "--out", self.dir / "out")
        self.assertEqual(proc.returncode, 2)
        self.assertIn("cannot open config file", proc.stderr)

    def test_malformed_json_is_config_error(self):
        cfg = self.dir / "bad.json"
        cfg.write_text("{ not json")
        self.assertEqual(run("train", "--config", cfg, "--out", self.dir / "out").returncode, 2)

    def test_unknown_key_is_config_error(self):
        cfg = write_config(self.dir / "c.json", {"target": TARGET, "train": {"iterations": 0, "itrations": 5}})
        proc = run("train", "--config", cfg, "--out", self.dir / "out")
        self.assertEqual(proc.returncode, 2)
        self.assertIn("train.itrations", proc.stderr)

    def test_unknown_top_level_section(self):
        cfg = write_config(self.dir / "c.json", {"target": TARGET, "trian": {}})
        self.assertEqual(run("train", "--config", cfg, "--out", self.dir / "out").returncode, 2)

    def test_missing_subcommand(self):
        self.assertEqual(run().returncode, 2)

    def test_zero_iteration_train_writes_init_and_manifest(self):
        out = self.dir / "out"
        self.check_ok(run("train", "--config", self.train_config(), "--out", out))
        manifest = json.loads((out / "manifest.json").read_text())
        self.assertEqual(manifest["command"], "train")
        self.assertEqual(manifest["iterations"], 0)
        self.assertIn("checkpoint.rfpp", manifest["files"])
        self.assertEqual((out / "loss.csv").read_text(), "iteration,loss\n")
        self.assertTrue((out / "checkpoint.rfpp").read_bytes().startswith(b"RFPP1"))
        resolved = json.loads((out / "config.json").read_text())
        self.assertEqual(resolved["train"]["iterations"], 0)
        self.assertEqual(resolved["train"]["loss"]["premetric"], "squared_l2")
        self.assertFalse((out / ".rflow.lock").exists())

    def test_manifest_file_hashes_match_contents(self):
        out = self.dir / "out"
        self.check_ok(run("train", "--config", self.train_config(iterations=5), "--out", out))
        manifest = json.loads((out / "manifest.json").read_text())
        for rel, digest in manifest["files"].items():
            self.assertEqual(digest, fnv1a64_hex((out / rel).read_bytes()), rel)
        self.assertEqual(len((out / "loss.csv").read_text().splitlines()), 6)

    def test_rerun_is_byte_identical(self):
        cfg = self.train_config(iterations=20)
        self.check_ok(run("train", "--config", cfg, "--out", self.dir / "a"))
        self.check_ok(run("train", "--config", cfg, "--out", self.dir / "b", "--threads", "2"))
        self.assertEqual(tree_bytes(self.dir / "a"), tree_bytes(self.dir / "b"))

    def test_seed_override_changes_result_and_is_recorded(self):
        cfg = self.train_config(iterations=5)
        self.check_ok(run("train", "--config", cfg, "--out", self.dir / "a"))
        self.check_ok(run("train", "--config", cfg, "--out", self.dir / "b", "--seed", "99"))
        a = (self.dir / "a" / "checkpoint.rfpp").read_bytes()
        b = (self.dir / "b" / "checkpoint.rfpp").read_bytes()
        self.assertNotEqual(a, b)
        self.assertEqual(json.loads((self.dir / "b" / "config.json").read_text())["seed"], 99)

    def test_environment_sets_output_directory(self):
        cfg = self.train_config()
        out = self.dir / "from_env"
        self.check_ok(run("train", "--config", cfg, env={"RFLOW_OUT": str(out)}))
        self.assertTrue((out / "manifest.json").exists())
        # The command-line flag wins over the environment.
        flag = self.dir / "from_flag"
        self.check_ok(run("train", "--config", cfg, "--out", flag, env={"RFLOW_OUT": str(out / "x")}))
        self.assertTrue((flag / "manifest.json").exists())
        self.assertFalse((out / "x").exists())

    def test_bad_thread_environment_is_config_error(self):
        proc = run("train", "--config", self.train_config(), "--out", self.dir / "o", env={"RFLOW_THREADS": "many"})
        self.assertEqual(proc.returncode, 2)

    def test_locked_output_directory_is_io_error(self):
        out = self.dir / "out"
        out.mkdir()
        (out / ".rflow.lock").write_text("")
        proc = run("train", "--config", self.train_config(), "--out", out)
        self.assertEqual(proc.returncode, 4)
        self.assertIn("locked", proc.stderr)

    def test_divergent_training_is_numeric_failure(self):
        body = {"seed": 3, "target": {"weights": [1.0], "means": [[1e6, 1e6]], "variances": [1.0]},
                "model": {"hidden": [8]}, "train": {"iterations": 50, "batch": 16, "learning_rate": 10.0}}
        proc = run("train", "--config", write_config(self.dir / "c.json", body), "--out", self.dir / "out")
        self.assertEqual(proc.returncode, 3, proc.stderr)

    def test_sample_one_step_new_rule_uses_one_evaluation(self):
        body = {"seed": 4, "target": TARGET,
                "sample": {"field": {"kind": "analytic"}, "count": 50, "nfe": 1, "rule": "new"}}
        out = self.dir / "out"
        self.check_ok(run("sample", "--config", write_config(self.dir / "c.json", body), "--out", out))
        manifest = json.loads((out / "manifest.json").read_text())
        self.assertEqual(manifest["field_evaluations"], 1)
        self.assertEqual(manifest["nfe"], 1)
        lines = (out / "samples.csv").read_text().splitlines()
        self.assertEqual(lines[0], "x0,x1")
        self.assertEqual(len(lines), 51)

    def test_sample_heun_evaluation_count(self):
        body = {"target": TARGET,
                "sample": {"field": {"kind": "analytic"}, "count": 10, "nfe": 7, "solver": "heun",
                           "record_trajectory": True}}
        out = self.dir / "out"
        self.check_ok(run("sample", "--config", write_config(self.dir / "c.json", body), "--out", out))
        self.assertEqual(json.loads((out / "manifest.json").read_text())["field_evaluations"], 7)
        self.assertTrue((out / "trajectory.rftr").read_bytes().startswith(b"RFTR1"))

    def test_sample_bad_enum_lists_choices(self):
        body = {"target": TARGET, "sample": {"field": {"kind": "analytic"}, "solver": "rk4"}}
        proc = run("sample", "--config", write_config(self.dir / "c.json", body), "--out", self.dir / "out")
        self.assertEqual(proc.returncode, 2)
        self.assertIn("euler, heun", proc.stderr)

    def test_checkpoint_paths_resolve_against_config_directory(self):
        self.check_ok(run("train", "--config", self.train_config(iterations=3), "--out", self.dir / "trained"))
        body = {"sample": {"field": {"checkpoint": "trained/checkpoint.rfpp"}, "count": 5}}
        out = self.dir / "out"
        self.check_ok(run("sample", "--config", write_config(self.dir / "s.json", body), "--out", out))
        self.assertTrue(json.loads((out / "manifest.json").read_text())["model"].startswith("checkpoint:"))

    def test_missing_checkpoint_is_io_error(self):
        body = {"sample": {"field": {"checkpoint": "nowhere.rfpp"}}}
        proc = run("sample", "--config", write_config(self.dir / "s.json", body), "--out", self.dir / "out")
        self.assertEqual(proc.returncode, 4)

    def reflow_config(self):
        body = {"seed": 5, "target": TARGET, "model": {"hidden": [16, 16]},
                "reflow": {"rounds": 2, "pairs": 300, "pair_nfe": 8,
                           "first": {"iterations": 30, "batch": 32},
                           "later": {"iterations": 30, "batch": 32, "timesteps": {"kind": "u_shaped"}},
                           "evaluation": {"samples": 200, "trajectories": 40}}}
        return write_config(self.dir / "reflow.json", body)

    def test_reflow_two_rounds_artifacts_and_reproducibility(self):
        cfg = self.reflow_config()
        a, b = self.dir / "a", self.dir / "b"
        self.check_ok(run("reflow", "--config", cfg, "--out", a))
        for rel in ["manifest.json", "config.json", "reflow_summary.json", "stage_1/checkpoint.rfpp",
                    "stage_1/loss.csv", "stage_1/report.json", "stage_2/checkpoint.rfpp", "stage_2/pairs.rfpr",
                    "stage_2/report.json"]:
            self.assertTrue((a / rel).exists(), rel)
        self.assertFalse((a / "stage_1" / "pairs.rfpr").exists())
        summary = json.loads((a / "reflow_summary.json").read_text())
        self.assertEqual([s["stage"] for s in summary], [1, 2])
        self.assertEqual(summary[1]["pairs"], 300)
        self.assertEqual(summary[1]["pair_nfe"], 7)
        self.assertTrue((a / "stage_2" / "pairs.rfpr").read_bytes().startswith(b"RFPR1"))
        self.check_ok(run("reflow", "--config", cfg, "--out", b))
        self.assertEqual(tree_bytes(a), tree_bytes(b))

    def test_diagnose_report_validates_against_schema(self):
        schema = json.loads((SOURCE / "schemas" / "diagnostics_report.schema.json").read_text())
        base = {"seed": 6, "target": TARGET}
        pairs_dir = self.dir / "pairs"
        gen = {**base, "generate_pairs": {"field": {"kind": "analytic"}, "count": 400, "nfe": 15}}
        self.check_ok(run("generate-pairs", "--config", write_config(self.dir / "g.json", gen), "--out", pairs_dir))
        traj_dir = self.dir / "traj"
        smp = {**base, "sample": {"field": {"kind": "analytic"}, "count": 30, "nfe": 8, "record_trajectory": True}}
        self.check_ok(run("sample", "--config", write_config(self.dir / "s.json", smp), "--out", traj_dir))
        inv_dir = self.dir / "inv"
        inv = {**base, "invert": {"field": {"kind": "analytic"}, "nfe": 15, "count": 300}}
        self.check_ok(run("invert", "--config", write_config(self.dir / "i.json", inv), "--out", inv_dir))
        jsonschema.validate(json.loads((inv_dir / "report.json").read_text()), schema)

        diag = {**base, "diagnose": {"trajectory": "traj/trajectory.rftr",
                                     "field": {"kind": "analytic"},
                                     "reconstruction_nfe": [1, 2], "reconstruction_count": 100,
                                     "sw_count": 200, "sw_projections": 16,
                                     "probe_pairs": "pairs/pairs.rfpr", "probes": 500,
                                     "inverted_pairs": "inv/inverted.rfpr"}}
        out = self.dir / "diag"
        self.check_ok(run("diagnose", "--config", write_config(self.dir / "d.json", diag), "--out", out))
        report = json.loads((out / "report.json").read_text())
        jsonschema.validate(report, schema)
        for key in ["straightness", "sliced_wasserstein", "probe", "noise"]:
            self.assertIsNotNone(report[key], key)
        self.assertEqual([r["nfe"] for r in report["reconstruction"]], [1, 2])
        self.assertEqual(report["metadata"]["sample_counts"]["probe"], 500)
        self.assertTrue((out / "reconstruction.csv").read_text().startswith("nfe,mse,count\n"))
        self.assertTrue((out / "probe_histogram.csv").exists())

    def test_diagnose_trajectory_only(self):
        schema = json.loads((SOURCE / "schemas" / "diagnostics_report.schema.json").read_text())
        smp = {"target": TARGET, "sample": {"field": {"kind": "analytic"}, "count": 10, "nfe": 4,
                                            "record_trajectory": True}}
        self.check_ok(run("sample", "--config", write_config(self.dir / "s.json", smp), "--out", self.dir / "traj"))
        diag = {"diagnose": {"trajectory": "traj/trajectory.rftr"}}
        out = self.dir / "diag"
        self.check_ok(run("diagnose", "--config", write_config(self.dir / "d.json", diag), "--out", out))
        report = json.loads((out / "report.json").read_text())
        jsonschema.validate(report, schema)
        self.assertIsNone(report["probe"])
        self.assertEqual(report["straightness"]["count"], 10)

    def test_profile_loss_csv(self):
        body = {"seed": 8, "target": TARGET,
                "profile_loss": {"field": {"kind": "analytic"}, "bins": 5, "count": 500}}
        out = self.dir / "out"
        self.check_ok(run("profile-loss", "--config", write_config(self.dir / "p.json", body), "--out", out))
        lines = (out / "loss_profile.csv").read_text().splitlines()
        self.assertEqual(lines[0], "t_lo,t_hi,t,mean,stddev,count,lower_bound")
        self.assertEqual(len(lines), 6)


def fnv1a64_hex(data):
    h = 0xCBF29CE484222325
    for byte in data:
        h = ((h ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return f"{h:016x}"


if __name__ == "__main__":
    TOOL, SOURCE, SCRATCH = Path(sys.argv[1]), Path(sys.argv[2]), Path(sys.argv[3])
    SCRATCH.mkdir(parents=True, exist_ok=True)
    unittest.main(argv=[sys.argv[0], "-v"])
