# Copyright 2026 The AtomForge Authors. All Rights Reserved.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#    http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""End-to-end tests of the atomforge command line tool."""

import argparse
import csv
import hashlib
import json
import random
import shutil
import subprocess
import sys
import tempfile
import unittest
from pathlib import Path

import jsonschema

BINARY = None
SCHEMAS = None
CONFIGS = None


def schema(name):
    return json.loads((SCHEMAS / f"{name}.schema.json").read_text())


def run(*args, expect=0):
    proc = subprocess.run([str(BINARY), *map(str, args)], capture_output=True, text=True)
    if proc.returncode != expect:
        raise AssertionError(
            f"{' '.join(map(str, args))}: exit {proc.returncode}, expected {expect}\n"
            f"stdout:\n{proc.stdout}\nstderr:\n{proc.stderr}")
    return proc


def write_tokens(path, n, seed, vocab=128):
    rng = random.Random(seed)
    path.write_text("".join(f"{rng.randrange(vocab)}\n" for _ in range(n)))
    return path


class CliTest(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = Path(tempfile.mkdtemp(prefix="atomforge_cli_"))
        cls.model = CONFIGS / "toy.json"
        cls.calib_tokens = write_tokens(cls.tmp / "calib.txt", 512, 1)
        cls.eval_tokens = write_tokens(cls.tmp / "eval.txt", 192, 2)
        run("calibrate", "--model", cls.model, "--tokens", cls.calib_tokens, "--k", 16, "--out", cls.tmp / "calib")
        run("quantize", "--fp-model", cls.model, "--calib", cls.tmp / "calib", "--bits", "w4a4", "--group", 16,
            "--out", cls.tmp / "bundle")

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp, ignore_errors=True)

    def check_report(self, out_dir, name):
        report = json.loads((out_dir / "report.json").read_text())
        jsonschema.validate(report, schema(name))
        manifest = json.loads((out_dir / "manifest.json").read_text())
        jsonschema.validate(manifest, schema("manifest"))
        for entry in manifest["outputs"]:
            digest = hashlib.sha256((out_dir / entry["path"]).read_bytes()).hexdigest()
            self.assertEqual(digest, entry["sha256"], entry["path"])
        return report, manifest

    def check_error(self, proc, category):
        record = json.loads(proc.stderr.strip().splitlines()[-1])
        jsonschema.validate(record, schema("error"))
        self.assertEqual(record["error"]["category"], category)

    def test_help(self):
        self.assertIn("calibrate", run("--help").stdout)

    def test_calibrate_outputs(self):
        report, manifest = self.check_report(self.tmp / "calib", "calibrate")
        self.assertEqual(report["k"], 16)
        self.assertEqual(len(report["sites"]), 8)
        for site in report["sites"]:
            self.assertEqual(len(site["outliers"]), 16)
            self.assertTrue((self.tmp / "calib" / site["plan"]).exists())
            self.assertTrue((self.tmp / "calib" / site["hessian"]).exists())
        self.assertEqual(manifest["resolved_config"]["k"], 16)

    def test_quantize_outputs(self):
        report, manifest = self.check_report(self.tmp / "bundle", "quantize")
        self.assertEqual(report["bits"], "w4a4")
        self.assertTrue((self.tmp / "bundle" / "bundle.json").exists())
        hashes = {Path(e["path"]).name: e["sha256"] for e in manifest["inputs"]}
        self.assertIn("tokens.txt", hashes)

    def test_quantize_is_deterministic(self):
        out = self.tmp / "bundle_again"
        run("quantize", "--fp-model", self.model, "--calib", self.tmp / "calib", "--bits", "w4a4", "--group", 16,
            "--out", out)
        first = json.loads((self.tmp / "bundle" / "manifest.json").read_text())["outputs"]
        second = json.loads((out / "manifest.json").read_text())["outputs"]
        self.assertEqual(first, second)

    def test_eval_bundle_prefill_and_decode_agree(self):
        out = self.tmp / "eval_prefill"
        run("eval-ppl", "--model", self.tmp / "bundle", "--tokens", self.eval_tokens, "--out", out)
        prefill, _ = self.check_report(out, "eval-ppl")
        out = self.tmp / "eval_decode"
        run("eval-ppl", "--model", self.tmp / "bundle", "--tokens", self.eval_tokens, "--mode", "decode", "--out", out)
        decode, _ = self.check_report(out, "eval-ppl")
        self.assertAlmostEqual(prefill["perplexity"], decode["perplexity"], delta=1e-3 * prefill["perplexity"])
        self.assertGreater(prefill["mean_kl"], 0.0)

    def test_eval_fp_config(self):
        out = self.tmp / "eval_fp"
        run("eval-ppl", "--model", self.model, "--tokens", self.eval_tokens, "--out", out)
        report, _ = self.check_report(out, "eval-ppl")
        self.assertEqual(report["perplexity"], report["fp_perplexity"])
        self.assertNotIn("mean_kl", report)

    def test_refuses_non_empty_output(self):
        proc = run("quantize", "--fp-model", self.model, "--calib", self.tmp / "calib", "--group", 16,
                   "--out", self.tmp / "bundle", expect=2)
        self.check_error(proc, "argument")

    def test_calibrate_without_tokens_is_usage_error(self):
        proc = run("calibrate", "--model", self.model, "--out", self.tmp / "never", expect=2)
        self.check_error(proc, "argument")

    def test_k_larger_than_hidden_is_usage_error(self):
        proc = run("calibrate", "--model", self.model, "--tokens", self.calib_tokens, "--k", 129,
                   "--out", self.tmp / "never_k", expect=2)
        self.check_error(proc, "shape")

    def test_unknown_bits(self):
        run("quantize", "--fp-model", self.model, "--calib", self.tmp / "calib", "--bits", "w5a5",
            "--out", self.tmp / "never_bits", expect=2)

    def test_malformed_tokens(self):
        bad = self.tmp / "bad.txt"
        bad.write_text("1\n2\nthree\n")
        proc = run("eval-ppl", "--model", self.model, "--tokens", bad, expect=2)
        self.check_error(proc, "parse")

    def test_token_outside_vocabulary(self):
        bad = self.tmp / "big.txt"
        bad.write_text("1\n2\n999\n")
        proc = run("eval-ppl", "--model", self.model, "--tokens", bad, expect=2)
        self.check_error(proc, "range")

    def test_missing_model(self):
        run("eval-ppl", "--model", self.tmp / "nope.json", "--tokens", self.eval_tokens, expect=2)

    def test_tampered_calibration_tokens(self):
        calib = self.tmp / "calib_tampered"
        shutil.copytree(self.tmp / "calib", calib)
        with open(calib / "tokens.txt", "a") as f:
            f.write("7\n")
        proc = run("quantize", "--fp-model", self.model, "--calib", calib, "--group", 16,
                   "--out", self.tmp / "never_tamper", expect=2)
        self.check_error(proc, "parse")

    def test_gemm_check(self):
        out = self.tmp / "gemm"
        run("gemm-check", "--trials", 40, "--seed", 3, "--out", out)
        report, _ = self.check_report(out, "gemm-check")
        self.assertTrue(report["passed"])
        self.assertEqual(len(report["cases"]), 40)
        self.assertLessEqual(report["max_rel_error"], 1e-4)

    def test_gemm_check_violation_exits_one(self):
        run("gemm-check", "--trials", 5, "--tolerance", 0, expect=1)

    def test_config_overrides_flags(self):
        cfg = self.tmp / "gemm_cfg.json"
        cfg.write_text(json.dumps({"trials": 7, "seed": 11}))
        out = self.tmp / "gemm_cfg_out"
        run("gemm-check", "--trials", 500, "--config", cfg, "--out", out)
        report, manifest = self.check_report(out, "gemm-check")
        self.assertEqual(report["trials"], 7)
        self.assertEqual(manifest["seed"], 11)

    def test_config_unknown_key(self):
        cfg = self.tmp / "bad_cfg.json"
        cfg.write_text(json.dumps({"trails": 7}))
        proc = run("gemm-check", "--config", cfg, expect=2)
        self.check_error(proc, "config")

    def test_simulate(self):
        out = self.tmp / "sim"
        run("simulate", "--hw", CONFIGS / "a100.json", "--scheme", "all", "--batch", 16, 64, "--requests", 64,
            "--fixed-memory", 24e9, "--out", out)
        report, _ = self.check_report(out, "simulate")
        mfb = report["max_feasible_batch"]
        self.assertGreater(mfb["w4a4"], mfb["w8a8"])
        self.assertGreater(mfb["w8a8"], mfb["fp16"])
        with open(out / "series.csv") as f:
            rows = list(csv.DictReader(f))
        self.assertEqual(len(rows), 8)
        for r in report["results"]:
            self.assertLessEqual(r["report"]["memory_high_water_bytes"], 24e9)

    def test_simulate_infeasible_memory(self):
        proc = run("simulate", "--scheme", "fp16", "--batch", 8, "--requests", 4, "--fixed-memory", 1e9, expect=1)
        self.check_error(proc, "infeasible")

    def test_roofline(self):
        out = self.tmp / "roof"
        run("roofline", "--hw", CONFIGS / "a100.json", "--batch", 512, "--out", out)
        report, _ = self.check_report(out, "roofline")
        by = {s["scheme"]: s for s in report["schemes"]}
        self.assertGreaterEqual(by["w4a4"]["dense_speedup_vs_fp16"], 2.0)
        self.assertLessEqual(by["w4a4"]["dense_speedup_vs_fp16"], 4.0)
        self.assertAlmostEqual(by["fp16"]["dense_speedup_vs_fp16"], 1.0)

    def test_ablate(self):
        out = self.tmp / "ablate"
        run("ablate", "--model", self.model, "--calib-len", 256, "--eval-len", 128, "--seed", 1, "--out", out)
        report, _ = self.check_report(out, "ablate")
        names = [r["name"] for r in report["rows"]]
        self.assertEqual(len(names), 8)
        self.assertTrue(names[-1].endswith("KV cache to INT4"))


def main():
    global BINARY, SCHEMAS, CONFIGS
    parser = argparse.ArgumentParser()
    parser.add_argument("--binary", required=True, type=Path)
    parser.add_argument("--schemas", required=True, type=Path)
    parser.add_argument("--configs", required=True, type=Path)
    args, rest = parser.parse_known_args()
    BINARY, SCHEMAS, CONFIGS = args.binary, args.schemas, args.configs
    unittest.main(argv=[sys.argv[0], "-v", *rest])


if __name__ == "__main__":
    main()
