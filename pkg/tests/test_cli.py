import json

import pytest

from ckv.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, load_config, main


def run(*argv):
    return main([str(a) for a in argv])


class TestGenValidate:
    def test_gen_writes_trace_and_manifest(self, tmp_path):
        out = tmp_path / "t.ckvt"
        assert run("gen", "--T", 16, "--L", 2, "--H", 2, "--w-obs", 4,
                   "--out", out) == EXIT_OK
        assert out.exists()
        manifest = json.loads((tmp_path / "t.ckvt.manifest.json").read_text())
        assert manifest["subcommand"] == "gen"
        assert manifest["params"]["T"] == 16
        assert "config_hash" in manifest

    def test_validate_good_trace(self, tmp_path, capsys):
        out = tmp_path / "t.ckvt"
        run("gen", "--T", 16, "--L", 2, "--H", 2, "--w-obs", 4, "--out", out)
        assert run("validate", out) == EXIT_OK

    def test_validate_corrupt_trace(self, tmp_path):
        out = tmp_path / "t.ckvt"
        run("gen", "--T", 16, "--L", 2, "--H", 2, "--w-obs", 4, "--out", out)
        data = bytearray(out.read_bytes())
        data[-200:-196] = b"\x00\x00\x80\xbf"  # a -1.0 inside the value norms
        out.write_bytes(bytes(data))
        assert run("validate", out) == EXIT_FAILURE

    def test_missing_file_is_failure(self, tmp_path):
        assert run("validate", tmp_path / "nope.ckvt") == EXIT_FAILURE

    def test_write_once_then_force(self, tmp_path):
        out = tmp_path / "t.ckvt"
        args = ("gen", "--T", 8, "--L", 2, "--H", 2, "--w-obs", 4, "--out", out)
        assert run(*args) == EXIT_OK
        assert run(*args) == EXIT_FAILURE
        assert run(*args, "--force") == EXIT_OK

    def test_gen_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a.ckvt", tmp_path / "b.ckvt"
        for out in (a, b):
            run("gen", "--T", 16, "--L", 2, "--H", 2, "--w-obs", 4,
                "--seed", 7, "--out", out)
        assert a.read_bytes() == b.read_bytes()


class TestUsageErrors:
    def test_unknown_subcommand(self):
        assert run("frobnicate") == EXIT_USAGE

    def test_missing_required_flag(self):
        assert run("gen") == EXIT_USAGE

    def test_no_subcommand(self):
        assert main([]) == EXIT_USAGE


class TestConfig:
    def test_load_config_sections_and_comments(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("# comment\n[pipeline]\nbudget = 4  # inline\n\n"
                     "[seeds]\nseed = 9\n")
        cfg = load_config(str(p))
        assert cfg == {"pipeline.budget": "4", "seeds.seed": "9"}

    def test_config_sets_default_flag_wins(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("[seeds]\nseed = 9\n")
        a, b = tmp_path / "a.ckvt", tmp_path / "b.ckvt"
        run("--config", p, "gen", "--T", 8, "--L", 2, "--H", 2, "--w-obs", 4,
            "--out", a)
        run("gen", "--T", 8, "--L", 2, "--H", 2, "--w-obs", 4, "--seed", 9,
            "--out", b)
        assert a.read_bytes() == b.read_bytes()
        c = tmp_path / "c.ckvt"
        run("--config", p, "gen", "--T", 8, "--L", 2, "--H", 2, "--w-obs", 4,
            "--seed", 3, "--out", c)  # explicit flag beats the file
        assert c.read_bytes() != a.read_bytes()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny end-to-end workspace: weights, traces, compiled tables."""
    root = tmp_path_factory.mktemp("cli_ws")
    weights = root / "lm.ckvw"
    assert run("lm-init", "--L", 2, "--H", 2, "--d-head", 8, "--vocab-size", 64,
               "--max-seq-len", 64, "--seed", 11, "--out", weights) == EXIT_OK
    traces = root / "traces"
    traces.mkdir()
    for i in range(4):
        assert run("lm-prefill", "--weights", weights, "--random-tokens", 24,
                   "--w-obs", 8, "--seed", i, "--include-kv",
                   "--out", traces / f"t{i}.ckvt") == EXIT_OK
    head = root / "head.json"
    assert run("compile-head", "--traces", traces, "--mode", "surrogate",
               "--budget", 8, "--samples-per-state", 3, "--iters", 300,
               "--out", head) == EXIT_OK
    gate, bins = root / "gate.json", root / "bins.json"
    assert run("compile-gate", "--traces", traces, "--head-table", head,
               "--mode", "surrogate", "--budget", 8, "--n-ent", 2, "--n-ppl", 2,
               "--samples-per-layer", 3, "--iters", 300,
               "--out", gate, "--bins-out", bins) == EXIT_OK
    return {"root": root, "weights": weights, "traces": traces,
            "head": head, "gate": gate, "bins": bins}


class TestPipelineCommands:
    def test_compile_outputs_exist(self, workspace):
        for key in ("head", "gate", "bins"):
            assert workspace[key].exists()
        head = json.loads(workspace["head"].read_text())
        assert len(head["weights"]) == 2 and len(head["weights"][0]) == 2

    def test_compress_and_selection_shape(self, workspace):
        out = workspace["root"] / "sel.json"
        assert run("compress", "--trace", workspace["traces"] / "t0.ckvt",
                   "--head-table", workspace["head"],
                   "--gate-table", workspace["gate"],
                   "--bins", workspace["bins"], "--budget", 8,
                   "--out", out) == EXIT_OK
        payload = json.loads(out.read_text())
        assert len(payload["layers"]) == 2
        for layer in payload["layers"]:
            assert 1 <= len(layer["indices"]) <= 8
            assert "tau" in layer["provenance"]

    def test_compress_baseline(self, workspace):
        out = workspace["root"] / "sel_sink.json"
        assert run("compress", "--trace", workspace["traces"] / "t1.ckvt",
                   "--baseline", "sink_recent", "--budget", 8,
                   "--out", out) == EXIT_OK
        payload = json.loads(out.read_text())
        assert payload["layers"][0]["indices"][:4] == [1, 2, 3, 4]

    def test_eval_report_and_csv(self, workspace):
        out = workspace["root"] / "eval.json"
        csv_out = workspace["root"] / "eval.csv"
        assert run("eval", "--traces", workspace["traces"],
                   "--weights", workspace["weights"],
                   "--methods", "CKV,SINK_RECENT", "--budgets", "4 8",
                   "--head-table", workspace["head"],
                   "--gate-table", workspace["gate"],
                   "--bins", workspace["bins"], "--jobs", 2,
                   "--out", out, "--csv", csv_out) == EXIT_OK
        report = json.loads(out.read_text())
        assert len(report["rows"]) == 4 * 2 * 2
        assert csv_out.read_text().startswith("method,budget,mean_delta")

    def test_bound_check(self, workspace):
        root = workspace["root"]
        trace = root / "full.ckvt"
        assert run("lm-prefill", "--weights", workspace["weights"],
                   "--random-tokens", 16, "--w-obs", 8, "--seed", 5,
                   "--out", trace) == EXIT_OK
        sel = root / "bound_sel.json"
        assert run("compress", "--trace", trace,
                   "--head-table", workspace["head"],
                   "--gate-table", workspace["gate"],
                   "--bins", workspace["bins"], "--budget", 6,
                   "--out", sel) == EXIT_OK
        out = root / "bound.json"
        assert run("bound-check", "--trace", trace, "--selection", sel,
                   "--head-table", workspace["head"], "--out", out) == EXIT_OK
        payload = json.loads(out.read_text())
        assert payload["l1_margins"]["worst"] >= -1e-6

    def test_export_tables(self, workspace):
        head_csv = workspace["root"] / "head.csv"
        gate_csv = workspace["root"] / "gate.csv"
        assert run("export-tables", "--head-table", workspace["head"],
                   "--gate-table", workspace["gate"], "--head-csv", head_csv,
                   "--gate-csv", gate_csv) == EXIT_OK
        assert head_csv.read_text().startswith("layer,head_0")
        assert gate_csv.read_text().startswith("ppl_bin,layer")

    def test_export_nothing_fails(self, workspace):
        assert run("export-tables") == EXIT_FAILURE

    def test_utility_dump(self, workspace):
        out = workspace["root"] / "util.csv"
        assert run("utility-dump", "--trace", workspace["traces"] / "t2.ckvt",
                   "--out", out) == EXIT_OK
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "layer,head,position,alpha,rho,u"
        assert len(lines) == 1 + 2 * 2 * 24


class TestReproducibility:
    def script(self, root, seed=0):
        """One full compile run; returns the artifact paths."""
        root.mkdir(parents=True, exist_ok=True)
        weights = root / "lm.ckvw"
        run("lm-init", "--L", 2, "--H", 2, "--d-head", 8, "--vocab-size", 64,
            "--max-seq-len", 64, "--seed", 11, "--out", weights)
        traces = root / "traces"
        traces.mkdir()
        for i in range(3):
            run("lm-prefill", "--weights", weights, "--random-tokens", 20,
                "--w-obs", 8, "--seed", seed + i, "--out", traces / f"t{i}.ckvt")
        head = root / "head.json"
        run("compile-head", "--traces", traces, "--mode", "surrogate",
            "--budget", 6, "--samples-per-state", 2, "--iters", 200,
            "--seed", seed, "--out", head)
        gate, bins = root / "gate.json", root / "bins.json"
        run("compile-gate", "--traces", traces, "--head-table", head,
            "--mode", "surrogate", "--budget", 6, "--n-ent", 2, "--n-ppl", 2,
            "--samples-per-layer", 2, "--iters", 200, "--seed", seed,
            "--out", gate, "--bins-out", bins)
        sel = root / "sel.json"
        run("compress", "--trace", traces / "t0.ckvt", "--head-table", head,
            "--gate-table", gate, "--bins", bins, "--budget", 6, "--out", sel)
        return [weights, traces / "t0.ckvt", head, gate, bins, sel]

    def test_same_seed_script_is_byte_identical(self, tmp_path):
        a = self.script(tmp_path / "a")
        b = self.script(tmp_path / "b")
        for pa, pb in zip(a, b):
            assert pa.read_bytes() == pb.read_bytes(), pa.name

    def test_console_entry_point(self, tmp_path):
        import subprocess
        out = tmp_path / "t.ckvt"
        proc = subprocess.run(
            ["ckv", "gen", "--T", "8", "--L", "1", "--H", "1", "--w-obs", "2",
             "--out", str(out)], capture_output=True, text=True)
        assert proc.returncode == 0
        assert out.exists()
