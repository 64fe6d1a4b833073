import json
from pathlib import Path

import numpy as np
import pytest

from hpesplit.cli import (
    NAMED_EXPERIMENTS,
    ExperimentConfig,
    audit_trace_file,
    config_from_file,
    emit_trace,
    main,
    named_config,
    parse_trace_csv,
    run_experiment,
)
from hpesplit.hpe import RunTrace


def small_config(**overrides):
    base = dict(experiment="custom", family="cp", m=24, n=24, seed=3, lam=0.5,
                sigma=0.5, kappa=0.5, iters=30, jumps=4, ref_factor=3)
    base.update(overrides)
    return ExperimentConfig(**base)


class TestEmitTrace:
    def make_trace(self):
        trace = RunTrace(method="demo", sigma=0.5)
        rng = np.random.default_rng(0)
        h = 0
        for k in range(3):
            h += int(rng.integers(1, 9))
            trace.append(k, float(rng.standard_normal()), 0.25 * k, 0.5 * k + 0.1,
                         k, h, 0.1 * k, wall_ms=0.0)
        trace.reference_objective = -2.0
        return trace

    def test_round_trip_lossless(self, tmp_path):
        trace = self.make_trace()
        path = emit_trace(trace, tmp_path / "demo.csv")
        cols = parse_trace_csv(path)
        assert cols["method"] == ["demo"] * 3
        assert cols["k"] == [0, 1, 2]
        for i in range(3):
            assert cols["objective_gap"][i] == trace.objective[i] - (-2.0)
            assert cols["lhs"][i] == trace.lhs[i]
            assert cols["rhs"][i] == trace.rhs[i]
            assert cols["inner_iters"][i] == trace.inner_iterations[i]
            assert cols["h_apps"][i] == trace.h_applications[i]

    def test_header_written_for_empty_trace(self, tmp_path):
        trace = RunTrace(method="empty")
        path = emit_trace(trace, tmp_path / "empty.csv")
        text = Path(path).read_text()
        assert text.splitlines() == ["method,k,objective_gap,lhs,rhs,inner_iters,h_apps,wall_ms"]

    def test_unwritable_path_raises_with_context(self, tmp_path):
        trace = self.make_trace()
        with pytest.raises(OSError, match="could not write trace"):
            emit_trace(trace, tmp_path / "missing-dir" / "x.csv")


class TestNamedExperiments:
    def test_named_parameters_pinned(self):
        # hard-coded table; a drift in the presets must fail loudly here
        expected = {
            "cp1-run1": {"lam": 20.0, "sigma": 0.01, "kappa": 0.5},
            "cp1-run2": {"lam": 1.0, "sigma": 0.95, "kappa": 0.1},
            "cp2": {"lam": 0.1, "sigma": 0.99, "kappa": 0.5},
            "dy-run1": {"lam1": 0.001, "lam2": 0.1, "sigma": 0.99},
            "dy-run2": {"lam1": 0.0001, "lam2": 0.1, "sigma": 0.99},
            "dy-run3": {"lam1": 0.0001, "lam2": 0.01, "sigma": 0.99},
        }
        for name, params in expected.items():
            cfg = named_config(name)
            pinned = cfg.pinned_params()
            for key, val in params.items():
                assert pinned[key] == val, f"{name}.{key}"

    def test_emitted_manifest_pins_parameters(self, tmp_path):
        cfg = named_config("cp1-run2", m=24, n=24, iters=5)
        from dataclasses import replace
        result = run_experiment(replace(cfg, ref_factor=1, out_dir=str(tmp_path)))
        manifest = json.loads((result.out_dir / "manifest.json").read_text())
        assert manifest["params"] == {"lam": 1.0, "sigma": 0.95, "kappa": 0.1}
        assert manifest["spectrum_kind"] == "cosine"

    @pytest.mark.parametrize("name", sorted(NAMED_EXPERIMENTS))
    def test_named_experiments_run_end_to_end(self, name, tmp_path):
        from dataclasses import replace
        cfg = named_config(name, m=24, n=96 if name == "cp2" else 24, iters=8, seed=2)
        result = run_experiment(replace(cfg, ref_factor=1, out_dir=str(tmp_path)))
        for method in cfg.methods:
            entry = result.summary["methods"][method]
            assert entry["certification_failure"] is None
            assert entry["iterations"] == 8

    def test_desk_scale_dims(self):
        assert (named_config("cp1-run1").m, named_config("cp1-run1").n) == (200, 200)
        assert (named_config("cp2").m, named_config("cp2").n) == (100, 400)
        assert named_config("cp2").spectrum_kind == "power5"
        assert (named_config("dy-run1").m, named_config("dy-run1").n) == (200, 200)

    def test_unknown_name(self):
        with pytest.raises(ValueError):
            named_config("cp9")

    def test_overrides(self):
        cfg = named_config("cp1-run2", m=40, n=40, iters=10, seed=7)
        assert (cfg.m, cfg.n, cfg.iters, cfg.seed) == (40, 40, 10, 7)
        assert cfg.lam == 1.0


class TestConfigFile:
    def test_parse_and_override(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text(
            "# comment line\n"
            "family = cp\n"
            "m = 30\n"
            "n = 30\n"
            "lam = 0.25\n"
            "sigma = 0.5\n"
            "iters = 12\n"
            "methods = hpe-cp, implicit-cp\n"
        )
        cfg = config_from_file(path, seed=9)
        assert cfg.family == "cp"
        assert cfg.m == 30
        assert cfg.lam == 0.25
        assert cfg.methods == ("hpe-cp", "implicit-cp")
        assert cfg.seed == 9
        assert cfg.experiment == "exp"

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("family cp\n")
        with pytest.raises(ValueError, match="key = value"):
            config_from_file(path)

    def test_unknown_method_rejected_at_parse_time(self, tmp_path, capsys):
        path = tmp_path / "bad-method.cfg"
        path.write_text("family = cp\nlam = 0.5\nmethods = hpe-cp, typo-method\n")
        with pytest.raises(ValueError, match="unknown methods"):
            config_from_file(path)
        assert main(["run", str(path)]) == 1

    def test_wall_times_flag_emits_nonzero_times(self, tmp_path):
        cfg = small_config(out_dir=str(tmp_path), emit_wall_times=True)
        result = run_experiment(cfg)
        cols = parse_trace_csv(result.summary["methods"]["implicit-cp"]["trace"])
        assert any(w > 0 for w in cols["wall_ms"])


class TestRunExperiment:
    def test_summary_and_traces(self, tmp_path):
        cfg = small_config(out_dir=str(tmp_path))
        result = run_experiment(cfg)
        summary = result.summary
        assert set(summary["methods"]) == set(cfg.methods)
        for name in cfg.methods:
            entry = summary["methods"][name]
            assert entry["certification_failure"] is None
            assert entry["iterations"] == cfg.iters
            trace_path = Path(entry["trace"])
            assert trace_path.exists()
            cols = parse_trace_csv(trace_path)
            # totals in the summary equal the final h_apps of each trace
            assert entry["total_h_apps"] == cols["h_apps"][-1]
            assert all(b >= a for a, b in zip(cols["h_apps"], cols["h_apps"][1:]))
        assert (result.out_dir / "summary.json").exists()
        assert (result.out_dir / "manifest.json").exists()

    def test_reference_below_all_finals(self, tmp_path):
        cfg = small_config(out_dir=str(tmp_path), iters=60)
        result = run_experiment(cfg)
        ref = result.summary["reference"]["objective"]
        for entry in result.summary["methods"].values():
            assert ref <= entry["final_objective"] + 1e-9 * (1 + abs(ref))

    def test_gaps_nonnegative(self, tmp_path):
        cfg = small_config(out_dir=str(tmp_path))
        result = run_experiment(cfg)
        for name in cfg.methods:
            cols = parse_trace_csv(result.summary["methods"][name]["trace"])
            assert min(cols["objective_gap"]) >= -1e-9

    def test_zero_iterations_valid_headers(self, tmp_path):
        cfg = small_config(out_dir=str(tmp_path), iters=0, ref_factor=1)
        result = run_experiment(cfg)
        for name in cfg.methods:
            cols = parse_trace_csv(result.summary["methods"][name]["trace"])
            assert cols["k"] == []

    def test_deterministic_csvs(self, tmp_path):
        cfg_a = small_config(out_dir=str(tmp_path / "a"))
        cfg_b = small_config(out_dir=str(tmp_path / "b"))
        res_a = run_experiment(cfg_a)
        res_b = run_experiment(cfg_b)
        for name in cfg_a.methods:
            bytes_a = Path(res_a.summary["methods"][name]["trace"]).read_bytes()
            bytes_b = Path(res_b.summary["methods"][name]["trace"]).read_bytes()
            assert bytes_a == bytes_b

    def test_hpe_audits_recorded(self, tmp_path):
        cfg = small_config(out_dir=str(tmp_path))
        result = run_experiment(cfg)
        assert result.summary["methods"]["hpe-cp"]["audit_ok"] is True

    def test_dy_family(self, tmp_path):
        cfg = ExperimentConfig(experiment="custom", family="dy", m=20, n=20, seed=1,
                               lam1=0.01, lam2=0.1, delta=0.05, sigma=0.8,
                               iters=25, sparsity=0.0, ref_factor=3,
                               methods=("hpe-dy", "implicit-dy", "fb"),
                               out_dir=str(tmp_path))
        result = run_experiment(cfg)
        assert set(result.summary["methods"]) == {"hpe-dy", "implicit-dy", "fb"}
        assert result.summary["methods"]["hpe-dy"]["audit_ok"] is True

    def test_certification_failure_recorded_not_fatal(self, tmp_path, monkeypatch):
        # force the certified method to fail by capping its refinements at zero;
        # the experiment must still finish and record the failure
        import hpesplit.cli as cli_mod
        cfg = small_config(out_dir=str(tmp_path), sigma=0.0)
        original = cli_mod.inexact_cp_run

        def capped(oracle, K, j, p, x0, y0, iters, **kw):
            kw["inner_cap"] = 1
            return original(oracle, K, j, p, x0, y0, iters, **kw)

        monkeypatch.setattr(cli_mod, "inexact_cp_run", capped)
        result = run_experiment(cfg)
        entry = result.summary["methods"]["hpe-cp"]
        assert entry["certification_failure"] is not None
        assert result.summary["methods"]["implicit-cp"]["certification_failure"] is None
        assert result.certification_failed


class TestTraceAudit:
    def test_accepted_rows_pass(self, tmp_path):
        cfg = small_config(out_dir=str(tmp_path))
        result = run_experiment(cfg)
        path = result.summary["methods"]["hpe-cp"]["trace"]
        assert audit_trace_file(path, sigma=cfg.sigma) == []

    def test_detects_violation(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("method,k,objective_gap,lhs,rhs,inner_iters,h_apps,wall_ms\n"
                        "x,0,1.0,5.0,1.0,1,10,0\n"
                        "x,1,1.0,0.0,1.0,1,5,0\n")
        failures = audit_trace_file(path, sigma=0.5)
        assert len(failures) == 2


class TestMainCli:
    def test_run_named_experiment(self, tmp_path, capsys):
        code = main(["run", "cp1-run2", "--m", "24", "--n", "24", "--iters", "15",
                     "--seed", "1", "--out", str(tmp_path)])
        assert code == 0
        out = capsys.readouterr().out
        assert "cp1-run2" in out
        assert (tmp_path / "cp1-run2" / "hpe-cp.csv").exists()

    def test_audit_command(self, tmp_path, capsys):
        main(["run", "cp1-run2", "--m", "24", "--n", "24", "--iters", "15",
              "--seed", "1", "--out", str(tmp_path)])
        trace = tmp_path / "cp1-run2" / "hpe-cp.csv"
        assert main(["audit", str(trace), "--sigma", "0.95"]) == 0
        assert main(["audit", str(trace), "--sigma", "0.0"]) == 2

    def test_unknown_experiment_exit_code(self, capsys):
        assert main(["run", "not-an-experiment"]) == 1

    def test_missing_trace_exit_code(self, capsys):
        assert main(["audit", "/nonexistent/trace.csv", "--sigma", "0.5"]) == 1

    def test_bad_arguments_exit_code(self, capsys):
        with pytest.raises(SystemExit) as err:
            main(["run"])  # missing positional
        assert err.value.code == 1

    def test_certification_failure_exit_code(self, tmp_path, capsys):
        # sigma = 0 with one allowed refinement cannot be certified on a cold
        # start, so the run must finish with exit code 2
        path = tmp_path / "strict.cfg"
        path.write_text(
            "family = cp\n"
            "m = 16\n"
            "n = 16\n"
            "lam = 0.5\n"
            "sigma = 0.0\n"
            "iters = 5\n"
            "inner_cap = 1\n"
            "ref_factor = 1\n"
            "methods = hpe-cp, implicit-cp\n"
            f"out_dir = {tmp_path}\n"
        )
        assert main(["run", str(path), "--seed", "2"]) == 2
        out = capsys.readouterr().out
        assert "CERTIFICATION FAILURE" in out

    def test_env_var_output_dir(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("HPESPLIT_OUT", str(tmp_path / "envout"))
        code = main(["run", "cp1-run2", "--m", "24", "--n", "24", "--iters", "5",
                     "--seed", "1"])
        assert code == 0
        assert (tmp_path / "envout" / "cp1-run2" / "implicit-cp.csv").exists()
