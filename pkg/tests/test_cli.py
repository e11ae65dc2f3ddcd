import csv
import textwrap

import numpy as np
import pytest

from neardgd.cli import PRESETS, ConfigError, load_config, main, parse_config
from neardgd.harness import load_records

BASE = """
problem: {n: 10, p: 10, kappa: 1.0e+2, seed: 0}
topology: {kind: cyclic, c: 4}
variants: ["((1,-),(1,-))"]
horizon: 20
"""


def write(tmp_path, text, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(textwrap.dedent(text))
    return str(path)


class TestConfig:
    @pytest.mark.parametrize("name", PRESETS)
    def test_presets_load(self, name):
        cfg = load_config(name)
        assert cfg.n == 10 and cfg.variants

    def test_fig1_preset(self):
        cfg = load_config("paper-fig1")
        assert (cfg.n, cfg.p, cfg.kappa, cfg.horizon) == (10, 10, 1e4, 10000)
        assert cfg.topology == {"kind": "cyclic", "c": 4, "n": 10}
        assert {v.name for v in cfg.variants} >= {"DGD", "((1,-),(1,-))", "((1,-),(1,k))"}

    def test_fig2_has_three_seeds_and_costs(self):
        cfg = load_config("paper-fig2-costs")
        assert cfg.seeds == [0, 1, 2] and len(cfg.cost_models) == 3

    def test_auto_alpha(self):
        assert parse_config(BASE).alpha is None

    def test_unknown_key_with_line(self):
        with pytest.raises(ConfigError, match=r"cfg:3: topology.degree: unknown key"):
            parse_config("problem: {n: 4, p: 2, kappa: 2, seed: 0}\ntopology:\n  degree: 2\n"
                         "variants: [DGD]\n", "cfg")

    def test_unknown_top_level(self):
        with pytest.raises(ConfigError, match="colour"):
            parse_config(BASE + "colour: red\n")

    @pytest.mark.parametrize("patch, match", [
        ("variants: ['((1,-),(1,q))']", "position"),
        ("horizon: -1", "horizon"),
        ("alpha: 1.0", "exceeds"),
        ("alpha: fast", "alpha"),
        ("weights: random", "weights"),
        ("cost_models: [{c_c: -1, c_g: 1}]", "nonnegative"),
        ("verify: {theorem3: true}", "theorem3"),
        ("plot: {axes: [time]}", "axes"),
    ])
    def test_field_errors(self, patch, match):
        key = patch.split(":")[0]
        text = "\n".join(line for line in BASE.splitlines() if not line.startswith(key)) + "\n" + patch + "\n"
        with pytest.raises(ConfigError, match=match):
            parse_config(text)

    def test_bad_topology(self):
        with pytest.raises(ConfigError, match="topology"):
            parse_config(BASE.replace("c: 4", "c: 3"))

    def test_yaml_syntax_error_has_line(self):
        with pytest.raises(ConfigError, match=r":2: YAML"):
            parse_config("problem: {n: 1\nvariants: [", "x")

    def test_seed_xor_seeds(self):
        with pytest.raises(ConfigError, match="exactly one"):
            parse_config(BASE.replace("seed: 0", "seed: 0, seeds: [1]"))

    def test_missing_file(self):
        with pytest.raises(ConfigError, match="no such"):
            load_config("/nonexistent.yaml")


class TestRun:
    def test_exit_zero_and_artifacts(self, tmp_path):
        out = tmp_path / "out"
        assert main(["run", "--config", write(tmp_path, BASE), "--out", str(out)]) == 0
        recs = load_records(out)
        assert len(recs) == 1 and len(recs[0]) == 21

    def test_config_error_exit_one(self, tmp_path, capsys):
        assert main(["run", "--config", write(tmp_path, BASE + "bogus: 1\n")]) == 1
        assert "bogus" in capsys.readouterr().err

    def test_argparse_error_exit_one(self):
        assert main(["run"]) == 1
        assert main(["frobnicate"]) == 1

    def test_env_output_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv("NEARDGD_OUTPUT_DIR", str(tmp_path / "envout"))
        assert main(["run", "--config", write(tmp_path, BASE)]) == 0
        assert (tmp_path / "envout" / "manifest.csv").exists()

    def test_config_output_key(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert main(["run", "--config", write(tmp_path, BASE + "output: fromcfg\n")]) == 0
        assert (tmp_path / "fromcfg" / "run000.csv").exists()

    def test_single_agent_rate(self, tmp_path):
        cfg = """
        problem: {n: 1, p: 2, kappa: 1, seed: 4}
        topology: {kind: complete}
        variants: ["((1,-),(1,-))"]
        alpha: 0.1
        horizon: 100
        """
        out = tmp_path / "o"
        assert main(["run", "--config", write(tmp_path, cfg), "--out", str(out)]) == 0
        rel = load_records(out)[0].rel_error
        # kappa = 1 gives c2 = 1, so each step multiplies the squared error by (1 - alpha)^2
        ratios = rel[1:] / rel[:-1]
        assert np.all(np.abs(ratios - 0.9 ** 2) <= 1e-6)

    def test_run_failure_exit_two(self, tmp_path):
        cfg = BASE.replace("horizon: 20", "horizon: 400") + "alpha: 0.06\nunsafe_alpha: true\n"
        assert main(["run", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 2

    def test_theorem1_verification_in_run(self, tmp_path):
        cfg = BASE.replace('"((1,-),(1,-))"', '"((3,-),(2,-))"') + "verify: {theorem1: true}\n"
        out = tmp_path / "o"
        assert main(["run", "--config", write(tmp_path, cfg), "--out", str(out)]) == 0
        with open(out / "verify_seed0_3_2.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert {r["inequality_id"] for r in rows} >= {"theorem1", "corollary1_x"}
        assert all(r["satisfied"] == "true" for r in rows)

    def test_jobs(self, tmp_path):
        cfg = BASE.replace('variants: ["((1,-),(1,-))"]', 'variants: [DGD, "((1,-),(1,k))"]')
        assert main(["run", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "o"), "--jobs", "2"]) == 0
        assert main(["run", "--config", write(tmp_path, cfg), "--jobs", "0"]) == 1


class TestVerify:
    def test_theorem2_preset(self, tmp_path, capsys):
        assert main(["verify", "--config", "theorem2-verify", "--out", str(tmp_path)]) == 0
        text = (tmp_path / "verification.txt").read_text()
        assert text.rstrip().endswith("all bounds satisfied")
        assert "min_margin" in text and "theorem2" in text
        assert "all bounds satisfied" in capsys.readouterr().out

    def test_counters_k100(self, tmp_path):
        cfg = BASE.replace('"((1,-),(1,-))"', '"((1,-),(1,k))"').replace("horizon: 20", "horizon: 100")
        cfg += "verify: {counters: true}\n"
        assert main(["verify", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "v")]) == 0
        with open(tmp_path / "v" / "verify_seed0_1_1_k.csv") as fh:
            rows = {r["inequality_id"]: r for r in csv.DictReader(fh)}
        assert rows["counters_comm"]["k"] == "100" and rows["counters_comm"]["satisfied"] == "true"

    def test_negative_control(self, tmp_path):
        cfg = BASE.replace('"((1,-),(1,-))"', '"((3,-),(2,-))"').replace("horizon: 20", "horizon: 300")
        cfg += "alpha: 0.05\nunsafe_alpha: true\nverify: {theorem1: true, lemma3: true}\n"
        assert main(["verify", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "v")]) == 3
        assert "FAILED" in (tmp_path / "v" / "verification.txt").read_text()

    def test_requires_flags(self, tmp_path):
        assert main(["verify", "--config", write(tmp_path, BASE)]) == 1


@pytest.fixture(scope="module")
def records(tmp_path_factory):
    out = tmp_path_factory.mktemp("recs")
    cfg = write(out, BASE.replace('variants: ["((1,-),(1,-))"]', 'variants: [DGD, "((1,-),(1,k))"]')
                .replace("horizon: 20", "horizon: 1200"))
    assert main(["run", "--config", cfg, "--out", str(out)]) == 0
    return out


class TestPlot:
    def test_four_axes(self, records, tmp_path):
        assert main(["plot", "--records", str(records), "--axes", "iters,grads,comms,cost",
                     "--out", str(tmp_path)]) == 0
        for axis in ("iters", "grads", "comms", "cost"):
            svg = (tmp_path / f"{axis}.svg").read_text()
            assert svg.lstrip().startswith("<?xml") and "<svg" in svg

    def test_plot_data_matches_records(self, records, tmp_path):
        main(["plot", "--records", str(records), "--axes", "iters", "--marker-every", "500", "--out", str(tmp_path)])
        recs = {r.meta["run_id"]: r for r in load_records(records)}
        with open(tmp_path / "plot_data.csv") as fh:
            rows = list(csv.DictReader(fh))
        for row in rows:
            rec = recs[row["run_id"]]
            k = int(row["k"])
            assert float(row["rel_error"]) == rec.rel_error[k]
            assert int(row["cum_comm"]) == rec.cum_comm[k]
            assert row["marker"] == str(int(k % 500 == 0))
        marked = sorted({int(r["k"]) for r in rows if r["marker"] == "1"})
        assert marked == [0, 500, 1000]

    def test_single_record(self, tmp_path):
        out = tmp_path / "one"
        main(["run", "--config", write(tmp_path, BASE), "--out", str(out)])
        assert main(["plot", "--records", str(out), "--axes", "cost"]) == 0
        assert (out / "cost.svg").exists()

    def test_deterministic_svg(self, records, tmp_path):
        main(["plot", "--records", str(records), "--axes", "iters", "--out", str(tmp_path / "a")])
        main(["plot", "--records", str(records), "--axes", "iters", "--out", str(tmp_path / "b")])
        assert (tmp_path / "a" / "iters.svg").read_bytes() == (tmp_path / "b" / "iters.svg").read_bytes()

    def test_missing_records(self, tmp_path):
        assert main(["plot", "--records", str(tmp_path / "nothing")]) == 2

    def test_bad_axis(self, records):
        assert main(["plot", "--records", str(records), "--axes", "time"]) == 1
