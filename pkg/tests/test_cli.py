import pytest

from trustsim.cli import main
from trustsim.config import config_from_dict, load_config

AFFINE_TOML = """
[computation]
kind = "affine_contraction"
spectrum = [0.6, 0.85, -0.4]
offset = [0.3, -0.2, 0.1]

[run]
iterations = 50
seed = 3
mode = "batch"
scenario = "custom"
initial_state = [2.0, -1.0, 0.5]

[validation]
schedule = "constant"
tolerance = 0.5
verification_tolerance = 0.25
quant_error = 0.01
clamp_radius = 4.0
frame_cap = 10
"""

CLASSIFIER_TOML = """
[computation]
kind = "sgd_classifier"
learning_rate = 0.08
batch_size = 10
data_seed = 11

[run]
iterations = 30
seed = 5
mode = "batch"
scenario = "base"

[validation]
schedule = "log"
tolerance = 0.3
quant_error = 1e-4
clamp_radius = 2.0

[randomized]
endorsers = 5
outlier_budget = 0.05

[repair]
recompute_rounds_cap = 3
light_rounds_cap = 30

[experiment]
tolerances = [0.05, 0.5]
n_seeds = 2
baseline_batch_sizes = [10, 30]
"""


@pytest.fixture
def affine_config(tmp_path):
    path = tmp_path / "affine.toml"
    path.write_text(AFFINE_TOML)
    return path


@pytest.fixture
def classifier_config(tmp_path):
    path = tmp_path / "clf.toml"
    path.write_text(CLASSIFIER_TOML)
    return path


class TestConfigParsing:
    def test_round_trip_fields(self, affine_config):
        cfg = load_config(affine_config)
        assert cfg.iterations == 50
        assert cfg.computation.kind == "affine_contraction"
        assert cfg.computation.spectrum == (0.6, 0.85, -0.4)
        assert cfg.frame_cap == 10

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            config_from_dict({"computation": {"kind": "gaussian_noise", "dimension": 2},
                              "run": {"iterationz": 5}})

    def test_missing_computation_rejected(self):
        with pytest.raises(ValueError, match="computation"):
            config_from_dict({"run": {"iterations": 5}})

    def test_scenario_knobs(self, classifier_config):
        cfg = load_config(classifier_config)
        assert cfg.scenario_frame_cap("base") == 3
        assert cfg.scenario_frame_cap("large_frames") == 6
        assert cfg.scenario_quant_error(0.5, "coarse_compression") == cfg.coarse_quant_error
        assert cfg.scenario_quant_error(0.5, "base") == 1e-4


class TestRunCommand:
    def test_outputs_written(self, affine_config, tmp_path):
        out = tmp_path / "out"
        assert main(["run", "--config", str(affine_config), "--out", str(out)]) == 0
        assert (out / "chain.bin").exists()
        assert (out / "costs.csv").exists()
        summary = (out / "summary.txt").read_text()
        assert "chain_tip:" in summary
        header, row = (out / "costs.csv").read_text().strip().split("\n")
        assert header.startswith("mode,scenario,tolerance")
        assert row.startswith("batch,custom,0.5")

    def test_byte_identical_reruns(self, affine_config, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        main(["run", "--config", str(affine_config), "--out", str(out1)])
        main(["run", "--config", str(affine_config), "--out", str(out2)])
        assert (out1 / "chain.bin").read_bytes() == (out2 / "chain.bin").read_bytes()
        assert (out1 / "costs.csv").read_bytes() == (out2 / "costs.csv").read_bytes()
        assert (out1 / "summary.txt").read_bytes() == (out2 / "summary.txt").read_bytes()

    def test_classifier_run_writes_precision(self, classifier_config, tmp_path):
        out = tmp_path / "out"
        assert main(["run", "--config", str(classifier_config), "--out", str(out)]) == 0
        assert (out / "precision.csv").exists()
        assert "test_accuracy:" in (out / "summary.txt").read_text()


class TestVerifyCommand:
    def test_honest_chain_passes(self, affine_config, tmp_path, capsys):
        out = tmp_path / "out"
        main(["run", "--config", str(affine_config), "--out", str(out)])
        code = main(["verify", "--chain", str(out / "chain.bin"),
                     "--config", str(affine_config)])
        captured = capsys.readouterr().out
        assert code == 0
        assert "integrity: PASS" in captured
        assert "computation: PASS" in captured

    def test_bit_flip_detected(self, affine_config, tmp_path, capsys):
        out = tmp_path / "out"
        main(["run", "--config", str(affine_config), "--out", str(out)])
        blob = bytearray((out / "chain.bin").read_bytes())
        blob[70] ^= 0x01  # inside the first block
        (out / "chain.bin").write_bytes(bytes(blob))
        code = main(["verify", "--chain", str(out / "chain.bin"),
                     "--config", str(affine_config)])
        assert code == 1
        assert "FAIL" in capsys.readouterr().out

    def test_expected_tip_checked(self, affine_config, tmp_path, capsys):
        out = tmp_path / "out"
        main(["run", "--config", str(affine_config), "--out", str(out)])
        tip = [line.split(": ")[1] for line
               in (out / "summary.txt").read_text().splitlines()
               if line.startswith("chain_tip:")][0]
        code = main(["verify", "--chain", str(out / "chain.bin"),
                     "--config", str(affine_config), "--expect-tip", tip])
        assert code == 0
        assert "tip: PASS" in capsys.readouterr().out
        code = main(["verify", "--chain", str(out / "chain.bin"),
                     "--config", str(affine_config), "--expect-tip", "ab" * 32])
        assert code == 1

    def test_empty_chain_passes_vacuously(self, affine_config, tmp_path, capsys):
        chain = tmp_path / "empty.bin"
        chain.write_bytes(b"")
        code = main(["verify", "--chain", str(chain),
                     "--config", str(affine_config)])
        assert code == 0
        assert "PASS" in capsys.readouterr().out


class TestSweepCommand:
    def test_grid_outputs(self, classifier_config, tmp_path):
        out = tmp_path / "sweep"
        assert main(["sweep", "--config", str(classifier_config),
                     "--out", str(out)]) == 0
        costs = (out / "costs.csv").read_text().strip().split("\n")
        assert len(costs) == 1 + 3 * 2  # header + scenarios x tolerances
        precision = (out / "precision.csv").read_text().strip().split("\n")
        assert precision[0] == "tolerance,validated_accuracy,vanilla_batch_10,vanilla_batch_30"
        assert len(precision) == 1 + 2
        assert (out / "chain.bin").exists()
        assert (out / "summary.txt").exists()

    def test_tolerance_override(self, classifier_config, tmp_path):
        out = tmp_path / "sweep"
        main(["sweep", "--config", str(classifier_config), "--out", str(out),
              "--tolerances", "0.4"])
        costs = (out / "costs.csv").read_text().strip().split("\n")
        assert len(costs) == 1 + 3
