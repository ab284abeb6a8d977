"""Smoke test for the maxfl_py extension.

Build first:
    cargo build --release -p maxfl-py --features extension-module
"""

import importlib.machinery
import importlib.util
import json
import math
import pathlib
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load():
    try:
        import maxfl_py
        return maxfl_py
    except ImportError:
        pass
    lib = ROOT / "target" / "release" / "libmaxfl_py.so"
    loader = importlib.machinery.ExtensionFileLoader("maxfl_py", str(lib))
    spec = importlib.util.spec_from_file_location("maxfl_py", lib, loader=loader)
    mod = importlib.util.module_from_spec(spec)
    loader.exec_module(mod)
    return mod


SMALL = """
seeds = [1]
rounds = 5
clients_per_round = 3
tau = 3
warmup_steps = 10
[algorithm]
kind = "maxfl"
[data]
n_clients = 6
[data.source]
kind = "synthetic"
n_samples = 900
n_features = 4
n_labels = 4
[data.partition]
scheme = "dirichlet"
alpha = 1.0
"""


def main():
    m = load()
    assert m.weight_from_gap(0.0) == 0.25
    assert abs(m.weight_from_gap(10.0) - 4.5395807735951e-5) < 1e-17
    assert m.weight_from_gap(10.0, "raw_sigmoid") > 0.9999
    assert m.appeals(0.5, 1.0) and not m.appeals(1.0, 1.0)
    assert abs(m.maxfl_lower_bound(1.0) - math.exp(-1) / 16) < 1e-15
    assert m.estimate("fedavg_mean", [0.0, 6.0]) == 3.0
    mean, stderr = m.expected_appeal("maxfl_minimum", [0.0, 8.0], 1.0, trials=2000)
    assert mean > m.maxfl_lower_bound(1.0) - 3 * stderr

    sim = m.Simulation(SMALL, 1)
    outcome, record = sim.step()
    assert json.loads(record)["t"] == 0
    assert sim.round == 1
    rest = json.loads(sim.run())
    assert len(rest) == 4 and sim.is_done()

    with tempfile.TemporaryDirectory() as out:
        summary = json.loads(m.run_experiment(SMALL, out))
        assert summary["config"]["rounds"] == 5
        assert (pathlib.Path(out) / "rounds.csv").exists()

    try:
        m.validate_config(SMALL + "\nlearnig_rate = 1\n")
    except ValueError as e:
        assert "learnig_rate" in str(e)
    else:
        raise AssertionError("unknown key accepted")
    print("maxfl_py", m.__version__, "ok")


if __name__ == "__main__":
    sys.exit(main())
