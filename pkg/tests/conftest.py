import numpy as np
import pytest

from pumpwatch.dataset import SynthSpec, synthesize

SEEDS = range(10)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_series():
    """Three short synthetic pumps; cheap enough for CLI round trips."""
    return synthesize(SynthSpec(n_pumps=3, pump_len=300, anomaly_len=20), seed=7)


def tiny_config_doc(tmp_path, model="clstm", **extra):
    doc = {
        "model": model,
        "epochs": 2,
        "batch_size": 64,
        "min_pump_chunks": 50,
        "output_dir": str(tmp_path / "run"),
        "synthetic.n_pumps": 3,
        "synthetic.pump_len": 300,
        "synthetic.anomaly_len": 20,
        "model.clstm.conv_out": 8,
        "model.clstm.lstm_hidden": 8,
        "model.anomaly_transformer.d_model": 8,
        "model.anomaly_transformer.n_heads": 2,
        "model.anomaly_transformer.d_ff": 8,
        "model.anomaly_transformer.n_layers": 1,
    }
    doc.update(extra)
    return doc


# --- acceptance summary -------------------------------------------------------------
# Tests marked ``criterion(n, title)`` roll up into one line per criterion.

_criteria: dict[int, dict] = {}


def pytest_runtest_logreport(report):
    info = getattr(report, "criterion", None)
    if info is None:
        return
    n, title = info
    entry = _criteria.setdefault(n, {"title": title, "outcomes": []})
    if report.when == "call" or report.outcome != "passed":
        entry["outcomes"].append("skipped" if report.skipped else report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result().criterion = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        outs = _criteria[n]["outcomes"]
        if any(o == "failed" for o in outs):
            status = "FAIL"
        elif outs and all(o == "skipped" for o in outs):
            status = "SKIP"
        else:
            status = "PASS"
        terminalreporter.write_line(f"criterion {n}: {status}  {_criteria[n]['title']}")
