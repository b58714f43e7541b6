"""Shared fixtures: a miniature benchmark and a trained baseline.

Session-scoped and cached on disk under the pytest tmp factory, so the
expensive pieces are built once per run.
"""

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))  # for gradcheck import

from ipcs import optim, scene, segnet


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of the run."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py" not in nodeid or report.when != "call":
                continue
            name = nodeid.split("::", 1)[1]
            verdict = "PASS" if outcome == "passed" else "FAIL"
            lines.append((name, verdict))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, verdict in sorted(lines):
            terminalreporter.write_line(f"{verdict}  {name}")


@pytest.fixture(scope="session")
def mini_bench(tmp_path_factory):
    """4 train / 3 test scenes at reduced density plus a trained checkpoint."""
    root = tmp_path_factory.mktemp("mini_bench")
    spec = scene.SceneSpec(extents=(2.4, 2.0, 2.2), points_per_m2=110.0,
                           seed=17)
    manifest = scene.make_benchmark(4, 3, spec, root)
    train = scene.manifest_clouds(manifest, root, "train")
    cfg = segnet.SegNetConfig(seed=17)
    opt = optim.OptimizerConfig(kind="sgd", learning_rate=0.05, momentum=0.9,
                                weight_decay=5e-4)
    params, _ = segnet.train_supervised(train, cfg, opt, epochs=10)
    ckpt = root / "baseline.ckpt"
    segnet.save_params(params, ckpt)
    return {"root": root, "manifest": manifest, "checkpoint": str(ckpt),
            "config": cfg}
