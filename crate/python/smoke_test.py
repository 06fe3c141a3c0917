"""Smoke test for the pygranaudit extension.

Build first:  pip install --no-build-isolation ./crates/py
Run:          python python/smoke_test.py
"""

import pathlib
import shutil
import tempfile

import pygranaudit as ga

ROOT = pathlib.Path(__file__).resolve().parent.parent

scores = [0.1, 0.4, 0.35, 0.8]
labels = [0, 0, 1, 1]
assert abs(ga.auroc(scores, labels) - 0.75) < 1e-12
assert abs(ga.auprc(scores, labels) - 0.8333333333333333) < 1e-12
assert abs(ga.ece([0.95] * 20, [1] * 20) - 0.005) < 1e-12
assert ga.fpr(scores, labels, 0.5) == 0.0
assert ga.fnr(scores, labels, 0.5) == 0.5
assert abs(ga.fisher_exact(10, 10, 10, 10) - 1.0) < 1e-12

try:
    ga.auroc([0.1, 0.2], [1, 1])
except ValueError:
    pass
else:
    raise AssertionError("single-class input should raise")

with tempfile.TemporaryDirectory() as tmp:
    demo = pathlib.Path(tmp) / "demo"
    shutil.copytree(ROOT / "configs" / "demo", demo, ignore=shutil.ignore_patterns("report"))
    cfg = demo / "audit.toml"
    cfg.write_text(cfg.read_text().replace("iterations = 50", "iterations = 10"))
    first = ga.run_audit(str(cfg))
    assert all(status == "ran" for _, status in first), first
    again = ga.run_audit(str(cfg))
    assert all(status == "skipped" for _, status in again), again
    fig = ga.emit_figure(str(cfg), "performance")
    assert fig.splitlines()[0].startswith("outcome,metric,kind,group"), fig[:80]
    print(fig.splitlines()[0])

print("pygranaudit", ga.__version__, "ok")
