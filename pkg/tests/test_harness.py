import json
import math
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from robustopt.harness import (
    ExperimentConfig,
    build_problem,
    compare_runs,
    emit_csv,
    emit_plot,
    parse_override,
    read_csv,
    run_config,
    run_experiment,
    trace_to_csv,
    traces_to_svg,
)
from robustopt.trace import COLUMNS, RunTrace, TraceRow

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"
HEADER = "round,loss_gap,grad_norm,dist_to_opt,oracle_err_sq,lemma1_bound,inner_iters,wall_ms"


def small(**kw):
    base = dict(problem="logistic", dim=3, samples_per_client=40, n=5, f=1,
                aggregator="cwtm", attack="alie", K=20, lam=0.1)
    base.update(kw)
    return ExperimentConfig(**base)


def row(k, gap):
    return TraceRow(k, gap, 0.0, 0.0, 0.0, 0.0)


# ---------------------------------------------------------------- config


def test_config_round_trip():
    cfg = small(runs={"a": {"optimizer": "fgm"}}, eta=0.3)
    again = ExperimentConfig.from_json(cfg.to_json())
    assert again == cfg and again.to_json() == cfg.to_json()


def test_config_rejects_unknown_keys_and_strings():
    with pytest.raises(ValueError, match="unknown config keys"):
        ExperimentConfig.from_dict({"nope": 1})
    with pytest.raises(ValueError):
        small(aggregator="median-of-means")
    with pytest.raises(ValueError):
        small(attack="sign-flip")
    with pytest.raises(ValueError):
        small(optimizer="adam")
    with pytest.raises(ValueError):
        small(f=5)
    with pytest.raises(ValueError, match="overrides unknown"):
        small(runs={"a": {"bogus": 1}})


def test_parse_override_values():
    assert parse_override("K=10") == ("K", 10)
    assert parse_override("eta=0.5") == ("eta", 0.5)
    assert parse_override("attack=ipm:ls") == ("attack", "ipm:ls")
    assert parse_override("iid=true") == ("iid", True)
    with pytest.raises(ValueError):
        parse_override("K")


def test_expand_applies_run_overrides():
    cfg = small(runs={"g": {"optimizer": "gd"}, "p": {"optimizer": "pigs", "K": 5}})
    runs = cfg.expand()
    assert list(runs) == ["g", "p"]
    assert runs["p"].K == 5 and runs["p"].optimizer == "pigs" and runs["g"].name == "g"


@pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.json")), ids=lambda p: p.name)
def test_checked_in_configs_load(path):
    cfg = ExperimentConfig.load(path)
    assert ExperimentConfig.from_json(cfg.to_json()) == cfg
    for sub in cfg.expand().values():
        sub.validate()


# ---------------------------------------------------------------- runs


def test_vanilla_gd_sanity():
    cfg = small(f=0, n=4, aggregator="mean", attack="none", iid=True, K=300, heterogeneity=0.0)
    tr = run_experiment(cfg)
    gaps = tr.loss_gap
    assert np.all(np.diff(gaps) <= 1e-15)
    assert gaps[-1] < 1e-6


@pytest.mark.parametrize("opt", ["gd", "fgm", "pigs", "audit"])
def test_round_count_equals_K_and_gap_nonnegative(opt):
    tr = run_experiment(small(optimizer=opt, K=15, E=1e-8))
    assert len(tr) == 15
    assert [r.round for r in tr.rows] == list(range(15))
    if opt != "audit":
        assert tr.loss_gap.min() >= -1e-12
    assert tr.info["lemma1_violations"] == 0


def test_identical_config_gives_identical_csv():
    cfg = small(optimizer="pigs", attack="alie:ls", K=10)
    assert trace_to_csv(run_experiment(cfg)) == trace_to_csv(run_experiment(cfg))


def test_quadratic_problem_shares_hessian_without_spread():
    p = build_problem(ExperimentConfig(problem="quadratic", dim=4, n=6, f=1, cond=5.0, heterogeneity=1.0,
                                       aggregator="cwtm"))
    assert len(p.honest) == 5
    assert all(np.array_equal(p.honest[0].A, q.A) for q in p.honest)
    np.testing.assert_allclose(p.global_loss.grad(p.x_star), 0.0, atol=1e-10)


def test_csv_dataset_with_dirichlet_split(tmp_path, rng):
    X = rng.standard_normal((200, 3))
    y = (X[:, 0] > 0).astype(int)
    lines = ["label,a,b,c"] + [",".join([str(l)] + [repr(float(v)) for v in x]) for l, x in zip(y, X)]
    path = tmp_path / "data.csv"
    path.write_text("\n".join(lines))
    tr = run_experiment(small(dataset=str(path), beta=1.0, K=5))
    assert len(tr) == 5


def test_failures_name_the_stage():
    with pytest.raises(RuntimeError, match="pigs failed"):
        run_experiment(small(optimizer="pigs", eta=1e6, c=0.0, E=0.0, max_inner=1, x0="random", x0_radius=5.0))


def test_run_config_requires_expansion():
    with pytest.raises(ValueError):
        run_experiment(small(runs={"a": {}}))
    traces = run_config(small(runs={"a": {"K": 3}, "b": {"K": 4, "optimizer": "fgm"}}))
    assert [len(t) for t in traces.values()] == [3, 4]
    assert [t.name for t in traces.values()] == ["a", "b"]


# ---------------------------------------------------------------- compare


def test_compare_single_trace_target_above_start():
    t = RunTrace("x", [row(0, 1.0), row(1, 0.5)])
    target, rows = compare_runs([t], target=2.0)
    assert rows[0][1] == 0


def test_compare_default_target_and_unreached():
    a = RunTrace("a", [row(k, g) for k, g in enumerate([4, 2, 1, 1, 1])])
    b = RunTrace("b", [row(k, g) for k, g in enumerate([4, 3, 3, 3, 3])])
    target, rows = compare_runs({"a": a, "b": b})
    assert target == pytest.approx(1.5)
    assert rows[0][1] == 2 and math.isinf(rows[1][1])
    with pytest.raises(ValueError):
        compare_runs([])


# ---------------------------------------------------------------- output


def test_empty_trace_csv_is_header_only(tmp_path):
    p = emit_csv(RunTrace("e"), tmp_path / "e.csv")
    assert p.read_text() == HEADER + "\n"
    assert ",".join(COLUMNS) == HEADER


def test_three_row_trace_has_four_lines(tmp_path):
    t = RunTrace("t", [row(k, 1.0 / (k + 1)) for k in range(3)])
    p = emit_csv(t, tmp_path / "sub" / "t.csv")
    lines = p.read_text().splitlines()
    assert len(lines) == 4 and lines[0] == HEADER
    back = read_csv(p)
    assert back.rows == t.rows


def test_svg_is_well_formed(tmp_path):
    a = RunTrace("gd <a&b>", [row(k, 10.0 ** -k) for k in range(6)])
    b = RunTrace("pigs", [row(k, 0.0) for k in range(3)])
    p = emit_plot([a, b, RunTrace("empty")], tmp_path / "p.svg")
    root = ET.parse(p).getroot()
    assert root.tag.endswith("svg")
    polylines = [e for e in root.iter() if e.tag.endswith("polyline")]
    assert len(polylines) == 2
    assert "http" not in p.read_text().replace("http://www.w3.org/2000/svg", "")


def test_io_errors_name_the_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        emit_csv(RunTrace("e"), blocker / "out.csv")


def test_read_csv_rejects_foreign_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError, match="header"):
        read_csv(p)
