import math

import numpy as np
import pytest
from sklearn.base import clone

from sbsvie.config import RunConfig
from sbsvie.picard import (
    AssumptionError,
    DivergedError,
    PicardConfig,
    PicardSolver,
    audit_contraction,
    audit_iterate_bounds,
    audit_phi_domination,
    check_assumptions,
    compute_constants,
    compute_T0,
    contraction_factors,
    phi_sequences,
    picard_iterate,
    solve_problem,
    stepping_windows,
    uniqueness_distance,
    verify_solution,
)
from sbsvie.scenarios import get_scenario, lipschitz_problem, mittag_leffler_x0
from sbsvie.stochastic import AdaptedProcess, ProblemSpec

# independent evaluation at T = 1, t = 0, alpha = 3/4, b = 1
C2_REF = 4 * 1 * 1 * (1 + 36 / 0.5)
C3_REF = 16 * 2**1.5 / 0.5 + 2
ML_X0 = 1.1453906578705488


def _cfg(**kw):
    base = dict(M=2000, N=16, seed=0)
    base.update(kw)
    return RunConfig(**base)


def _ml(N=32):
    sc = get_scenario("mittag_leffler_lambda0.1")
    cfg = _cfg(N=N)
    return sc.problem(cfg), sc.ensemble(cfg)


def test_mittag_leffler_series():
    assert mittag_leffler_x0(0.1, 0.75, 1.0) == pytest.approx(ML_X0, rel=1e-15)
    assert mittag_leffler_x0(0.0, 0.75, 1.0) == 1.0
    # alpha -> 1 limit of the kernel gives the exponential
    assert mittag_leffler_x0(0.3, 0.999999, 1.0) == pytest.approx(math.exp(0.3), rel=1e-5)


def test_constants_reference():
    problem, ens = _ml()
    block = compute_constants(problem, 0.0, ens)
    assert C2_REF == 292.0
    assert block.C2 == pytest.approx(C2_REF, rel=1e-9)
    assert block.C3 == pytest.approx(C3_REF, rel=1e-9)
    assert block.C3 == pytest.approx(92.50966799187809, rel=1e-12)
    assert block.C1 == 0.0 and block.u_star == 0.0 and block.C4 == 0.0
    assert block.C1_xi == pytest.approx(24.0)
    assert block.steps == 93
    assert block.T0 == pytest.approx(1 - 1 / C3_REF, rel=1e-12)
    assert set(block.to_dict()) >= {"C1", "C2", "C3", "C4", "T0", "steps"}


def test_compute_T0_edge_cases():
    problem, ens = _ml()
    block = compute_constants(problem, 0.0, ens)
    assert compute_T0(block, 0.0, 0.0).steps == 1
    assert compute_T0(block, 1.0, 0.0).step == math.inf  # a > 0 with zero data
    tiny = compute_T0(block, 0.0, 1e-6)
    assert tiny.steps == 1 and tiny.T0 == 0.0
    with pytest.raises(ValueError):
        compute_T0(block, -1.0, 1.0)


def test_smallness_failure_raises():
    problem = get_scenario("h11_violation").problem(_cfg())
    ens = get_scenario("h11_violation").ensemble(_cfg())
    assert contraction_factors(0.75, 1.0, problem.c)["varpi"] < 0
    with pytest.raises(AssumptionError):
        compute_constants(problem, 0.0, ens)
    with pytest.raises(DivergedError):
        picard_iterate(problem, ens)


def test_stepping_windows_partition_the_grid():
    problem, ens = _ml(N=64)
    block = compute_constants(problem, 0.0, ens)
    windows = stepping_windows(ens.grid, compute_T0(block, 0.0, 1.0))
    rows = np.concatenate(windows)
    assert np.array_equal(np.sort(rows), np.arange(65))
    assert windows[0][-1] == 64
    assert all(w[0] > v[-1] for w, v in zip(windows, windows[1:]))


def test_mittag_leffler_picard():
    problem, ens = _ml(N=128)
    x, y, trace = picard_iterate(problem, ens, PicardConfig(stepping="off"))
    assert trace.converged and len(trace) <= 25
    assert abs(x.values[0, 0, 0] - ML_X0) < 1e-3
    assert verify_solution(problem, (x, y), ens) < 1e-6
    diffs = trace.column("m_norm_diff")
    assert np.all(np.diff(diffs[diffs > 1e-14]) < 0)


def test_stepped_solution_agrees_with_single_window():
    problem, ens = _ml(N=32)
    one, *_ = solve_problem(problem, ens, PicardConfig(stepping="off"))
    stepped, y, traces, windows = solve_problem(problem, ens, PicardConfig(stepping="auto"))
    assert len(windows) == len(traces) == 33
    assert np.allclose(stepped.values, one.values, atol=1e-8)
    assert verify_solution(problem, (stepped, y), ens) < 1e-6


def test_verify_solution_detects_perturbation():
    problem, ens = _ml(N=16)
    x, y, _ = picard_iterate(problem, ens, PicardConfig(stepping="off"))
    bumped = AdaptedProcess(x.values + 1.0)
    assert verify_solution(problem, (bumped, y), ens) >= 1.0 - 1e-6
    sc = get_scenario("zero_coefficients")
    cfg = _cfg(M=500)
    p0, e0 = sc.problem(cfg), sc.ensemble(cfg)
    x0, y0, _ = picard_iterate(p0, e0)
    assert verify_solution(p0, (x0, y0), e0) < 1e-12


def test_assumption_report_and_witness():
    cfg = _cfg()
    for name in ("zero_coefficients", "lipschitz_random", "log_modulus", "mittag_leffler_lambda0.1"):
        sc = get_scenario(name)
        rep = check_assumptions(sc.problem(cfg), sc.ensemble(cfg))
        assert rep.ok, (name, rep.failures())
    sc = get_scenario("h3_violation")
    rep = check_assumptions(sc.problem(cfg), sc.ensemble(cfg))
    assert rep.failures() == ["h3"]
    w = rep.h3["witness"]
    assert w["coefficient"] == "f" and w["lhs"] > w["rhs"]
    assert w["lhs"] == pytest.approx(2 * w["rhs"], rel=1e-6)
    sc = get_scenario("h11_violation")
    assert check_assumptions(sc.problem(cfg), sc.ensemble(cfg)).failures() == ["h11"]


def _understated(coef):
    base = lipschitz_problem(_cfg(), 3)
    # declared c is small but the driver's y-coefficient is not
    f = lambda t, s, x, y: 0.1 * x + coef * np.mean(y, axis=-1)
    return ProblemSpec(base.alpha, base.T, base.n, base.wiener, base.xi, f, base.g,
                       base.modulus, 1e-4, True)


def test_inner_loop_divergence_is_detected():
    ens = get_scenario("lipschitz_random").ensemble(_cfg(N=8, M=1000))
    with pytest.raises(DivergedError, match="32c"):
        picard_iterate(_understated(400.0), ens)


def test_outer_growth_is_detected():
    ens = get_scenario("lipschitz_random").ensemble(_cfg(N=8, M=1000))
    with pytest.raises(DivergedError, match="consecutive iterations"):
        picard_iterate(_understated(40.0), ens)


def test_lipschitz_audits_and_uniqueness():
    cfg = _cfg(M=1500, N=12)
    problem = lipschitz_problem(cfg, 5)
    ens = get_scenario("lipschitz_random").ensemble(cfg)
    block = compute_constants(problem, 0.0, ens)
    x, y, trace = picard_iterate(problem, ens, PicardConfig(stepping="off"))
    assert trace.converged
    bounds = audit_iterate_bounds(trace, block, grid=ens.grid)
    assert bounds["violations"] == [] and bounds["pairs_checked"] > 0
    assert audit_contraction(trace, problem, ens.grid)["violations"] == []
    phi = phi_sequences(block, problem.modulus, ens.grid, len(trace) + 1)
    assert audit_phi_domination(trace, phi)["violations"] == []
    x2, y2, _ = picard_iterate(problem, ens, PicardConfig(stepping="off", inner_init="zero"))
    assert uniqueness_distance((x, y), (x2, y2), ens)["holds"]


def test_phi_sequences_linear_modulus():
    problem, ens = _ml(N=64)
    block = compute_constants(problem, 0.0, ens)
    phi = phi_sequences(block, problem.modulus, ens.grid, 12)
    assert phi.monotone_on_T0 and phi.decreasing_at_T0
    assert np.all(phi.values[:, -1] == 0.0)
    # without terminal data phi_1 = C4 (T - t) = 0 and everything vanishes
    zero = phi_sequences(block, problem.modulus, ens.grid, 5, use_xi=False)
    assert np.all(zero.values == 0.0) and zero.decreasing_at_T0


def test_phi_with_zero_modulus_vanishes_after_first():
    sc = get_scenario("martingale_xi")
    cfg = _cfg(M=500)
    block = compute_constants(sc.problem(cfg), 0.0, sc.ensemble(cfg))
    phi = phi_sequences(block, sc.problem(cfg).modulus, sc.ensemble(cfg).grid, 4)
    assert np.all(phi.values[1:] == 0.0)


def test_trace_exports(tmp_path):
    problem, ens = _ml(N=8)
    _, _, trace = picard_iterate(problem, ens)
    trace.export_csv(tmp_path / "t.csv")
    trace.export_json(tmp_path / "t.json")
    header = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert "m_norm_diff" in header and "residual" in header
    assert len(trace.to_rows()) == len(trace)


def test_config_validation():
    with pytest.raises(ValueError):
        PicardConfig(tol=0)
    with pytest.raises(ValueError):
        PicardConfig(inner_init="random")
    with pytest.raises(ValueError):
        PicardConfig(stepping="sometimes")


def test_estimator():
    problem, ens = _ml(N=32)
    est = PicardSolver(stepping="off").fit(problem, ens)
    assert est.converged_ and est.n_iter_ <= 25
    assert est.predict(0)[0, 0] == pytest.approx(ML_X0, abs=2e-3)
    assert est.residual(problem, ens) < 1e-6
    assert clone(est).get_params() == est.get_params()
    sc = get_scenario("h3_violation")
    with pytest.raises(AssumptionError):
        PicardSolver().fit(sc.problem(_cfg()), sc.ensemble(_cfg()))
