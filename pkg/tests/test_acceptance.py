"""Acceptance gate: one test per shipped guarantee, each printing a verdict
line and asserting its stated runtime budget.

Heavy sweeps (criteria 6-8) run hundreds of simulations; the whole module
is a few minutes of CPU. Everything is seeded, so failures reproduce.
"""

import glob
import json
import math
import os
import time

import numpy as np
import pytest

from mixsim.analysis import (
    check_lemma2,
    check_lemma3,
    check_lemma5,
    check_theorem1,
    check_theorem2,
    fit_rate,
    spearman,
    theorem2_constants,
)
from mixsim.cli import main
from mixsim.engine import RunConfig, run, sequential_run
from mixsim.errors import MixingNotObservedError
from mixsim.mixing import estimate_tmix, verify_assumption1, verify_lemma1
from mixsim.objectives import make_objective
from mixsim.optimizers import (
    SamConfig,
    SamState,
    StepSchedule,
    optimizer_config,
    sam_delta,
    sam_lipschitz,
)
from mixsim.protocols import (
    ProtocolSpec,
    consensus_operator,
    make_protocol,
    theoretical_tmix,
)
from mixsim.state import AverageOperator


def verdict(num, ok, detail, budget, elapsed):
    line = f"criterion {num:2d}: {'PASS' if ok else 'FAIL'} ({detail}; {elapsed:.1f}s of {budget:.0f}s budget)"
    print(line)
    assert ok, line
    assert elapsed < budget, f"criterion {num} over budget: {elapsed:.1f}s >= {budget}s"


def estimate(spec, **kw):
    schedule = make_protocol(spec)
    return estimate_tmix(schedule, consensus_operator(spec), **kw)


def test_criterion_01_averaging_mixing_exact():
    t0 = time.perf_counter()
    bad = []
    for n in (2, 4, 8, 16):
        got = estimate(ProtocolSpec(kind="allreduce", n=n, d=3)).tmix_hat
        if got != n:
            bad.append(("allreduce", n, got))
        got = estimate(ProtocolSpec(kind="local_step", n=n, d=3, m=2)).tmix_hat
        if got != 2 * n:
            bad.append(("local_step", n, got))
    verdict(1, not bad, f"allreduce=n and local_step m=2 -> 2n for n in 2..16, mismatches={bad}",
            10.0, time.perf_counter() - t0)


def test_criterion_02_gossip_matches_spectrum():
    t0 = time.perf_counter()
    bad = []
    for n in (4, 8, 16):
        # circulant eigenvalues of the ring matrix (self 1/2, neighbors 1/4):
        # mu_k = 1/2 + cos(2 pi k / n) / 2, so slem = mu_1.
        slem = 0.5 + 0.5 * math.cos(2.0 * math.pi / n)
        lam = 1.0 - slem
        expected = n * math.ceil(math.log(2.0) / math.log(1.0 / slem))
        got = estimate(ProtocolSpec(kind="sync_gossip", n=n, d=3, topology="ring")).tmix_hat
        period = n  # comm_period=1, one gossip application per n slots
        if abs(got - expected) > period:
            bad.append((n, got, expected))
        if got > 2 * n * math.ceil(math.log(n) / lam):
            bad.append((n, got, "slack bound"))
    verdict(2, not bad, f"ring tmix within one period of spectral oracle, n in 4/8/16, mismatches={bad}",
            60.0, time.perf_counter() - t0)


def test_criterion_03_slack_scaling():
    t0 = time.perf_counter()
    n = 4
    bad = []
    for gamma in (1.0, 0.5, 0.1, 0.01):
        got = estimate(ProtocolSpec(kind="slack_average", n=n, d=3, gamma=gamma)).tmix_hat
        if gamma == 1.0:
            expected = 0  # limit of ln2/ln(1/(1-gamma)) as gamma -> 1
        else:
            expected = math.ceil(math.log(2.0) / math.log(1.0 / (1.0 - gamma)))
        if abs(got / n - expected) > 1:
            bad.append((gamma, got, expected))
    verdict(3, not bad, f"slack tmix/n tracks ceil(ln2/ln(1/(1-gamma))) +-1, mismatches={bad}",
            60.0, time.perf_counter() - t0)


def test_criterion_04_contraction_bound_suite():
    t0 = time.perf_counter()
    d = 4
    specs = [
        ProtocolSpec(kind="perfect", n=4, d=d),
        ProtocolSpec(kind="allreduce", n=4, d=d),
        ProtocolSpec(kind="local_step", n=4, d=d, m=2),
        ProtocolSpec(kind="sync_gossip", n=8, d=d, topology="ring"),
        ProtocolSpec(kind="slack_average", n=4, d=d, gamma=0.5),
        ProtocolSpec(kind="sparsified", n=4, d=d, eta=0.25,
                     inner=ProtocolSpec(kind="allreduce", n=4, d=d)),
        ProtocolSpec(kind="async_gossip", n=5, d=d),
        ProtocolSpec(kind="async_ps", n=3, d=d, delay=1),
    ]
    failures = []
    for spec in specs:
        schedule = make_protocol(spec)
        minf = consensus_operator(spec)
        report = estimate_tmix(schedule, minf, probes=64, starts=32)
        randomized = schedule.randomized
        # For randomized schedules the certified halving count is the worst
        # window seen across sampled starts, not the quantile figure.
        tmix = report.worst_window if randomized else report.tmix_hat
        kwargs = {"horizon": 8} if randomized else {}
        bad = verify_lemma1(schedule, minf, tmix, report.xi_hat,
                            probes=64, windows=32, **kwargs)
        if bad:
            failures.append((spec.kind, len(bad)))
    verdict(4, not failures, f"zero contraction-bound violations over 8 protocols x 64 probes x 32 windows, fails={failures}",
            120.0, time.perf_counter() - t0)


def test_criterion_05_perfect_equals_sequential():
    t0 = time.perf_counter()
    worst = 0.0
    for opt in ("sgd", "momentum", "rmsprop", "amsgrad"):
        cfg = RunConfig(
            protocol=ProtocolSpec(kind="perfect", n=4, d=16),
            schedule=StepSchedule(kind="constant", alpha0=0.05),
            T=1000,
            objective="sigmoid_sum",
            objective_seed=2,
            optimizer=opt,
            sigma=0.5,
            seed=11,
            x0_policy="random",
        )
        par = run(cfg)
        seq = sequential_run(cfg)
        rel_f = np.max(np.abs(par.f - seq.f) / np.maximum(np.abs(seq.f), 1e-300))
        rel_g = np.max(np.abs(par.grad_sq - seq.grad_sq) / np.maximum(seq.grad_sq, 1e-300))
        worst = max(worst, rel_f, rel_g)
    verdict(5, worst <= 1e-10, f"parallel perfect-communication trace equals sequential, worst rel err {worst:.2e}",
            30.0, time.perf_counter() - t0)


def _sgd_group(spec, obj_kind, sigma, alpha, T, seeds):
    traces = []
    for seed in range(seeds):
        cfg = RunConfig(
            protocol=spec,
            schedule=StepSchedule(kind="constant", alpha0=alpha),
            T=T,
            objective=obj_kind,
            objective_seed=3,
            optimizer="sgd",
            sigma=sigma,
            seed=seed,
        )
        traces.append(run(cfg))
    return traces


def test_criterion_06_sgd_bounds_hold():
    t0 = time.perf_counter()
    d = 12
    specs = [
        ProtocolSpec(kind="perfect", n=4, d=d),
        ProtocolSpec(kind="allreduce", n=4, d=d),
        ProtocolSpec(kind="sync_gossip", n=8, d=d, topology="ring"),
        ProtocolSpec(kind="sparsified", n=4, d=d, eta=0.25,
                     inner=ProtocolSpec(kind="allreduce", n=4, d=d)),
    ]
    failures = []
    for spec in specs:
        tmix = float(theoretical_tmix(spec))
        for obj_kind in ("quadratic", "sigmoid_sum"):
            L = make_objective(obj_kind, d, seed=3).L
            alpha = 0.4 / (8.0 * tmix * L)
            for sigma in (0.0, 1.0):
                traces = _sgd_group(spec, obj_kind, sigma, alpha, T=4000, seeds=32)
                s2 = sigma * sigma
                for rep in (
                    check_lemma2(traces, tmix, 1.0, L, s2),
                    check_lemma3(traces, L, s2),
                    check_theorem1(traces, L, tmix, 1.0, s2),
                ):
                    if not rep.holds or rep.slack < 0.0:
                        failures.append((spec.kind, obj_kind, sigma, rep.name, rep.slack))
    verdict(6, not failures,
            f"update-gap/descent/stationarity bounds hold on 4 protocols x 2 objectives x 2 noise levels x 32 seeds, fails={failures}",
            600.0, time.perf_counter() - t0)


def test_criterion_07_adaptive_bound_holds():
    t0 = time.perf_counter()
    d = 12
    obj = make_objective("sigmoid_sum", d, seed=5)
    f0_gap = obj.value(np.zeros(d)) - obj.f_star
    failures = []
    for kind in ("amsgrad", "rmsprop"):
        sam = optimizer_config(kind)
        for spec in (ProtocolSpec(kind="perfect", n=4, d=d),
                     ProtocolSpec(kind="allreduce", n=4, d=d)):
            tmix = float(theoretical_tmix(spec))
            traces = []
            for seed in range(32):
                cfg = RunConfig(
                    protocol=spec,
                    schedule=StepSchedule(kind="constant", alpha0=0.05),
                    T=4000,
                    objective="sigmoid_sum",
                    objective_seed=5,
                    optimizer=kind,
                    sigma=1.0,
                    seed=seed,
                )
                traces.append(run(cfg))
            ginf = cfg.build_oracle(obj).ginf
            constants = theorem2_constants(sam, obj.L, ginf, f0_gap, 1.0, d)
            rep = check_theorem2(traces, constants, tmix, 1.0)
            if not rep.holds:
                failures.append((kind, spec.kind, rep.slack))
    verdict(7, not failures, f"adaptive stationarity bound holds for amsgrad/rmsprop x perfect/allreduce x 32 seeds, fails={failures}",
            600.0, time.perf_counter() - t0)


def test_criterion_08_rate_fit():
    t0 = time.perf_counter()
    d = 12
    base_alpha = 6.0
    points = []
    finals_by_T = {}
    for T in (1000, 4000, 16000):
        alpha = base_alpha / math.sqrt(T)
        for m in (1, 2, 8, 32):
            spec = ProtocolSpec(kind="local_step", n=4, d=d, m=m)
            tmix = theoretical_tmix(spec)
            tails = []
            for seed in range(32):
                cfg = RunConfig(
                    protocol=spec,
                    schedule=StepSchedule(kind="constant", alpha0=alpha),
                    T=T,
                    objective="quadratic",
                    objective_seed=3,
                    optimizer="sgd",
                    sigma=1.0,
                    seed=seed,
                )
                tr = run(cfg)
                g = tr.grad_sq
                tails.append(float(g[3 * len(g) // 4:].mean()))
            y = float(np.mean(tails))
            points.append({"T": T, "tmix": tmix, "mean_grad_sq": y})
            finals_by_T.setdefault(T, []).append((tmix, y))
    rep = fit_rate(points)
    a_dev = max(abs(v - rep.a) / rep.a for v in rep.a_by_tmix.values())
    rhos = {
        T: spearman([p[0] for p in pairs], [p[1] for p in pairs])
        for T, pairs in finals_by_T.items()
    }
    ok = rep.b > 0.0 and not rep.clipped and a_dev <= 0.25 and min(rhos.values()) >= 0.8
    verdict(8, ok,
            f"b={rep.b:.4g}>0, per-tmix a deviates {a_dev:.1%}<=25%, spearman(final-regime grad^2 vs tmix) by T={ {k: round(v, 2) for k, v in rhos.items()} } all >=0.8",
            1200.0, time.perf_counter() - t0)


def test_criterion_09_window_sum_property_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    violations = 0
    for _ in range(1000):
        n = int(rng.integers(1, 65))
        a = np.sort(np.abs(rng.standard_normal(n)))[::-1]
        b = np.abs(rng.standard_normal(n))
        rho = float(rng.uniform(0.0, 0.999))
        tper = int(rng.integers(1, 9))
        lin, sq = check_lemma5(a, b, rho, tper)
        violations += (not lin.holds) + (not sq.holds)
    verdict(9, violations == 0, f"window-sum inequalities hold on 1000 random instances, violations={violations}",
            5.0, time.perf_counter() - t0)


def test_criterion_10_adaptive_moment_invariants():
    t0 = time.perf_counter()
    d = 6
    obj = make_objective("sigmoid_sum", d, seed=4)
    rng = np.random.default_rng(12)
    failures = []
    for kind in ("momentum", "rmsprop", "amsgrad"):
        cfg = optimizer_config(kind)
        lcal = sam_lipschitz(cfg, obj.L, obj.Ginf)
        state = SamState.init(d, cfg)
        x = rng.standard_normal(d)
        worst_ratio = 0.0
        v_ok = True
        for _ in range(10_000):
            x = x + 0.1 * rng.standard_normal(d)
            v_before = state.v.copy()
            twin = state.copy()
            delta = sam_delta(state, cfg, obj.grad(x))
            if np.any(state.v < v_before) or np.any(state.v < cfg.c * (1 - 1e-12)):
                v_ok = False
            x_alt = x + rng.standard_normal(d) * 0.25
            delta_alt = sam_delta(twin, cfg, obj.grad(x_alt))
            move = float(np.linalg.norm(x - x_alt))
            if move > 0:
                worst_ratio = max(worst_ratio, float(np.linalg.norm(delta - delta_alt)) / move)
        if not v_ok or worst_ratio > lcal * (1 + 1e-9):
            failures.append((kind, v_ok, worst_ratio, lcal))
    verdict(10, not failures, f"v nondecreasing and >= c, update-Lipschitz ratios under analytic constant, fails={failures}",
            30.0, time.perf_counter() - t0)


def test_criterion_11_pinned_run_determinism(tmp_path):
    t0 = time.perf_counter()
    cfg = os.path.join(os.path.dirname(__file__), "data", "golden.ini")
    out_a, out_b = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(["run", "--config", cfg, "--out", out_a]) == 0
    assert main(["run", "--config", cfg, "--out", out_b]) == 0
    names = sorted(os.path.basename(p) for p in glob.glob(out_a + "/trace_*.csv"))
    same = bool(names) and all(
        open(os.path.join(out_a, f), "rb").read() == open(os.path.join(out_b, f), "rb").read()
        for f in names
    )
    verdict(11, same, f"pinned config reruns byte-identical across {len(names)} trace file(s)",
            30.0, time.perf_counter() - t0)


def test_criterion_12_negative_controls(tmp_path, capsys):
    t0 = time.perf_counter()
    checks = {}

    # (a) a damped, non-idempotent "consensus" operator must be rejected
    spec = ProtocolSpec(kind="allreduce", n=4, d=3)
    schedule = make_protocol(spec)
    corrupt = AverageOperator(schedule.n_blocks, schedule.block_dim, gamma=0.9)
    checks["corrupt_operator_rejected"] = not verify_assumption1(schedule, corrupt)
    checks["honest_operator_accepted"] = verify_assumption1(schedule, consensus_operator(spec))

    # (b) a schedule with no communication can never mix
    iso = ProtocolSpec(kind="no_comm", n=4, d=3)
    sched = make_protocol(iso)
    minf = AverageOperator(sched.n_blocks, sched.block_dim)
    try:
        estimate_tmix(sched, minf, probes=8, starts=4)
        checks["no_comm_raises"] = False
    except MixingNotObservedError as exc:
        checks["no_comm_raises"] = "mixing not observed" in str(exc)

    # (c) corrupting a stored trace must flip the update-gap check to exit 1
    ini = tmp_path / "run.ini"
    ini.write_text(
        "[protocol]\nkind = allreduce\nn = 4\nd = 6\n\n"
        "[objective]\nkind = quadratic\nseed = 3\n\n"
        "[optimizer]\nkind = sgd\n\n"
        "[schedule]\nkind = constant\nalpha0 = 0.02\n\n"
        "[run]\nT = 120\nseeds = 0:2\nsigma = 1.0\n\n"
        "[check]\nwhich = lemma2\nxi = 1.0\n"
    )
    out = str(tmp_path / "out")
    assert main(["run", "--config", str(ini), "--out", out]) == 0
    assert main(["check", "--config", str(ini), "--out", out]) == 0
    victim = sorted(glob.glob(out + "/trace_*.csv"))[0]
    lines = open(victim).read().splitlines()
    col = lines[0].split(",").index("delta_gap_sq")
    rows = [lines[0]]
    for row in lines[1:]:
        cells = row.split(",")
        cells[col] = "1e9"
        rows.append(",".join(cells))
    open(victim, "w").write("\n".join(rows) + "\n")
    checks["corrupt_trace_exit_1"] = main(["check", "--config", str(ini), "--out", out]) == 1
    capsys.readouterr()

    bad = [k for k, v in checks.items() if not v]
    verdict(12, not bad, f"negative controls all trip: {sorted(checks)}, fails={bad}",
            60.0, time.perf_counter() - t0)
