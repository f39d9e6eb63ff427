"""Acceptance suite: one test and one PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -s`` to see the lines as
they are produced; a normal run repeats them in the terminal summary.
"""

import time

import numpy as np
import pytest

from pdsgdm.compression import CompressorSpec, verify_contraction
from pdsgdm.config import load_config
from pdsgdm.diagnostics import RunMonitor
from pdsgdm.optim import Engine, OptimizerConfig
from pdsgdm.problems import make_problem
from pdsgdm.runner import execute, preset_cells, run, sweep
from pdsgdm.topology import TOPOLOGY_KINDS, TopologyError, build_topology, validate_doubly_stochastic

SEEDS = range(5)


def cfg(**values):
    return load_config('method = "pd_sgdm"', values)


# -- 1 ----------------------------------------------------------------------


def test_criterion_1_exact_identities(verdict):
    problems = {
        "quadratic": {"problem.kind": "quadratic", "problem.dim": 20},
        "logistic": {"problem.kind": "logistic", "problem.dim": 10},
    }
    fails, worst_mp, worst_z, slowest = [], 0.0, 0.0, 0.0
    for pname, pvals in problems.items():
        for method in ("pd_sgdm", "cpd_sgdm"):
            for p in (1, 4):
                extra = {"compression.kind": "scaled_sign"} if method == "cpd_sgdm" else {}
                c = cfg(
                    **pvals,
                    **extra,
                    **{
                        "topology.kind": "ring",
                        "topology.workers": 8,
                        "problem.heterogeneity": 0.5,
                        "optim.method": method,
                        "optim.period": p,
                        "optim.iterations": 500,
                        "optim.eta": 0.01,
                    },
                )
                res = execute(c)
                s = res.summary
                worst_mp = max(worst_mp, s["worst_mean_preserve"])
                worst_z = max(worst_z, s["worst_aux_z"])
                slowest = max(slowest, res.wall_time)
                bad = (
                    s["status"] != 0
                    or s["iterations_done"] != 500
                    or s["worst_mean_preserve"] > 1e-10
                    or s["worst_aux_z"] > 1e-8
                    or res.wall_time >= 30
                )
                if bad:
                    fails.append(f"{pname}/{method}/p={p}")
    ok = not fails
    verdict(1, ok, f"8 configs, worst mean-preserve {worst_mp:.1e}, worst aux-z {worst_z:.1e}, slowest {slowest:.1f}s; failing: {fails or 'none'}")
    assert ok


# -- 2 ----------------------------------------------------------------------


def test_criterion_2_mixing_matrices(verdict):
    checked, fails = 0, []
    for kind in TOPOLOGY_KINDS:
        for K in (1, 2, 4, 8, 16, 25, 64):
            try:
                W = build_topology(kind, K)
            except TopologyError:
                # only the open grid has a shape constraint (square K)
                assert kind == "grid2d" and int(np.sqrt(K)) ** 2 != K
                continue
            checked += 1
            rep = validate_doubly_stochastic(W.weights, 1e-12)
            gap = np.linalg.norm(W.weights - np.full((K, K), 1.0 / K), 2)
            if not rep.passed or abs(gap - (1 - W.rho)) > 1e-10:
                fails.append(f"{kind}{K}")
    rho8 = build_topology("ring", 8).rho
    ring_ok = abs(rho8 - 0.19526) <= 1e-4
    ok = not fails and ring_ok
    verdict(2, ok, f"{checked} matrices checked, ring8 rho={rho8:.6f}; failing: {fails or 'none'}")
    assert ok


# -- 3 ----------------------------------------------------------------------


def test_criterion_3_compression_contraction(verdict):
    lines, fails = [], []
    for d in (1, 10, 1000):
        k = {1: 1, 10: 3, 1000: 10}[d]
        for spec in (
            CompressorSpec("identity"),
            CompressorSpec("top_k", k),
            CompressorSpec("scaled_sign"),
            CompressorSpec("random_k", k),
        ):
            rep = verify_contraction(spec, d, trials=10_000, rng_seed=d)
            if spec.kind == "random_k":
                target = 1 - k / d
                sigma = rep.std_ratio / np.sqrt(rep.n_samples)
                good = abs(rep.mean_ratio - target) <= 3 * sigma + 1e-15
            else:
                good = rep.n_violations == 0
            if not good:
                fails.append(f"{spec.kind}/d={d}")
            lines.append(good)
    ok = not fails
    verdict(3, ok, f"{len(lines)} (operator, d) pairs over 10000 vectors each; failing: {fails or 'none'}")
    assert ok


# -- 4 ----------------------------------------------------------------------


def test_criterion_4_consensus_bounds(verdict):
    total, fails, tightest = 0, [], 0.0
    for method in ("pd_sgdm", "cpd_sgdm"):
        for p in (4, 8, 16):
            for seed in SEEDS:
                prob = make_problem("logistic", 10, 100, 8, heterogeneity=0.5, seed=seed)
                eta = 0.9 * (1 - 0.9) ** 2 / (2 * prob.smoothness())
                comp = CompressorSpec("scaled_sign") if method == "cpd_sgdm" else None
                e = Engine(prob, build_topology("ring", 8), OptimizerConfig(method, eta=eta, mu=0.9, p=p, T=1000), comp, batch_size=1, seed=seed)
                mon = RunMonitor(e, stride=1, check_bound=True)
                for _ in range(1000):
                    mon.observe(e.step())
                total += 1
                ratio = max(r.consensus / r.consensus_bound_rhs for r in mon.records if r.consensus_bound_rhs)
                tightest = max(tightest, ratio)
                if mon.violations["consensus_bound"]:
                    fails.append(f"{method}/p={p}/seed={seed}")
    ok = not fails
    verdict(4, ok, f"{total} logistic runs x 1000 steps, max consensus/bound {tightest:.2e}; violating: {fails or 'none'}")
    assert ok


# -- 5 ----------------------------------------------------------------------


def _xbar_trajectory(method, mixing, mu=0.9, p=1, comp=None, gamma=None, T=200, seed=3):
    prob = make_problem("quadratic", 10, 50, mixing.K, heterogeneity=0.5, seed=1)
    e = Engine(prob, mixing, OptimizerConfig(method, eta=0.01, mu=mu, p=p, T=T, gamma=gamma), comp, batch_size=2, seed=seed)
    xs, Xs, comm = [], [], []
    for _ in range(T):
        info = e.step()
        xs.append(e.mean_x())
        Xs.append(e.stacked().copy())
        comm.append(info.communicated)
    return np.array(xs), Xs, comm


def test_criterion_5_baseline_equivalence(verdict):
    full = build_topology("complete", 8)
    ring = build_topology("ring", 8)

    a, _, _ = _xbar_trajectory("pd_sgdm", full, p=1)
    c, _, _ = _xbar_trajectory("c_sgdm", full, p=1)
    dev_central = float(np.max(np.abs(a - c)))

    _, X1, _ = _xbar_trajectory("pd_sgdm", ring, mu=0.0, p=4)
    _, X2, _ = _xbar_trajectory("pd_sgd", ring, mu=0.0, p=4)
    dev_sgd = max(float(np.max(np.abs(u - v))) for u, v in zip(X1, X2))

    dev_cpd = 0.0
    for p in (1, 4):
        _, Xp, comm = _xbar_trajectory("pd_sgdm", full, p=p)
        _, Xc, _ = _xbar_trajectory("cpd_sgdm", full, p=p, comp=CompressorSpec("identity"), gamma=1.0)
        for u, v, done in zip(Xp, Xc, comm):
            if done:
                dev_cpd = max(dev_cpd, float(np.max(np.abs(u - v))))

    parts = {
        "pd(p=1,complete)~c_sgdm": dev_central <= 1e-10,
        "pd(mu=0)~pd_sgd": dev_sgd <= 1e-10,
        "cpd(identity,gamma=1,complete)~pd": dev_cpd <= 1e-8,
    }
    ok = all(parts.values())
    detail = f"devs {dev_central:.1e} / {dev_sgd:.1e} / {dev_cpd:.2e}; " + ", ".join(
        f"{k} {'ok' if v else 'FAIL'}" for k, v in parts.items()
    )
    verdict(5, ok, detail)
    assert ok


# -- 6 and 7 ----------------------------------------------------------------


@pytest.fixture(scope="module")
def quadratic_runs():
    base, _ = preset_cells("compressed")
    cells = [{"optim.method": "c_sgdm", "optim.period": 1}]
    cells += [{"optim.method": "pd_sgdm", "optim.period": p} for p in (4, 8, 16)]
    cells += [{"optim.method": "cpd_sgdm", "optim.period": p, "compression.kind": "scaled_sign"} for p in (4, 8, 16)]
    res = sweep(base, cells, repeats=len(SEEDS), write=False)
    out = {}
    for row, r in zip(res.rows, res.results):
        out.setdefault((row["optim.method"], row["optim.period"]), []).append(r)
    return base, out


def _median_subopt(results):
    return float(np.median([r.summary["final_suboptimality"] for r in results]))


@pytest.mark.slow
def test_criterion_6_periodic_matches_centralized(verdict, quadratic_runs):
    _, runs = quadratic_runs
    central = _median_subopt(runs[("c_sgdm", 1)])
    ratios = {p: _median_subopt(runs[("pd_sgdm", p)]) / central for p in (4, 8, 16)}
    wall = sum(r.wall_time for key, rs in runs.items() if key[0] != "cpd_sgdm" for r in rs)
    ok = all(0.5 <= v <= 2.0 for v in ratios.values()) and wall < 120
    verdict(6, ok, f"c_sgdm median {central:.3e}; pd/c ratios " + ", ".join(f"p={p}: {v:.2f}" for p, v in ratios.items()) + f"; runtime {wall:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_7_compressed_matches_full_precision(verdict, quadratic_runs):
    base, runs = quadratic_runs
    d = base["problem.dim"]
    exact_ratio = (d + 64) / (64 * d)
    parts = []
    ok = True
    for p in (4, 8, 16):
        pd, cpd = runs[("pd_sgdm", p)], runs[("cpd_sgdm", p)]
        ratio = _median_subopt(cpd) / _median_subopt(pd)
        bits = [c.summary["total_bits"] / f.summary["total_bits"] for c, f in zip(cpd, pd)]
        good = 1 / 3 <= ratio <= 3 and all(b <= 1 / 16 and abs(b - exact_ratio) < 1e-12 for b in bits)
        ok &= good
        parts.append(f"p={p}: subopt ratio {ratio:.2f}, bits ratio {bits[0]:.5f}")
    verdict(7, ok, "; ".join(parts) + f" (exact {exact_ratio:.5f})")
    assert ok


# -- 8 ----------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_8_linear_speedup(verdict):
    base, cells = preset_cells("speedup")
    res = sweep(base, cells, repeats=len(SEEDS), write=False)
    by_k: dict[int, list[float]] = {}
    for row in res.rows:
        t = row["ttt_grad_norm_sq"]
        by_k.setdefault(row["topology.workers"], []).append(np.inf if t is None else t)
    meds = [float(np.median(by_k[K])) for K in (1, 2, 4, 8)]
    ok = all(a > b for a, b in zip(meds, meds[1:])) and np.isfinite(meds[-1])
    verdict(8, ok, "median time-to-threshold for K=1,2,4,8: " + ", ".join(f"{m:g}" for m in meds))
    assert ok


# -- 9 ----------------------------------------------------------------------


def test_criterion_9_determinism(verdict, tmp_path):
    base_q, _ = preset_cells("compressed")
    base_s, _ = preset_cells("speedup")
    short = {"optim.iterations": 300, "record_stride": 10}
    configs = {
        "pd_sgdm": base_q.with_overrides({**short, "optim.method": "pd_sgdm", "optim.period": 8}),
        "cpd_sgdm/scaled_sign": base_q.with_overrides({**short, "optim.method": "cpd_sgdm", "compression.kind": "scaled_sign"}),
        "cpd_sgdm/random_k": base_q.with_overrides({**short, "optim.method": "cpd_sgdm", "compression.kind": "random_k", "compression.k": 5}),
        "speedup K=8": base_s.with_overrides({**short, "topology.workers": 8}),
    }
    fails = []
    for name, c in configs.items():
        a = run(c, tmp_path / name.replace("/", "_") / "a")
        b = run(c, tmp_path / name.replace("/", "_") / "b")
        if (a.out_dir / "metrics.csv").read_bytes() != (b.out_dir / "metrics.csv").read_bytes():
            fails.append(name)
    ok = not fails
    verdict(9, ok, f"{len(configs)} configs run twice; differing CSVs: {fails or 'none'}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-s", "-q"]))
