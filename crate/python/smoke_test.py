#!/usr/bin/env python3
"""Smoke test for the coherent_risk_py extension module.

Builds nothing itself: locates the compiled cdylib under target/, copies it
next to a temp directory under the importable name, and exercises the main
entry points. Run after `cargo build -p coherent-risk-py` (or --release):

    python3 python/smoke_test.py
"""

import json
import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_module():
    candidates = [
        os.path.join(ROOT, "target", profile, name)
        for profile in ("release", "debug")
        for name in ("libcoherent_risk_py.so", "coherent_risk_py.so")
    ]
    src = next((p for p in candidates if os.path.exists(p)), None)
    if src is None:
        sys.exit("build the extension first: cargo build -p coherent-risk-py")
    tmp = tempfile.mkdtemp(prefix="coherent_risk_py_")
    shutil.copy(src, os.path.join(tmp, "coherent_risk_py.so"))
    sys.path.insert(0, tmp)
    import coherent_risk_py

    return coherent_risk_py


def approx(a, b, tol=1e-9):
    assert abs(a - b) < tol, f"{a} != {b} (tol {tol})"


def main():
    cr = load_module()

    # Risk values: CVaR of the worst half of a uniform 4-point cost.
    approx(cr.risk_value("cvar", 0.5, [0.25] * 4, [1.0, 2.0, 3.0, 4.0]), 3.5)
    rho, xi, lam_p = cr.risk_saddle("cvar", 0.5, [0.25] * 4, [1.0, 2.0, 3.0, 4.0])
    approx(rho, 3.5)
    approx(lam_p, 2.0)
    assert xi == [0.0, 0.0, 2.0, 2.0], xi

    # Mean-semideviation closed form on a two-point cost.
    approx(cr.risk_value("msd", 1.0, [0.5, 0.5], [0.0, 2.0]), 1.0 + math.sqrt(0.5))

    # Exact static gradient vs central finite differences of the exact CVaR
    # on a 3-atom softmax model.
    theta = [0.3, -0.2, 0.5]
    costs = [1.0, 2.5, -0.5]
    alpha = 0.4

    def model(th):
        m = max(th)
        e = [math.exp(t - m) for t in th]
        s = sum(e)
        return [v / s for v in e]

    def exact_cvar(th):
        probs = model(th)
        pairs = sorted(zip(costs, probs), reverse=True)
        mass, acc = alpha, 0.0
        for z, p in pairs:
            take = min(p, mass)
            acc += take * z
            mass -= take
            if mass <= 0:
                break
        return acc / alpha

    probs = model(theta)
    scores = [
        [(1.0 if k == i else 0.0) - probs[k] for k in range(3)] for i in range(3)
    ]
    grad = cr.static_gradient("cvar", alpha, probs, scores, costs)
    h = 1e-6
    for k in range(3):
        up, dn = list(theta), list(theta)
        up[k] += h
        dn[k] -= h
        fd = (exact_cvar(up) - exact_cvar(dn)) / (2 * h)
        approx(grad[k], fd, 1e-5)

    # Sampled estimators accept (cost, score) draws.
    g0 = cr.gmsd_gradient([1.0, 2.0, 3.0, 4.0], [[0.1], [0.2], [-0.1], [-0.2]], 0.0)
    mean_lr = sum(s[0] * c for s, c in zip([[0.1], [0.2], [-0.1], [-0.2]], [1, 2, 3, 4])) / 4
    approx(g0[0], mean_lr)

    # Finite MDP: expectation value matches the linear solve, and the
    # dynamic gradient matches finite differences of the value function.
    mdp_doc = {
        "n_states": 2,
        "n_actions": 2,
        "gamma": 0.5,
        "x0": 0,
        "cost": [[1.0, 0.2], [-0.4, 0.9]],
        "kernel": [
            [[0.7, 0.3], [0.2, 0.8]],
            [[0.5, 0.5], [0.9, 0.1]],
        ],
    }
    mdp = cr.FiniteMdp.from_json(json.dumps(mdp_doc))
    assert mdp.n_states() == 2 and mdp.theta_dim() == 4
    th = [0.1, -0.3, 0.2, 0.4]
    v = mdp.value("cvar", 0.8, th)
    g = mdp.dynamic_gradient("cvar", 0.8, th)
    for k in range(4):
        up, dn = list(th), list(th)
        up[k] += h
        dn[k] -= h
        fd = (mdp.value("cvar", 0.8, up)[0] - mdp.value("cvar", 0.8, dn)[0]) / (2 * h)
        approx(g[k], fd, 1e-4)
    assert len(v) == 2

    traj = mdp.simulate(th, 5, seed=3)
    assert len(traj) == 5 and traj == mdp.simulate(th, 5, seed=3)

    # Benchmark entry point emits the probability trace.
    cfg = {
        "objective": {"risk": "expectation"},
        "estimator": "gmsd",
        "samples_per_iter": 200,
        "sgd": {"iters": 3, "seed": 7},
    }
    csv = cr.bench_assets(json.dumps(cfg))
    lines = csv.strip().splitlines()
    assert lines[0] == "iter,p_a1,p_a2,p_a3" and len(lines) == 5

    # Errors map to Python exceptions.
    try:
        cr.risk_value("cvar", 1.5, [1.0], [0.0])
    except RuntimeError:
        pass
    else:
        raise AssertionError("expected an error for alpha out of range")

    print("coherent_risk_py smoke test: all checks passed")


if __name__ == "__main__":
    main()
