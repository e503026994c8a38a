"""Offline checks that need no dataset: gradients, noise moments, budget table."""

from __future__ import annotations

import math
import time

import numpy as np

from .dataset import FEATURE_DIM
from .nn import finite_diff_check
from .privacy import BudgetPlan, gaussian_sigma_for, sample_laplace
from .recommender import batch_loss, init_params, loss_and_grad
from .rng import substream

EXPECTED_LAMBDAS = {30: 0.0333, 40: 0.025, 50: 0.020, 60: 0.0167}


def lambda_table(eps_values=(30, 40, 50, 60), delta: float = 0.5) -> dict[int, float]:
    """Laplace scale for each single budget, via the adaptive rule with eps_min = eps_max."""
    out = {}
    for eps in eps_values:
        plan = BudgetPlan(mode="adaptive", eps_min=eps, eps_max=eps, delta=delta)
        out[eps] = plan.tag_scales()["User"]
    return out


def check_lambda_table() -> tuple[bool, str]:
    table = lambda_table()
    ok = all(abs(table[e] - v) < 5e-5 for e, v in EXPECTED_LAMBDAS.items())
    return ok, ", ".join(f"eps={e}: {table[e]:.4f}" for e in sorted(table))


def random_instance(d: int, rng: np.random.Generator, batch: int = 6):
    """A random local-model problem with non-degenerate ReLU activations."""
    theta = init_params(d, d, rng, std=0.5)
    x_u = rng.random(FEATURE_DIM)
    xbar = rng.standard_normal(d) / 2
    x_items = rng.standard_normal((batch, d))
    labels = rng.integers(0, 2, batch).astype(float)
    return theta, x_u, xbar, x_items, labels


def check_gradients(n_instances: int = 20, d: int = 8, tol: float = 1e-4, seed: int = 0) -> tuple[bool, str]:
    worst = 0.0
    for i in range(n_instances):
        theta, x_u, xbar, x_items, labels = random_instance(d, substream(seed, "gradcheck", i))
        _, g = loss_and_grad(theta, x_u, xbar, x_items, labels)
        rep = finite_diff_check(lambda p: batch_loss(p, x_u, xbar, x_items, labels), theta, g, h=1e-5, tol=tol)
        worst = max(worst, rep.max_rel_error)
    return worst <= tol, f"{n_instances} instances at d={d}, max relative error {worst:.2e}"


def check_noise_moments(lam: float = 0.0333, n: int = 1_000_000, seed: int = 0) -> tuple[bool, str]:
    x = sample_laplace(lam, substream(seed, "selftest", "laplace"), n)
    bias = abs(float(x.mean()))
    var_err = abs(float(x.var()) / (2 * lam * lam) - 1)
    sigma = gaussian_sigma_for(lam)
    g = substream(seed, "selftest", "gauss").normal(0.0, sigma, n)
    g_err = abs(float(g.var()) / (2 * lam * lam) - 1)
    ok = bias < 3e-4 and var_err < 0.02 and g_err < 0.02
    return ok, f"|mean| {bias:.1e}, Laplace var err {var_err:.2%}, Gaussian var err {g_err:.2%}"


CHECKS = (
    ("lambda table", check_lambda_table),
    ("gradients", check_gradients),
    ("noise moments", check_noise_moments),
)


def run_selftest(verbose: bool = False) -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        ok, detail = fn()
        results.append((name, ok, detail))
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'} {name}: {detail} ({time.perf_counter() - t0:.1f} s)")
    return results
