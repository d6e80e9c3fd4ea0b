"""Seeded battery of numerical checks on the entropy results."""

import math
import time

import numpy as np

from .errors import InsufficientSamples
from .infotheory import (
    LOG2_2PIE,
    MIN_MC_SAMPLES,
    ActivationSpec,
    CheckReport,
    GaussianChannel,
    check_contractive,
    entropy_via_det,
    gaussian_output_entropy,
    knn_entropy,
    mc_entropy_bound_check,
    mean_invariance_check,
    scale_shift_check,
    theorem1_numeric_check,
)
from .rng import box_muller, make_rng

BOUND_ACTIVATIONS = ("tanh", "sigmoid", "softplus", "leaky_relu(0.01)")


def random_full_rank_channel(rng, max_dim, sigma_x=1.0):
    """Gaussian ``W`` with ``m <= n <= max_dim``."""
    n = int(rng.integers(1, max_dim + 1))
    m = int(rng.integers(1, n + 1))
    return GaussianChannel(box_muller(rng, (m, n)), sigma_x)


def check_dual_path(count=200, max_dim=8, seed=0, tol=1e-9):
    rng = make_rng((seed, 31))
    worst = 0.0
    for _ in range(count):
        ch = random_full_rank_channel(rng, max_dim, sigma_x=float(rng.uniform(0.5, 2.0)))
        sig = np.linalg.svd(ch.W, compute_uv=False)
        a = gaussian_output_entropy(sig, ch.m, ch.sigma_x)
        b = entropy_via_det(ch)
        worst = max(worst, abs(a - b) / max(1.0, abs(a)))
    return CheckReport("entropy_dual_path", worst <= tol, {"max_relative_gap": worst, "count": count},
                       {"relative": tol}, seed)


def check_knn_anchor(m, n_samples, seed=0, tol=0.03):
    x = box_muller(make_rng((seed, 41, m)), (n_samples, m))
    est = knn_entropy(x)
    exact = 0.5 * m * LOG2_2PIE
    return CheckReport(f"knn_anchor[m={m}]", abs(est - exact) <= tol,
                       {"knn_bits": est, "exact_bits": exact, "n_samples": n_samples},
                       {"abs_bits": tol}, seed)


def check_activation_bound(act_text, n_channels, n_samples, max_dim, seed=0):
    act = ActivationSpec.parse(act_text)
    rng = make_rng((seed, 51))
    rows = []
    ok = check_contractive(act, seed=seed) <= 1.0
    for i in range(n_channels):
        ch = random_full_rank_channel(rng, max_dim)
        rep = mc_entropy_bound_check(ch, act, n_samples, seed=seed * 1000 + i)
        rows.append({"m": ch.m, "n": ch.n, "correction": rep.correction,
                     "std_err": rep.mc_std_err, "bound": rep.correction_bound})
        ok = ok and rep.bound_holds and rep.correction <= 3.0 * rep.mc_std_err
    return CheckReport(f"activation_bound[{act}]", ok, {"channels": rows},
                       {"std_errs_above_bound": 3.0}, seed)


def check_identity_exact(n_channels, n_samples, max_dim, seed=0):
    rng = make_rng((seed, 61))
    corrections = []
    for i in range(n_channels):
        ch = random_full_rank_channel(rng, max_dim)
        rep = mc_entropy_bound_check(ch, ActivationSpec("identity"), n_samples, seed=seed * 1000 + i)
        corrections.append(rep.correction)
    return CheckReport("activation_bound[identity]", all(c == 0.0 for c in corrections),
                       {"corrections": corrections}, {"exact": 0.0}, seed)


def check_spread_monotone(C=2.0, steps=200):
    """With ``sigma = (sqrt(C - t^2), t)``, entropy increases in ``t`` on ``(0, sqrt(C/2)]``."""
    ts = np.linspace(math.sqrt(C / 2) / steps, math.sqrt(C / 2), steps)
    h = [gaussian_output_entropy([math.sqrt(C - t * t), t], 2) for t in ts]
    diffs = np.diff(h)
    return CheckReport("kappa_entropy_monotone", bool(np.all(diffs > 0)),
                       {"min_step_gain": float(diffs.min()), "C": C}, {"strict": True})


def run_verification(samples=100_000, seed=0, max_dim=8):
    """All checks as a list of :class:`CheckReport`."""
    if samples < MIN_MC_SAMPLES:
        raise InsufficientSamples(f"--samples {samples}: Monte Carlo checks need >= {MIN_MC_SAMPLES}")
    if max_dim < 1:
        raise ValueError("max_dim must be >= 1")
    reports = [check_dual_path(200, max_dim, seed)]
    for m in (1, 2, 3):
        if m <= max_dim:
            reports.append(check_knn_anchor(m, samples, seed))
    for C in (1.0, 2.0, 4.0):
        for p in (2, 4, 8):
            if p <= max_dim:
                reports.append(theorem1_numeric_check(C, p, 100, seed))
    for act in BOUND_ACTIVATIONS:
        reports.append(check_activation_bound(act, 5, samples, max_dim, seed))
    reports.append(check_identity_exact(5, samples, max_dim, seed))
    for m in (1, 2, 3):
        for c in (0.5, 2.0, 10.0):
            reports.append(scale_shift_check(m, c, samples, seed))
    shift_rng = make_rng((seed, 71))
    ch = random_full_rank_channel(shift_rng, min(max_dim, 3))
    reports.append(mean_invariance_check(ch, 3.0 * box_muller(shift_rng, ch.n), samples, seed))
    reports.append(check_spread_monotone())
    return reports


def verification_document(samples=100_000, seed=0, max_dim=8):
    start = time.perf_counter()
    reports = run_verification(samples, seed, max_dim)
    return {
        "kind": "verification",
        "settings": {"samples": samples, "seed": seed, "max_dim": max_dim},
        "checks": [r.to_dict() for r in reports],
        "all_passed": all(r.passed for r in reports),
        "runtime_s": round(time.perf_counter() - start, 3),
    }
