"""Closed-form diagnostics: uplink totals, deviation-bound constants, the
mask-ordering conditions, moment bounds, update-magnitude histograms and
gradient-norm series."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import AlgorithmKind
from .sparsification import index_bits


# -- uplink accounting -------------------------------------------------------


def uplink_total(kind: AlgorithmKind | str, N: int, d: int, k: int, q: int) -> int:
    """Uplink bits per round for ``N`` clients under the cheaper position encoding."""
    kind = AlgorithmKind(kind)
    lg = index_bits(d)
    if kind is AlgorithmKind.VANILLA_FEDADAM:
        return 3 * N * d * q
    if kind is AlgorithmKind.FEDADAM_TOP:
        return min(3 * N * (k * q + d), 3 * N * k * (q + lg))
    if kind is AlgorithmKind.FEDADAM_SSM:
        return min(N * (3 * k * q + d), N * k * (3 * q + lg))
    if kind is AlgorithmKind.FEDSGD:
        return N * d * q
    return min(N * (k * q + d), N * k * (q + lg))


# -- deviation bound constants ------------------------------------------------


class BoundOverflowError(ArithmeticError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"bound vacuous (overflow in {name})")


@dataclass(frozen=True)
class BoundInputs:
    eta: float
    beta1: float
    beta2: float
    eps: float
    rho: float
    G: float
    d: int
    l: int
    batch: float  # mini-batch size of the client the bound is evaluated for
    sigma_l: float = 0.0
    sigma_g: float = 0.0

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("need beta1 in [0, 1) and beta2 in (0, 1)")
        for name in ("eta", "eps", "rho", "G", "d", "batch"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.l < 0:
            raise ValueError("l must be >= 0")


@dataclass(frozen=True)
class BoundConstants:
    phi: float
    psi: float
    chi: float
    gamma: float
    lam: float
    theta: float
    Phi: float
    inputs: BoundInputs

    def bound(self, err_W: float, err_M: float, err_V: float) -> float:
        return self.gamma * err_W + self.lam * err_M + self.theta * err_V + self.Phi


def _finite(name: str, value: float) -> float:
    if not math.isfinite(value):
        raise BoundOverflowError(name)
    return value


def _pow(name: str, base: float, exp: int) -> float:
    try:
        return _finite(name, math.pow(base, exp))
    except OverflowError:
        raise BoundOverflowError(name) from None


def theorem1_constants(x: BoundInputs) -> BoundConstants:
    """Weights of the model/moment sparsification errors and the variance term
    in the bound on ``||w_n^{l,t} - w_check^{l,t}||``."""
    eta, b1, b2, eps, rho, G, d, l = x.eta, x.beta1, x.beta2, x.eps, x.rho, x.G, x.d, x.l
    se = math.sqrt(eps)
    noise = x.sigma_l / math.sqrt(x.batch) + x.sigma_g
    vterm = 1.0 + (1.0 - b2) * d * G * G / eps

    phi = b1 / math.sqrt(b2)
    psi = _finite("psi", 1.0 + phi + eta * rho * (1.0 - b1) / se * vterm)
    chi = _finite(
        "chi",
        d * G * eta * (2 * b1 * (1 - math.sqrt(b2)) / (eps * math.sqrt(eps * b2)) * (G * G + eps)
                       + (1 - b1) * b2 / (eps * se) * G * G)
        + (1 - b1) * eta * noise / se * vterm,
    )
    S = _finite("sqrt(psi^2 + 4 phi)", math.sqrt(psi * psi + 4 * phi))
    r_hi = (psi + S) / 2
    r_lo = (psi - S) / 2  # in (-1, 0)
    p_hi = _pow("psi-root power", r_hi, l)
    p_lo = math.pow(r_lo, l)
    spread = p_hi - p_lo

    c = _finite("gamma", d * G * G * eta * rho / (eps * se) * b1 * (1 - b2))
    gamma = _finite("gamma", (p_lo * (phi + (S - psi) / 2 - c) + ((S + psi) / 2 - phi + c) * p_hi) / S)
    lam = _finite("lambda", eta * b1 / (se * S) * spread)
    theta = _finite("theta", math.sqrt(d) * G * eta * b2 / (2 * eps * se * S) * spread)
    # the bracket vanishes identically at l = 0 and l = 1; evaluating it there only adds rounding noise
    bracket = 0.0 if l <= 1 else ((1 - r_hi) * p_lo - (1 - r_lo) * p_hi) / S + 1
    Phi = _finite(
        "Phi",
        noise / S * (eta / se * (1 - b1) + d * G * G * eta / (eps * se) * (1 - b2)) * spread
        + chi / (1 - psi - phi) * bracket,
    )
    return BoundConstants(phi, psi, chi, gamma, lam, theta, Phi, x)


def prop1_threshold(G: float, rho: float, d: int) -> float:
    return 1.0 - 1.0 / (1.0 + 2.0 * G * rho * math.sqrt(d))


def prop1_check(x: BoundInputs) -> dict:
    """Both recorded conditions plus the ordering actually observed."""
    c = theorem1_constants(x)
    named = sorted([("Gamma", c.gamma), ("Theta", c.theta), ("Lambda", c.lam)], key=lambda p: -p[1])
    parts = [named[0][0]]
    for (_, prev), (name, val) in zip(named, named[1:]):
        parts.append((">" if prev > val else "=") + name)
    return {
        "condition_25": x.beta2 < prop1_threshold(x.G, x.rho, x.d),
        "theta_gt_lambda_side_condition": x.beta1 > math.sqrt(x.d) * x.G * x.beta2 / (2 * x.eps),
        "ordering": "".join(parts),
        "gamma": c.gamma,
        "theta": c.theta,
        "lambda": c.lam,
    }


def weighted_sparsification_error(dW, dM, dV, masks, weights) -> float:
    """``sum_i weight_i * ||delta_i * (1 - mask_i)||`` over the three update tensors."""
    total = 0.0
    for x, mask, w in zip((dW, dM, dV), masks, weights):
        x = np.asarray(x, dtype=np.float64)
        total += w * float(np.linalg.norm(np.where(mask, 0.0, x)))
    return total


# -- moment bounds ----------------------------------------------------------------


class PremiseError(RuntimeError):
    pass


LEMMA1_RTOL = 1e-12


def lemma1_bounds(t: int, L: int, beta1: float, beta2: float, G: float) -> tuple[float, float]:
    s = L * t
    return G * (1 - beta1 ** s), G * G * (1 - beta2 ** s)


def lemma1_monitor(states, beta1: float, beta2: float, L: int, G: float) -> dict:
    """Count coordinates of materialized global ``M^t``/``V^t`` above their bounds.

    ``states`` is any sequence of objects with ``t``, ``M`` and ``V``. An
    infinite ``G`` means clipping was off, so the bound has no premise.
    """
    if not math.isfinite(G):
        raise PremiseError("premise unmet: clipping disabled")
    m_viol = v_viol = 0
    for st in states:
        bm, bv = lemma1_bounds(st.t, L, beta1, beta2, G)
        m_viol += int(np.count_nonzero(np.abs(st.M) > bm * (1 + LEMMA1_RTOL)))
        v_viol += int(np.count_nonzero(np.abs(st.V) > bv * (1 + LEMMA1_RTOL)))
    return {"M": m_viol, "V": v_viol, "total": m_viol + v_viol, "checked": len(states)}


# -- histograms -----------------------------------------------------------------


@dataclass
class HistogramSpec:
    edges: np.ndarray
    counts: dict[str, np.ndarray]
    medians: dict[str, float]
    empty: dict[str, bool]

    def to_csv(self) -> str:
        lines = ["bin_left,bin_right,count_W,count_M,count_V"]
        for i in range(self.edges.size - 1):
            lines.append(
                f"{self.edges[i]!r},{self.edges[i + 1]!r},"
                f"{self.counts['W'][i]},{self.counts['M'][i]},{self.counts['V'][i]}"
            )
        return "\n".join(lines) + "\n"


def _log_magnitudes(x) -> np.ndarray:
    a = np.abs(np.asarray(x, dtype=np.float64).ravel())
    a = a[np.isfinite(a) & (a > 0)]
    return np.log10(a)


def magnitude_histogram(dW, dM, dV, bins: int = 40) -> HistogramSpec:
    """Shared-bin histograms of ``log10|x|`` over nonzero finite entries."""
    if bins < 2:
        raise ValueError("need at least 2 bins")
    logs = {"W": _log_magnitudes(dW), "M": _log_magnitudes(dM), "V": _log_magnitudes(dV)}
    pooled = np.concatenate(list(logs.values()))
    if pooled.size == 0:
        lo, hi = 0.0, 1.0
    else:
        lo, hi = float(pooled.min()), float(pooled.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    counts = {k: np.histogram(v, edges)[0] for k, v in logs.items()}
    medians = {k: (float(np.median(v)) if v.size else math.nan) for k, v in logs.items()}
    return HistogramSpec(edges, counts, medians, {k: v.size == 0 for k, v in logs.items()})


# -- gradient norms and run summaries -------------------------------------------------


def gradnorm_series(series: Sequence[float]) -> tuple[float, list[float]]:
    vals = [float(s) for s in series]
    if not vals or any(math.isnan(v) for v in vals):
        raise ValueError("missing gradient-norm probe data")
    return float(np.mean(vals)), vals


def rounds_to_target(test_acc: Sequence[float], target: float) -> float:
    """First 1-based round reaching ``target``; ``inf`` if never reached."""
    for t, acc in enumerate(test_acc, 1):
        if acc >= target:
            return float(t)
    return math.inf


def bits_to_target(test_acc: Sequence[float], cum_bits: Sequence[int], target: float) -> float:
    r = rounds_to_target(test_acc, target)
    return math.inf if math.isinf(r) else float(cum_bits[int(r) - 1])


# -- empirical constants ------------------------------------------------------


def estimate_lipschitz(objective, center: np.ndarray, pairs: int = 1000, seed: int = 0,
                       radius: float = 0.1, step: float = 1e-3) -> float:
    """Largest secant ratio ``||grad(x) - grad(y)|| / ||x - y||`` over random pairs
    near ``center``."""
    rng = np.random.default_rng([seed, 7919])
    best = 0.0
    for _ in range(pairs):
        x = center + radius * rng.standard_normal(center.size)
        y = x + step * rng.standard_normal(center.size)
        gx = objective(x)[1]
        gy = objective(y)[1]
        best = max(best, float(np.linalg.norm(gx - gy) / np.linalg.norm(x - y)))
    return best


def estimate_sigmas(topology, train, clients, W) -> tuple[float, float]:
    """``(sigma_l, sigma_g)`` at ``W``.

    ``sigma_l`` is the largest per-client RMS deviation of single-sample
    gradients from that client's full gradient; ``sigma_g`` is the largest
    client-vs-global full-gradient gap.
    """
    from .model import per_sample_grads

    grads = per_sample_grads(W, topology, train.features, train.labels)
    g_all = grads.mean(axis=0)
    sl = sg = 0.0
    for c in clients:
        gc = grads[c.indices]
        mean_c = gc.mean(axis=0)
        sl = max(sl, float(np.sqrt(np.mean(np.sum((gc - mean_c) ** 2, axis=1)))))
        sg = max(sg, float(np.linalg.norm(mean_c - g_all)))
    return sl, sg
