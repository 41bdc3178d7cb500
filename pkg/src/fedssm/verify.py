"""Self-check suite behind ``fedssm verify``.

Each check returns a :class:`CheckResult`; sizes are kept small so the whole
suite finishes in seconds. The test suite runs the same properties at full
size.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import analysis
from .config import AlgorithmKind, RunConfig
from .federation import run_experiment
from .model import Topology, init_params, loss_and_grad
from .sparsification import randk_mask, topk_mask

PASS, FAIL, SKIP = "PASS", "FAIL", "SKIP"


@dataclass
class CheckResult:
    name: str
    status: str
    detail: str

    @property
    def ok(self) -> bool:
        return self.status != FAIL

    def line(self) -> str:
        return f"{self.status} {self.name}: {self.detail}"


def check_gradients(nets: int = 10, h: float = 1e-5, tol: float = 1e-6, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(nets):
        topo = Topology((2, 4, 2) if i % 2 == 0 else (4, 8, 3))
        w = init_params(topo, int(rng.integers(1 << 30)))
        x = rng.standard_normal((8, topo.input_dim))
        y = rng.integers(0, topo.num_classes, 8)
        _, g = loss_and_grad(w, topo, x, y)
        fd = np.empty_like(w)
        for j in range(w.size):
            e = np.zeros_like(w)
            e[j] = h
            fd[j] = (loss_and_grad(w + e, topo, x, y)[0] - loss_and_grad(w - e, topo, x, y)[0]) / (2 * h)
        worst = max(worst, float(np.max(np.abs(fd - g))))
    status = PASS if worst < tol else FAIL
    return CheckResult("gradient_finite_difference", status, f"max abs error {worst:.2e} over {nets} nets")


def contraction_gap(x: np.ndarray, mask: np.ndarray) -> float:
    """``(1 - k/d)||x||^2 - ||x - x*mask||^2``; nonnegative means the property holds."""
    k = int(mask.sum())
    return (1 - k / x.size) * float(x @ x) - float(np.sum(np.where(mask, 0.0, x) ** 2))


def check_k_contraction(tensors: int = 200, randk_trials: int = 2000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(tensors):
        d = int(rng.integers(3, 65))
        x = rng.standard_normal(d) * np.exp(rng.uniform(-3, 3))
        for k in range(1, d + 1):
            if contraction_gap(x, topk_mask(x, k)) < -1e-12 * float(x @ x):
                bad += 1
    x = rng.standard_normal(20)
    k = 5
    errs = np.array([np.sum(np.where(randk_mask(20, k, rng), 0.0, x) ** 2) for _ in range(randk_trials)])
    expected = (1 - k / 20) * float(x @ x)
    z = abs(errs.mean() - expected) / (errs.std(ddof=1) / math.sqrt(randk_trials))
    status = PASS if bad == 0 and z <= 3 else FAIL
    return CheckResult("k_contraction", status, f"top-k violations {bad}; rand-k mean off by {z:.2f} sigma")


def _all_masks(d: int, k: int) -> np.ndarray:
    out = np.zeros((math.comb(d, k), d), dtype=bool)
    for row, idx in enumerate(itertools.combinations(range(d), k)):
        out[row, list(idx)] = True
    return out


def masked_residuals(x: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """``||x * (1 - mask)||`` for every row of ``masks``."""
    return np.sqrt(np.sum(np.where(masks, 0.0, x) ** 2, axis=1))


def check_mask_optimality(triples: int = 30, max_d: int = 8, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(triples):
        d = int(rng.integers(2, max_d + 1))
        k = int(rng.integers(1, d + 1))
        dW, dM, dV = (rng.standard_normal(d) * s for s in (1.0, 0.3, 0.01))
        masks = _all_masks(d, k)
        eW, eM, eV = (masked_residuals(x, masks) for x in (dW, dM, dV))
        tk = [masked_residuals(x, topk_mask(x, k)[None])[0] for x in (dW, dM, dV)]
        if tk[0] > eW.min() * (1 + 1e-12):
            bad += 1
        a, b, c = rng.uniform(1e-3, 10, 3)
        best = (a * eW[:, None, None] + b * eM[None, :, None] + c * eV[None, None, :]).min()
        if a * tk[0] + b * tk[1] + c * tk[2] > best * (1 + 1e-12) + 1e-15:
            bad += 1
    status = PASS if bad == 0 else FAIL
    return CheckResult("mask_optimality", status, f"{bad} non-optimal selections over {triples} triples")


def _small_run(base: RunConfig | None, **overrides) -> RunConfig:
    cfg = base or RunConfig(
        hidden=(8,), synthetic_n=200, synthetic_n_test=50, clients=2, iid=True,
        local_epochs=3, rounds=10, alpha=0.1, eps=0.1, clip=1.0, seed=1,
    )
    return cfg.replace(**overrides).validate()


def check_alpha_one(base: RunConfig | None = None, rounds: int = 10) -> CheckResult:
    cfg = _small_run(base, alpha=1.0, k=None, rounds=rounds, clients=4,
                     probe_deviation=False, histogram_round=-1)
    runs = {kind: run_experiment(cfg.replace(algorithm=kind), keep_states=True)
            for kind in (AlgorithmKind.FEDADAM_SSM, AlgorithmKind.FEDADAM_TOP, AlgorithmKind.VANILLA_FEDADAM)}
    ref = runs[AlgorithmKind.VANILLA_FEDADAM].states
    worst = 0.0
    for res in runs.values():
        for a, b in zip(res.states, ref):
            worst = max(worst, *(float(np.max(np.abs(x - y))) for x, y in ((a.W, b.W), (a.M, b.M), (a.V, b.V))))
    status = PASS if worst <= 1e-12 else FAIL
    return CheckResult("alpha_one_equivalence", status, f"max coordinate gap {worst:.1e} over {rounds} rounds")


def check_lemma1(base: RunConfig | None = None) -> CheckResult:
    cfg = _small_run(base, probe_deviation=False)
    try:
        if math.isinf(cfg.clip):
            raise analysis.PremiseError("premise unmet: clipping disabled")
        res = run_experiment(cfg, keep_states=True)
        out = analysis.lemma1_monitor(res.states, cfg.beta1, cfg.beta2, cfg.local_epochs, cfg.clip)
    except analysis.PremiseError as exc:
        return CheckResult("lemma1_monitor", SKIP, str(exc))
    status = PASS if out["total"] == 0 else FAIL
    return CheckResult("lemma1_monitor", status, f"{out['total']} violations over {out['checked']} rounds")


def check_bound_probe(base: RunConfig | None = None) -> CheckResult:
    cfg = _small_run(base)
    if math.isinf(cfg.clip):
        return CheckResult("deviation_bound_probe", SKIP, "premise unmet: clipping disabled")
    if not cfg.algorithm.uses_adam:
        return CheckResult("deviation_bound_probe", SKIP, "not an Adam-based algorithm")
    res = run_experiment(cfg.replace(probe_deviation=True))
    viol = sum(r["violations"] for r in res.deviation)
    vac = any(r["vacuous"] for r in res.deviation)
    status = PASS if viol == 0 else FAIL
    detail = f"{viol} violations over {len(res.deviation)} rounds, rho={res.rho:.3g}"
    return CheckResult("deviation_bound_probe", status, detail + (" (some points vacuous)" if vac else ""))


def sample_prop1_inputs(n: int, seed: int = 0) -> list[analysis.BoundInputs]:
    """Random bound inputs meeting both recorded conditions of the ordering claim."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        d = int(rng.integers(1, 101))
        G = float(10 ** rng.uniform(-3, 0))
        rho = float(10 ** rng.uniform(-1, 1))
        eps = float(10 ** rng.uniform(-2, 1))
        eta = float(10 ** rng.uniform(-4, -1))
        l = int(rng.integers(1, 31))
        b2_max = min(analysis.prop1_threshold(G, rho, d), 2 * eps / (math.sqrt(d) * G))
        beta2 = float(rng.uniform(0, b2_max))
        side = math.sqrt(d) * G * beta2 / (2 * eps)
        if not (0 < beta2 and side < 1):
            continue
        beta1 = float(rng.uniform(side, 1))
        x = analysis.BoundInputs(eta, beta1, beta2, eps, rho, G, d, l, 32.0)
        chk = analysis.prop1_check(x)
        if not (chk["condition_25"] and chk["theta_gt_lambda_side_condition"]):
            continue
        out.append(x)
    return out


def check_prop1(n: int = 100, seed: int = 0) -> CheckResult:
    holds = 0
    seen: dict[str, int] = {}
    for x in sample_prop1_inputs(n, seed):
        try:
            c = analysis.theorem1_constants(x)
        except analysis.BoundOverflowError:
            continue
        chk = analysis.prop1_check(x)
        seen[chk["ordering"]] = seen.get(chk["ordering"], 0) + 1
        holds += c.gamma > c.theta > c.lam
    status = PASS if holds == n else FAIL
    observed = ", ".join(f"{k} x{v}" for k, v in sorted(seen.items()))
    return CheckResult("prop1_grid", status, f"Gamma>Theta>Lambda in {holds}/{n}; observed {observed}")


def run_all(base: RunConfig | None = None) -> list[CheckResult]:
    checks: list[Callable[[], CheckResult]] = [
        check_gradients,
        check_k_contraction,
        check_mask_optimality,
        lambda: check_alpha_one(base),
        lambda: check_lemma1(base),
        lambda: check_bound_probe(base),
        check_prop1,
    ]
    return [c() for c in checks]
