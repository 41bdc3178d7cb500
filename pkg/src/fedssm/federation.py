"""Round orchestration for FedAdam-SSM, FedAdam-Top, vanilla FedAdam and the
FedSGD baselines, plus the deviation probe against centralized Adam."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Optional

import numpy as np

from . import analysis
from .config import AlgorithmKind, RunConfig
from .datasets import (
    Dataset,
    dirichlet_partition,
    generate_synthetic,
    iid_partition,
    load_idx_dataset,
    rng_stream,
)
from .local_adam import (
    ClientData,
    Hyperparams,
    MLPObjective,
    Objective,
    centralized_adam_run,
    local_train,
    sgd_local_train,
)
from .model import Topology, evaluate, init_params
from .numerics import l2_norm, weighted_mean
from .sparsification import (
    SparseUpdate,
    SparseVector,
    SsmVariant,
    choose_wire_mode,
    decode_update,
    decode_vector,
    encode_update,
    encode_vector,
    ssm_select,
    topk_mask,
)

# rng stream namespaces, combined with (seed, client, round, ...)
_BATCH_STREAM = 0
_MASK_STREAM = 1


@dataclass(frozen=True)
class Algorithm:
    kind: AlgorithmKind
    variant: SsmVariant = SsmVariant.SSM

    @property
    def name(self) -> str:
        if self.kind is AlgorithmKind.FEDADAM_SSM and self.variant is not SsmVariant.SSM:
            return f"{self.kind.value}[{self.variant.value}]"
        return self.kind.value


@dataclass
class GlobalState:
    W: np.ndarray
    M: np.ndarray
    V: np.ndarray
    dW: np.ndarray
    dM: np.ndarray
    dV: np.ndarray
    t: int = 0

    @classmethod
    def initial(cls, W0: np.ndarray) -> "GlobalState":
        z = np.zeros_like(W0)
        return cls(W0.copy(), z.copy(), z.copy(), z.copy(), z.copy(), z.copy(), 0)

    @property
    def d(self) -> int:
        return int(self.W.size)


@dataclass
class ClientReport:
    client: int
    weight: float
    payload: Any  # SparseUpdate | tuple[SparseVector, ...] | tuple[np.ndarray, ...]
    uplink_bits: int
    wire_mode: str
    loss_before: float
    loss_after: float
    dense: Optional[tuple[np.ndarray, np.ndarray, np.ndarray]] = None
    trajectory: Optional[list] = None


@dataclass
class RoundMetrics:
    t: int
    algorithm: str
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    uplink_bits_round: int
    uplink_bits_cum: int
    downlink_bits_round: int
    wire_mode: str
    v_clamped: int
    client_loss_before: float
    client_loss_after: float
    err_W: float = math.nan
    err_M: float = math.nan
    err_V: float = math.nan
    max_deviation: float = math.nan
    max_bound: float = math.nan
    bound_violations: int = 0
    bound_vacuous: bool = False
    gradnorm_sq: float = math.nan

    CSV_FIELDS = (
        "t", "algorithm", "train_loss", "train_acc", "test_loss", "test_acc",
        "uplink_bits_round", "uplink_bits_cum", "downlink_bits_round", "wire_mode",
        "v_clamped", "client_loss_before", "client_loss_after",
        "err_W", "err_M", "err_V", "max_deviation", "max_bound", "bound_violations",
        "bound_vacuous", "gradnorm_sq",
    )

    def as_dict(self) -> dict:
        return asdict(self)


class ClientFailure(RuntimeError):
    pass


def _dense_triple(report: ClientReport, d: int):
    p = report.payload
    if isinstance(p, SparseUpdate):
        return decode_update(p, d)
    if isinstance(p, tuple) and p and isinstance(p[0], SparseVector):
        return tuple(decode_vector(sv, d) for sv in p)
    return p


def aggregate(reports: list[ClientReport], d: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Weighted FedAvg of decoded client deltas, in report order.

    Unselected coordinates contribute zeros and the divisor is always the full
    weight sum.
    """
    if not reports:
        raise ValueError("no client reports to aggregate")
    triples = [_dense_triple(r, d) for r in reports]
    for tr in triples:
        if any(x.shape != (d,) for x in tr):
            raise ValueError("report does not decode to dimension d")
    weights = [r.weight for r in reports]
    return tuple(weighted_mean([tr[i] for tr in triples], weights) for i in range(3))


def _sparsify(algo: Algorithm, dW, dM, dV, k: int, q: int, rng_mask):
    d = dW.size
    kind = algo.kind
    if kind is AlgorithmKind.VANILLA_FEDADAM:
        return (dW, dM, dV), 3 * d * q, "dense"
    if kind is AlgorithmKind.FEDSGD:
        return (dW, dM, dV), d * q, "dense"
    if kind is AlgorithmKind.FEDADAM_SSM:
        mask = ssm_select(dW, dM, dV, k, algo.variant, rng_mask)
        mode, bits = choose_wire_mode(d, k, q, tensors=3)
        return encode_update(dW, dM, dV, mask), bits, mode.value
    if kind is AlgorithmKind.FEDADAM_TOP:
        mode, bits = choose_wire_mode(d, k, q, tensors=1)
        parts = tuple(encode_vector(x, topk_mask(x, k)) for x in (dW, dM, dV))
        return parts, 3 * bits, mode.value
    # sparse FedSGD: moments are not part of the protocol
    mode, bits = choose_wire_mode(d, k, q, tensors=1)
    z = np.zeros(d)
    return (encode_vector(dW, topk_mask(dW, k)), encode_vector(z, np.zeros(d, bool)),
            encode_vector(z, np.zeros(d, bool))), bits, mode.value


def client_update(
    algo: Algorithm,
    state: GlobalState,
    objective: Objective,
    client_index: int,
    client: ClientData,
    hp: Hyperparams,
    seed: int,
    keep_dense: bool = False,
    keep_trajectory: bool = False,
) -> ClientReport:
    """One client's work for round ``state.t``; reads ``state`` without mutating it."""
    t = state.t

    def rng_for_epoch(epoch):
        return rng_stream(seed, _BATCH_STREAM, client_index, t, epoch)

    traj = [] if keep_trajectory else None
    loss_before = objective(state.W, client.indices)[0]
    if algo.kind.uses_adam:
        w, m, v = local_train(state.W, state.M, state.V, objective, client, hp, rng_for_epoch, traj)
        dW, dM, dV = w - state.W, m - state.M, v - state.V
    else:
        w = sgd_local_train(state.W, objective, client, hp, rng_for_epoch)
        dW, dM, dV = w - state.W, np.zeros_like(w), np.zeros_like(w)
    loss_after = objective(w, client.indices)[0]

    k = hp.resolve_k(state.d)
    payload, bits, mode = _sparsify(algo, dW, dM, dV, k, hp.q, rng_stream(seed, _MASK_STREAM, client_index, t))
    return ClientReport(
        client=client_index,
        weight=float(client.batch_size),
        payload=payload,
        uplink_bits=bits,
        wire_mode=mode,
        loss_before=loss_before,
        loss_after=loss_after,
        dense=(dW, dM, dV) if keep_dense else None,
        trajectory=traj,
    )


def collect_reports(algo, state, objective, clients, hp, seed, workers=1, keep_dense=False, keep_trajectory=False):
    """Run all clients; results come back in client-index order whatever ``workers`` is."""
    def job(i):
        try:
            return client_update(algo, state, objective, i, clients[i], hp, seed, keep_dense, keep_trajectory)
        except Exception as exc:  # abort the whole round, no partial aggregation
            raise ClientFailure(f"client {i} failed in round {state.t}: {exc}") from exc

    if workers <= 1 or len(clients) == 1:
        return [job(i) for i in range(len(clients))]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(job, range(len(clients))))


def apply_aggregate(state: GlobalState, dW, dM, dV) -> tuple[GlobalState, int]:
    """Advance the materialized global state; negative V entries are clamped to 0."""
    V = state.V + dV
    clamped = int(np.count_nonzero(V < 0))
    if clamped:
        V = np.maximum(V, 0.0)
    new = GlobalState(state.W + dW, state.M + dM, V, dW, dM, dV, state.t + 1)
    return new, clamped


def run_round(
    algo: Algorithm,
    state: GlobalState,
    objective: Objective,
    clients: list[ClientData],
    hp: Hyperparams,
    seed: int,
    workers: int = 1,
    keep_dense: bool = False,
    keep_trajectory: bool = False,
):
    """Returns ``(new_state, reports, v_clamped)``."""
    if not clients:
        raise ValueError("need at least one client")
    reports = collect_reports(algo, state, objective, clients, hp, seed, workers, keep_dense, keep_trajectory)
    dW, dM, dV = aggregate(reports, state.d)
    new_state, clamped = apply_aggregate(state, dW, dM, dV)
    return new_state, reports, clamped


# ---------------------------------------------------------------------------
# experiments


@dataclass
class Setup:
    topology: Topology
    train: Dataset
    test: Dataset
    clients: list[ClientData]
    objective: MLPObjective


def build_setup(cfg: RunConfig) -> Setup:
    if cfg.dataset == "synthetic":
        full = generate_synthetic(cfg.synthetic_n + cfg.synthetic_n_test, cfg.synthetic_d_in,
                                  cfg.synthetic_classes, cfg.separation, cfg.seed)
        train = full.subset(np.arange(cfg.synthetic_n))
        test = full.subset(np.arange(cfg.synthetic_n, len(full)))
    else:
        train = load_idx_dataset(cfg.train_images, cfg.train_labels)
        if cfg.test_images:
            test = load_idx_dataset(cfg.test_images, cfg.test_labels, train.num_classes)
        else:
            test = train
    topology = Topology((train.input_dim, *cfg.hidden, train.num_classes))
    if cfg.iid:
        parts = iid_partition(len(train), cfg.clients, cfg.seed)
    else:
        parts = dirichlet_partition(train.labels, cfg.clients, cfg.theta, cfg.seed)
    clients = [ClientData(parts[n], min(cfg.batch_size, parts[n].size)) for n in range(cfg.clients)]
    return Setup(topology, train, test, clients, MLPObjective(topology, train))


@dataclass
class ExperimentResult:
    config: RunConfig
    metrics: list[RoundMetrics]
    params: np.ndarray
    init_params: np.ndarray
    states: list[GlobalState] = field(default_factory=list)
    gradnorms: list[float] = field(default_factory=list)
    histogram: Optional[analysis.HistogramSpec] = None
    histogram_updates: Optional[tuple[np.ndarray, np.ndarray, np.ndarray]] = None
    deviation: list[dict] = field(default_factory=list)
    rho: Optional[float] = None


def _client_objectives(setup: Setup):
    return [MLPObjective(setup.topology, setup.train.subset(c.indices)) for c in setup.clients]


def run_experiment(cfg: RunConfig, keep_states: bool = False) -> ExperimentResult:
    """Execute ``cfg.rounds`` rounds; deterministic given the config."""
    cfg.validate()
    setup = build_setup(cfg)
    hp = cfg.hyperparams()
    algo = Algorithm(cfg.algorithm, cfg.variant)
    W0 = init_params(setup.topology, cfg.seed)
    hp.resolve_k(W0.size)
    state = GlobalState.initial(W0)
    result = ExperimentResult(cfg, [], W0.copy(), W0.copy())
    if keep_states:
        result.states.append(state)

    probe = DeviationProbe(cfg, setup, hp, W0) if cfg.probe_deviation else None
    if probe is not None:
        result.rho = probe.rho
    cum_bits = 0
    d = W0.size
    keep_dense = probe is not None or cfg.histogram_round >= 0

    for t in range(cfg.rounds):
        gn = math.nan
        if cfg.probe_gradnorm:
            gn = float(np.dot(g := setup.objective(state.W)[1], g))
            result.gradnorms.append(gn)
        reports = collect_reports(algo, state, setup.objective, setup.clients, hp, cfg.seed, cfg.workers,
                                  keep_dense=keep_dense, keep_trajectory=probe is not None)
        dW, dM, dV = aggregate(reports, d)
        probe_row = probe.observe(state, reports) if probe is not None else None
        if cfg.histogram_round == t + 1:
            # all clients' local deltas, pooled
            pooled = tuple(np.concatenate([r.dense[i] for r in reports]) for i in range(3))
            result.histogram_updates = pooled
            result.histogram = analysis.magnitude_histogram(*pooled, cfg.histogram_bins)
        state, clamped = apply_aggregate(state, dW, dM, dV)
        if keep_states:
            result.states.append(state)

        bits = sum(r.uplink_bits for r in reports)
        cum_bits += bits
        if (t + 1) % cfg.eval_interval == 0 or t + 1 == cfg.rounds:
            tr_loss, tr_acc = evaluate(state.W, setup.topology, setup.train)
            te_loss, te_acc = evaluate(state.W, setup.topology, setup.test)
        else:
            tr_loss = tr_acc = te_loss = te_acc = math.nan
        modes = sorted({r.wire_mode for r in reports})
        weights = [r.weight for r in reports]
        row = RoundMetrics(
            t=t + 1,
            algorithm=algo.name,
            train_loss=tr_loss,
            train_acc=tr_acc,
            test_loss=te_loss,
            test_acc=te_acc,
            uplink_bits_round=bits,
            uplink_bits_cum=cum_bits,
            downlink_bits_round=len(reports) * (3 if algo.kind.uses_adam else 1) * d * cfg.q,
            wire_mode="+".join(modes),
            v_clamped=clamped,
            client_loss_before=float(np.average([r.loss_before for r in reports], weights=weights)),
            client_loss_after=float(np.average([r.loss_after for r in reports], weights=weights)),
            gradnorm_sq=gn,
        )
        if probe_row is not None:
            row.err_W, row.err_M, row.err_V = probe_row["err_W"], probe_row["err_M"], probe_row["err_V"]
            row.max_deviation = probe_row["max_deviation"]
            row.max_bound = probe_row["max_bound"]
            row.bound_violations = probe_row["violations"]
            row.bound_vacuous = probe_row["vacuous"]
            result.deviation.append(probe_row)
        result.metrics.append(row)
    result.params = state.W.copy()
    return result


# ---------------------------------------------------------------------------
# deviation probe


BOUND_RTOL = 1e-9


class DeviationProbe:
    """Tracks the dense (non-sparse) aggregate alongside the sparse one and the
    centralized full-gradient Adam run started from it each round, and checks
    the local deviation against its closed-form bound.

    ``sigma_l``/``sigma_g`` are running maxima of empirical estimates at the
    round-start model; ``rho`` is user supplied or estimated once by secants.
    """

    def __init__(self, cfg: RunConfig, setup: Setup, hp: Hyperparams, W0: np.ndarray):
        self.cfg = cfg
        self.setup = setup
        self.hp = hp
        self.client_objectives = _client_objectives(setup)
        if cfg.rho is not None:
            self.rho = float(cfg.rho)
        else:
            self.rho = analysis.estimate_lipschitz(setup.objective, W0, cfg.rho_pairs, cfg.seed)
        self.sigma_l = 0.0
        self.sigma_g = 0.0
        # dense reference state at the start of the current round
        self.ref = (W0.copy(), np.zeros_like(W0), np.zeros_like(W0))

    def _update_sigmas(self, W):
        sl, sg = analysis.estimate_sigmas(self.setup.topology, self.setup.train, self.setup.clients, W)
        self.sigma_l = max(self.sigma_l, sl)
        self.sigma_g = max(self.sigma_g, sg)

    def observe(self, state: GlobalState, reports: list[ClientReport]) -> dict:
        hp = self.hp
        Wr, Mr, Vr = self.ref
        err_W = l2_norm(state.W - Wr)
        err_M = l2_norm(state.M - Mr)
        err_V = l2_norm(state.V - Vr)
        self._update_sigmas(state.W)

        oracle = centralized_adam_run(Wr, Mr, Vr, self.setup.objective, hp, hp.local_epochs)
        max_dev = 0.0
        max_bound = 0.0
        violations = points = 0
        vacuous = False
        for r in reports:
            batch = self.setup.clients[r.client].batch_size
            for l, (w_local, _, _) in enumerate(r.trajectory):
                dev = l2_norm(w_local - oracle[l][0])
                try:
                    c = analysis.theorem1_constants(
                        analysis.BoundInputs(hp.eta, hp.beta1, hp.beta2, hp.eps, self.rho, hp.clip,
                                             state.d, l, batch, self.sigma_l, self.sigma_g))
                except analysis.BoundOverflowError:
                    vacuous = True
                    continue
                bound = c.gamma * err_W + c.lam * err_M + c.theta * err_V + c.Phi
                max_dev = max(max_dev, dev)
                max_bound = max(max_bound, bound)
                points += 1
                if dev > bound * (1 + BOUND_RTOL):
                    violations += 1

        # dense FedAvg of this round's deltas gives next round's reference state
        dense = [r.dense for r in reports]
        weights = [r.weight for r in reports]
        self.ref = tuple(
            base + weighted_mean([tr[i] for tr in dense], weights)
            for i, base in enumerate((state.W, state.M, state.V))
        )
        return {
            "t": state.t,
            "err_W": err_W,
            "err_M": err_M,
            "err_V": err_V,
            "max_deviation": max_dev,
            "max_bound": max_bound,
            "violations": violations,
            "points": points,
            "vacuous": vacuous,
            "sigma_l": self.sigma_l,
            "sigma_g": self.sigma_g,
            "rho": self.rho,
        }
