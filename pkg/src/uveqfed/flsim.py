"""Federated-averaging engine: local SGD, quantized aggregation, schedules.

Each round runs tau local stochastic-gradient steps per user, encodes the
resulting model updates with the configured compressor, aggregates the
decoded updates into the global model, and resets the local copies.  An
uncompressed shadow aggregate is carried alongside purely for metrics, so
the per-round distance between the actual and the desired global model is
observable.  All randomness is counter-mode-derived per user, so results
do not depend on thread count or scheduling.
"""

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import baselines, codec, datamodel
from .errors import ConfigError, DivergedRunError, InvalidInputError
from .streams import DOMAIN_SAMPLING, derived_rng

COMPRESSOR_KINDS = ("uveqfed-l1", "uveqfed-l2", "qsgd", "rotated", "masked", "none")


def decaying_step_size(t, rho_c, rho_s, tau):
    """Decaying step size tau / (rho_c * (t + gamma)), gamma = tau*max(1, 4*rho_s/rho_c)."""
    if not rho_c > 0 or rho_s < rho_c:
        raise InvalidInputError("need rho_s >= rho_c > 0")
    gamma = tau * max(1.0, 4.0 * rho_s / rho_c)
    return tau / (rho_c * (t + gamma))


@dataclass(frozen=True)
class CompressorSpec:
    kind: str = "none"
    rate: float | None = None
    zeta: object = codec.ZETA_RATE_ADAPTIVE
    base_scale: float = 1.0
    norm_rms_cap: float = 1.0

    def __post_init__(self):
        if self.kind not in COMPRESSOR_KINDS:
            raise ConfigError(f"unknown compressor {self.kind!r}; "
                              f"choose from {COMPRESSOR_KINDS}")
        if self.kind != "none" and (self.rate is None or not self.rate > 0):
            raise ConfigError(f"compressor {self.kind!r} needs a positive rate")


class _UveqfedCompressor:
    def __init__(self, spec, master_seed):
        preset = "scalar" if spec.kind == "uveqfed-l1" else "hex"
        self.codec = codec.UVeQFedCodec(codec.UVeQFedConfig(
            lattice=preset, base_scale=spec.base_scale, zeta=spec.zeta,
            rate=spec.rate, master_seed=master_seed,
            norm_rms_cap=spec.norm_rms_cap))

    def roundtrip(self, h, user_id, round_index):
        enc = self.codec.encode(h, user_id, round_index)
        decoded = self.codec.decode(enc, user_id, round_index)
        zeta = self.codec.zeta_for(enc.length)
        stats = {
            "distortion_coeff": zeta * zeta
            * self.codec.applied_second_moment(enc.scale_code),
            "num_blocks": enc.num_blocks,
            "overload": enc.overload_fraction,
        }
        return decoded, enc.total_bits, stats


class _QsgdCompressor:
    def __init__(self, spec, master_seed):
        self.rate = spec.rate
        self.seed = master_seed

    def roundtrip(self, h, user_id, round_index):
        decoded, bits = baselines.qsgd_roundtrip(h, self.rate, self.seed,
                                                 user_id, round_index)
        return decoded, bits.bit_length, {}


class _RotatedCompressor:
    def __init__(self, spec, master_seed):
        self.rate = spec.rate
        self.seed = master_seed

    def roundtrip(self, h, user_id, round_index):
        enc = baselines.rotated_encode(h, self.rate, self.seed, user_id, round_index)
        decoded = baselines.rotated_decode(enc, len(h), self.rate, self.seed,
                                           user_id, round_index)
        return decoded, enc.bit_length, {}


class _MaskedCompressor:
    def __init__(self, spec, master_seed):
        self.rate = spec.rate
        self.seed = master_seed

    def roundtrip(self, h, user_id, round_index):
        enc = baselines.masked_encode(h, self.rate, self.seed, user_id, round_index)
        decoded = baselines.masked_decode(enc, len(h), self.rate, self.seed,
                                          user_id, round_index)
        return decoded, enc.bit_length, {}


class _NoneCompressor:
    def __init__(self, spec, master_seed):
        pass

    def roundtrip(self, h, user_id, round_index):
        return np.array(h, copy=True), 32 * len(h), {}


_COMPRESSORS = {
    "uveqfed-l1": _UveqfedCompressor,
    "uveqfed-l2": _UveqfedCompressor,
    "qsgd": _QsgdCompressor,
    "rotated": _RotatedCompressor,
    "masked": _MaskedCompressor,
    "none": _NoneCompressor,
}


def make_compressor(spec, master_seed):
    return _COMPRESSORS[spec.kind](spec, master_seed)


@dataclass(frozen=True)
class FederationConfig:
    num_users: int
    tau: int
    total_rounds: int
    compressor: CompressorSpec = CompressorSpec()
    alphas: tuple | None = None  # None resolves to n_k-proportional weights
    schedule: tuple = ("constant", 0.01)
    batch_size: int | None = 1  # None means full batch
    init_std: float = 0.0
    master_seed: int = 0
    track_shadow: bool = True
    divergence_factor: float = 1e6
    threads: int = 1
    eval_every: int = 1

    def __post_init__(self):
        if self.num_users < 1 or self.tau < 1 or self.total_rounds < 1:
            raise ConfigError("num_users, tau and total_rounds must be positive")
        if self.alphas is not None:
            a = np.asarray(self.alphas, dtype=float)
            if len(a) != self.num_users or np.any(a < 0):
                raise ConfigError("alphas must be non-negative, one per user")
            if abs(float(a.sum()) - 1.0) > 1e-12:
                raise ConfigError(f"alphas sum to {a.sum()!r}, expected 1")
        if self.schedule[0] not in ("constant", "decay", "table"):
            raise ConfigError(f"unknown schedule kind {self.schedule[0]!r}")

    def step_size(self, t):
        kind = self.schedule[0]
        if kind == "constant":
            return float(self.schedule[1])
        if kind == "decay":
            _, rho_c, rho_s = self.schedule
            return decaying_step_size(t, rho_c, rho_s, self.tau)
        table = self.schedule[1]
        return float(table[min(t, len(table) - 1)])


@dataclass
class RoundState:
    """Engine state between aggregations."""

    global_weights: np.ndarray
    local_weights: list
    t: int
    tau: int
    eta: float


def local_step(model, ds, weights, eta, rng, batch_size):
    """One stochastic-gradient step; returns (new weights, grad norm^2)."""
    idx = None if batch_size is None else rng.integers(0, ds.n, size=batch_size)
    _, grad = datamodel.loss_and_gradient(model, weights, ds, idx)
    return weights - eta * grad, float(grad @ grad)


def aggregate(w_global, decoded_updates, alphas):
    """Global update: w + sum_k alpha_k h_hat_k.  All users must report."""
    if any(u is None for u in decoded_updates):
        raise InvalidInputError("missing user update; partial participation "
                                "is not supported")
    if len(decoded_updates) != len(alphas):
        raise InvalidInputError("one update per user is required")
    new = np.array(w_global, copy=True)
    for alpha, update in zip(alphas, decoded_updates):
        new += alpha * update
    return new


@dataclass
class RunLog:
    """Per-round metrics of one federation run."""

    rounds: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)
    agg_err_sq: list = field(default_factory=list)
    bits_per_user: list = field(default_factory=list)
    sum_eta_sq: list = field(default_factory=list)
    distortion_coeff: list = field(default_factory=list)  # per round: per-user array
    overload: list = field(default_factory=list)
    num_blocks: int = 0
    tau: int = 1
    grad_sq_max: np.ndarray | None = None  # running max per user
    weight_norm_max: float = 0.0
    initial_loss: float = 0.0
    final_weights: np.ndarray | None = None
    wall_time: float = 0.0

    def aggregation_bound_rhs(self, xi_sq, alphas):
        """Per-round RHS of the aggregation-error bound.

        M * tau * (sum of eta_t^2 over the round) times the
        alpha^2-weighted per-user product of the distortion coefficient
        zeta^2 * sigma^2 (at the applied scale) and the gradient-norm
        bound.
        """
        alphas = np.asarray(alphas)
        xi = np.asarray(xi_sq)
        out = []
        for i in range(len(self.rounds)):
            per_user = (alphas ** 2) * np.asarray(self.distortion_coeff[i]) * xi
            out.append(self.num_blocks * self.tau * self.sum_eta_sq[i]
                       * float(per_user.sum()))
        return np.asarray(out)

    def to_csv(self, path, bound_rhs=None):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            header = ["round", "t", "loss", "accuracy", "aggErrorSq", "bitsPerUser"]
            if bound_rhs is not None:
                header.append("boundRHS")
            writer.writerow(header)
            for i in range(len(self.rounds)):
                row = [self.rounds[i], self.steps[i],
                       repr(self.loss[i]), repr(self.accuracy[i]),
                       repr(self.agg_err_sq[i]), repr(self.bits_per_user[i])]
                if bound_rhs is not None:
                    row.append(repr(float(bound_rhs[i])))
                writer.writerow(row)


def run_federation(cfg, model, user_datasets, test_set=None):
    """Execute the configured number of rounds; returns a RunLog."""
    if len(user_datasets) != cfg.num_users:
        raise ConfigError(f"{len(user_datasets)} datasets for {cfg.num_users} users")
    counts = np.array([ds.n for ds in user_datasets], dtype=float)
    alphas = (np.asarray(cfg.alphas, dtype=float) if cfg.alphas is not None
              else counts / counts.sum())
    compressor = make_compressor(cfg.compressor, cfg.master_seed)
    w_global = datamodel.init_weights(model, cfg.master_seed, cfg.init_std)
    sample_rngs = [derived_rng(cfg.master_seed, DOMAIN_SAMPLING, k)
                   for k in range(cfg.num_users)]

    def weighted_loss(w):
        total = 0.0
        for alpha, ds in zip(alphas, user_datasets):
            l, _ = datamodel.loss_and_gradient(model, w, ds)
            total += alpha * l
        return total

    log = RunLog()
    log.tau = cfg.tau
    log.initial_loss = weighted_loss(w_global)
    log.grad_sq_max = np.zeros(cfg.num_users)
    guard = cfg.divergence_factor * max(abs(log.initial_loss), 1e-300)
    start = time.perf_counter()

    def run_user(args):
        k, w_start, t0 = args
        w = np.array(w_start, copy=True)
        gmax = 0.0
        for j in range(cfg.tau):
            w, gsq = local_step(model, user_datasets[k], w,
                                cfg.step_size(t0 + j), sample_rngs[k],
                                cfg.batch_size)
            gmax = max(gmax, gsq)
        return w, gmax

    pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
    try:
        for rnd in range(cfg.total_rounds):
            t0 = rnd * cfg.tau
            tasks = [(k, w_global, t0) for k in range(cfg.num_users)]
            results = list(pool.map(run_user, tasks)) if pool else \
                [run_user(task) for task in tasks]
            updates = [w_k - w_global for w_k, _ in results]
            for k, (_, gmax) in enumerate(results):
                log.grad_sq_max[k] = max(log.grad_sq_max[k], gmax)
            decoded, bits, coeffs, overloads = [], [], [], []
            for k, h in enumerate(updates):
                d, b, stats = compressor.roundtrip(h, k, rnd)
                decoded.append(d)
                bits.append(b)
                coeffs.append(stats.get("distortion_coeff", 0.0))
                overloads.append(stats.get("overload", 0.0))
                log.num_blocks = stats.get("num_blocks", log.num_blocks)
            w_new = aggregate(w_global, decoded, alphas)
            if cfg.track_shadow:
                w_des = aggregate(w_global, updates, alphas)
                log.agg_err_sq.append(float(np.sum((w_new - w_des) ** 2)))
            else:
                log.agg_err_sq.append(float("nan"))
            w_global = w_new
            log.weight_norm_max = max(log.weight_norm_max,
                                      float(np.linalg.norm(w_global)))
            t_end = t0 + cfg.tau
            loss = weighted_loss(w_global)
            if not math.isfinite(loss) or loss > guard:
                raise DivergedRunError(
                    f"loss {loss:.3g} at round {rnd} exceeds the divergence "
                    f"guard {guard:.3g}")
            acc = float("nan")
            if test_set is not None and hasattr(model, "accuracy") \
                    and rnd % cfg.eval_every == 0:
                acc = model.accuracy(w_global, test_set)
            log.rounds.append(rnd)
            log.steps.append(t_end)
            log.loss.append(loss)
            log.accuracy.append(acc)
            log.bits_per_user.append(float(np.mean(bits)))
            log.sum_eta_sq.append(sum(cfg.step_size(t0 + j) ** 2
                                      for j in range(cfg.tau)))
            log.distortion_coeff.append(np.asarray(coeffs))
            log.overload.append(float(np.mean(overloads)))
    finally:
        if pool:
            pool.shutdown()
    log.final_weights = w_global
    log.wall_time = time.perf_counter() - start
    return log
