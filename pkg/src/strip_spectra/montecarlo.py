"""Ensembles over the random potential and empirical checks of the moment bounds.

Samples are processed in fixed-size chunks; each chunk produces sums and maxima
that are merged in chunk order, so aggregates do not depend on the number of
worker threads or on scheduling.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .channels import GapEstimate, channel_split, spectral_gap
from .model import OperatorModel, sample_potential
from .schur import opnorm, schur_init, schur_step
from .transfer import conjugate_potential

SEED_BITS = 32
FAILURE_CAP = 1e-3
Z_SLACK = 1e-12
D_SLACK = 1e-9
PLATEAU_LIMIT = 1.5


def seed_plan(master_seed: int, sample_index: int) -> int:
    """Seed of sample ``sample_index``: ``master_seed * 2^32 + sample_index``.

    Injective for ``0 <= master_seed, sample_index < 2^32``; together with the
    per-site key of ``sample_potential`` this keys every site stream by
    ``(master_seed, sample_index, site)``.
    """
    master_seed, sample_index = int(master_seed), int(sample_index)
    if not (0 <= master_seed < 2**SEED_BITS and 0 <= sample_index < 2**SEED_BITS):
        raise ValueError("master_seed and sample_index must lie in [0, 2^32)")
    return (master_seed << SEED_BITS) | sample_index


@dataclass(frozen=True)
class EnsembleConfig:
    model: OperatorModel
    num_samples: int
    N: int
    m: int = 0
    lambdas: tuple = (1.0,)
    eta: float = 0.0
    master_seed: int = 0
    window: tuple | None = None
    half_width: float = 0.05
    chunk_size: int = 250
    threads: int = 1
    plateau: tuple | None = None

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if not self.N > self.m >= 0:
            raise ValueError(f"need N > m >= 0, got N={self.N}, m={self.m}")
        if self.chunk_size < 1 or self.threads < 1:
            raise ValueError("chunk_size and threads must be >= 1")
        object.__setattr__(self, "lambdas", tuple(float(x) for x in np.atleast_1d(self.lambdas)))

    def gap_window(self) -> GapEstimate:
        if self.window is not None:
            a, b = self.window
        else:
            a, b = min(self.lambdas) - self.half_width, max(self.lambdas) + self.half_width
        est = spectral_gap(self.model, a, b)
        if abs(self.eta) > est.height:
            raise ValueError(f"|eta|={abs(self.eta)} exceeds the window height {est.height:.4g}")
        return est


@dataclass(frozen=True)
class BoundRecord:
    name: str
    theoretical_bound: float
    empirical: float
    margin: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "name": self.name, "theoretical_bound": _jsonable(self.theoretical_bound),
            "empirical": _jsonable(self.empirical), "margin": _jsonable(self.margin), "pass": self.passed,
        }


def _jsonable(v: float):
    v = float(v)
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")


@dataclass
class BoundReport:
    records: list[BoundRecord] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.records)

    def __getitem__(self, name: str) -> BoundRecord:
        for r in self.records:
            if r.name == name:
                return r
        raise KeyError(name)

    def add(self, name, bound, empirical, passed=None):
        if passed is None:
            passed = empirical <= bound
        self.records.append(BoundRecord(name, float(bound), float(empirical), float(bound - empirical), bool(passed)))

    def to_dict(self) -> dict:
        return {"pass": self.passed, "records": [r.to_dict() for r in self.records]}


class _Sums:
    """Per-chunk statistics for one energy; merged with ``+=`` in chunk order."""

    def __init__(self, steps: int, l2: int):
        self.count = 0
        self.ok = np.zeros(steps)
        self.x4 = np.zeros(steps)
        self.x8 = np.zeros(steps)
        self.max_z = np.zeros(steps)
        self.max_d = np.zeros(steps)
        self.w_sum = np.zeros((steps, l2, l2), dtype=complex)
        self.w2 = np.zeros(steps)
        self.failures = 0

    def __iadd__(self, other: "_Sums"):
        self.count += other.count
        self.failures += other.failures
        for name in ("ok", "x4", "x8", "w_sum", "w2"):
            setattr(self, name, getattr(self, name) + getattr(other, name))
        self.max_z = np.maximum(self.max_z, other.max_z)
        self.max_d = np.maximum(self.max_d, other.max_d)
        return self


@dataclass
class EnsembleResult:
    config: EnsembleConfig
    report: BoundReport
    table: dict
    window: GapEstimate
    failures: int
    trajectories: int

    def csv_rows(self):
        cols = list(self.table)
        yield cols
        for i in range(len(self.table["n"])):
            yield [self.table[c][i] for c in cols]


def _run_chunk(cfg: EnsembleConfig, window: GapEstimate, splits, threshold: float, indices):
    model = cfg.model
    mats = np.stack([sample_potential(model, cfg.N, seed_plan(cfg.master_seed, i)).matrices for i in indices])
    norms = np.linalg.norm(mats, ord=2, axis=(-2, -1))
    cut = norms >= threshold
    site_stats = {
        "cut": cut.sum(0).astype(float),
        "v2": (norms**2).sum(0),
        "v4": (norms**4).sum(0),
        "v2_cut": (norms**2 * cut).sum(0),
        "v_sum": mats.sum(0),
    }
    hat = np.where(cut[..., None, None], 0, mats)
    rho = (math.exp(2 * window.gap) + math.exp(window.gap)) / 2
    steps = cfg.N - cfg.m
    out = []
    for split in splits:
        sums = _Sums(steps, 2 * model.l)
        S, Gamma = split.S, split.Gamma
        state = schur_init(split.l0, split.l1, (len(indices),))
        alive = np.ones(len(indices), dtype=bool)
        for k, site in enumerate(range(cfg.m, cfg.N)):
            W = conjugate_potential(split, hat[:, site])
            state = schur_step(state, S, Gamma, W)
            nX = opnorm(state.X)
            nZ = opnorm(state.Z)
            if split.l1:
                log_d = state.log_Dinv_norm() + state.n * math.log(rho)
            else:
                log_d = np.full(len(indices), -np.inf)
            alive &= np.isfinite(nX) & np.isfinite(nZ) & ~np.isnan(log_d)
            sums.ok[k] = alive.sum()
            x4 = np.where(alive, nX, 0.0) ** 4
            sums.x4[k] = x4.sum()
            sums.x8[k] = (x4**2).sum()
            sums.max_z[k] = np.max(np.where(alive, nZ, 0.0), initial=0.0)
            sums.max_d[k] = np.exp(np.max(np.where(alive, log_d, -np.inf), initial=-np.inf))
            sums.w_sum[k] = W.sum(0)
            sums.w2[k] = (opnorm(W) ** 2).sum()
        sums.count = len(indices)
        sums.failures = int((~alive).sum())
        out.append(sums)
    return out, site_stats


def ensemble_run(config: EnsembleConfig) -> EnsembleResult:
    """Run the recursion for every sample and energy and check the bounds.

    Records: ``max |Z_n|`` against 1; ``max_n |D_n^{-1}| rho^n`` against 1;
    the empirical ``C_W`` partial sum against its plug-in bound; the running
    max of ``E|X_n|^4`` against ``l0^4 exp(C_gamma C_W)``; the truncation
    frequency against the Chebyshev bound (3 standard errors); the plateau
    ratio when ``config.plateau`` is set; and the failure rate.
    """
    cfg = config
    window = cfg.gap_window()
    threshold = window.threshold
    zs = [complex(lam, cfg.eta) for lam in cfg.lambdas]
    splits = [channel_split(cfg.model, z, window=window) for z in zs]
    chunks = [range(s, min(s + cfg.chunk_size, cfg.num_samples)) for s in range(0, cfg.num_samples, cfg.chunk_size)]
    steps = cfg.N - cfg.m
    l0 = splits[0].l0

    if cfg.threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(lambda c: _run_chunk(cfg, window, splits, threshold, c), chunks))
    else:
        results = [_run_chunk(cfg, window, splits, threshold, c) for c in chunks]

    totals = [_Sums(steps, 2 * cfg.model.l) for _ in zs]
    site = {}
    for per_energy, stats in results:
        for tot, part in zip(totals, per_energy):
            tot += part
        for key, val in stats.items():
            site[key] = site[key] + val if key in site else val.copy()

    S = cfg.num_samples
    n_axis = np.arange(1, steps + 1)
    ok = np.maximum(np.min([t.ok for t in totals], axis=0), 1)
    mean_x4 = np.max([t.x4 / np.maximum(t.ok, 1) for t in totals], axis=0)
    var_x4 = np.max(
        [np.maximum(t.x8 / np.maximum(t.ok, 1) - (t.x4 / np.maximum(t.ok, 1)) ** 2, 0) for t in totals], axis=0
    )
    se_x4 = np.sqrt(var_x4 / ok)
    max_z = np.max([t.max_z for t in totals], axis=0)
    max_d = np.max([t.max_d for t in totals], axis=0)
    cw_terms = np.max([opnorm(t.w_sum / S) + t.w2 / S for t in totals], axis=0)
    cw_partial = np.cumsum(cw_terms)

    sites = np.arange(cfg.m, cfg.N)
    t2 = threshold**2
    freq = site["cut"][sites] / S
    mean_v2 = site["v2"][sites] / S
    cheb = mean_v2 / t2
    # per-sample difference d = 1{|V| >= t} - |V|^2/t^2
    d2 = (site["cut"][sites] - 2 * site["v2_cut"][sites] / t2 + site["v4"][sites] / t2**2) / S
    cheb_se = np.sqrt(np.maximum(d2 - (freq - cheb) ** 2, 0) / S)

    report = BoundReport()
    report.add("max_Z", 1 + Z_SLACK, float(max_z.max(initial=0.0)))
    report.add("max_Dinv_rho_n", 1 + D_SLACK, float(max_d.max(initial=0.0)))

    gap = window.gap
    eg = math.exp(2 * gap) - math.exp(gap)
    CQ = window.CQ
    ev_norm = opnorm(site["v_sum"][sites] / S)
    cw_bound = float(np.sum(CQ**2 * ev_norm + (4 * CQ**4 / eg) * mean_v2 + CQ**4 * mean_v2))
    report.add("C_W", cw_bound, float(cw_partial[-1]))

    alpha_g = 4 + 4 * math.exp(-2 * gap)
    beta_g = 17 + 6 * eg + eg**2 + 16 * math.exp(-2 * gap)
    C_gamma = max(alpha_g, beta_g)
    x4_bound = l0**4 * math.exp(min(C_gamma * cw_partial[-1], 700.0))
    running = np.maximum.accumulate(mean_x4)
    report.add("sup_E_X4", x4_bound, float(running[-1]))

    excess = freq - cheb - 3 * cheb_se
    report.add("chebyshev_truncation", 0.0, float(excess.max(initial=-np.inf)))

    if cfg.plateau is not None:
        n1, n2 = cfg.plateau
        if not (1 <= n1 <= steps and 1 <= n2 <= steps):
            raise ValueError(f"plateau depths {cfg.plateau} outside 1..{steps}")
        ratio = mean_x4[n2 - 1] / mean_x4[n1 - 1]
        report.add("plateau_ratio", PLATEAU_LIMIT, float(ratio))

    failures = int(sum(t.failures for t in totals))
    trajectories = S * len(zs)
    report.add("failure_rate", FAILURE_CAP, failures / trajectories)

    table = {
        "n": n_axis,
        "mean_X4": mean_x4,
        "se_X4": se_x4,
        "running_max_X4": running,
        "max_Z": max_z,
        "max_Dinv_rho_n": max_d,
        "CW_partial": cw_partial,
        "trunc_freq": freq,
        "chebyshev_bound": cheb,
    }
    return EnsembleResult(
        config=cfg, report=report, table=table, window=window, failures=failures, trajectories=trajectories
    )
