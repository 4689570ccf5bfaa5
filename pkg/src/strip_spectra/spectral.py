"""Spectral measure at a root vector: transfer-matrix density, AC criterion, dense oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .channels import channel_split, spectral_gap
from .model import OperatorModel, PotentialSample, restrict
from .schur import head_steps, opnorm, schur_run, solve_uy
from .transfer import TransferOverflowError, transfer_batch, truncate_potential

NORM_TOL = 1e-14
RANK_RCOND = 1e-12
UY_TOL = 1e-8


@dataclass(frozen=True)
class RootVector:
    """Unit vector ``x`` with an orthonormal basis of ``{v : x* v = 0}``."""

    x: np.ndarray
    kernel_basis: np.ndarray

    @classmethod
    def from_vector(cls, x) -> "RootVector":
        x = np.asarray(x, dtype=complex).reshape(-1)
        nx = float(np.linalg.norm(x))
        if nx == 0 or not math.isfinite(nx):
            raise ValueError("root vector must be finite and nonzero")
        x = x / nx
        B = scipy.linalg.null_space(x.conj()[None, :])
        return cls(x=x, kernel_basis=B.astype(complex))

    @property
    def l(self) -> int:
        return self.x.size


@dataclass(frozen=True)
class DensityEstimate:
    grid: np.ndarray
    values: np.ndarray
    n: int
    x: RootVector
    flags: np.ndarray = field(default=None)
    method: str = "qr"

    def integral(self, weight=None) -> float:
        vals = self.values if weight is None else self.values * weight(self.grid)
        return float(np.trapezoid(vals, self.grid))


def _as_root(x) -> RootVector:
    return x if isinstance(x, RootVector) else RootVector.from_vector(x)


def _step_top(model, V, z, top, bottom):
    """Top rows of ``T_n (top; bottom)``: ``(A + V - z) top - bottom``."""
    return (model.alpha[:, None] * top) + V @ top - z[..., None, None] * top - bottom


def _gram_schmidt(top, bottom):
    """Thin QR of the stacked batch ``(top; bottom)`` by two-pass Gram-Schmidt.

    Returns ``(q_top, q_bottom, r)``.  Batched ``np.linalg.qr`` is much slower
    for the tiny ``2l x l`` blocks used here.
    """
    M = np.concatenate([top, bottom], axis=-2)
    l = M.shape[-1]
    Qm = np.empty_like(M)
    R = np.zeros(M.shape[:-2] + (l, l), dtype=complex)
    for j in range(l):
        v = M[..., :, j].copy()
        for _ in range(2):
            if j:
                coef = np.einsum("...ki,...k->...i", Qm[..., :, :j].conj(), v)
                v -= np.einsum("...ki,...i->...k", Qm[..., :, :j], coef)
                R[..., :j, j] += coef
        nv = np.linalg.norm(v, axis=-1)
        R[..., j, j] = nv
        Qm[..., :, j] = v / nv[..., None]
    h = top.shape[-2]
    return Qm[..., :h, :], Qm[..., h:, :], R


def _solve_adjoint_upper(R, w):
    """``R^{-*} w`` for batched upper-triangular ``R`` (forward substitution on ``R*``)."""
    l = R.shape[-1]
    out = np.empty_like(w)
    Rh = np.conj(np.swapaxes(R, -1, -2))
    for i in range(l):
        acc = w[..., i] - np.einsum("...k,...k->...", Rh[..., i, :i], out[..., :i])
        out[..., i] = acc / Rh[..., i, i]
    return out


def _density_qr(model, sample, root, grid, n_list):
    """``f_n = |R^{-*} x|^2 / pi`` where ``T_{0,n} (I; 0) = Q R``, for every ``n`` in ``n_list``.

    Equivalent to ``1 / (pi min_{x*c=1} |T_{0,n}(c; 0)|^2)``; the QR factors are
    propagated step by step so neither exponential growth nor cancellation
    between growing columns affects the result.
    """
    z = np.asarray(grid, dtype=complex)
    l = model.l
    top = np.broadcast_to(np.eye(l, dtype=complex), z.shape + (l, l)).copy()
    bottom = np.zeros_like(top)
    w = np.broadcast_to(root.x, z.shape + (l,)).copy()
    log_w = np.zeros(z.shape)
    targets = sorted(set(int(n) for n in n_list))
    out = {}
    for k in range(targets[-1] + 1):
        new_top = _step_top(model, sample.matrices[k], z, top, bottom)
        top, bottom, R = _gram_schmidt(new_top, top)
        w = _solve_adjoint_upper(R, w)
        s = np.linalg.norm(w, axis=-1)
        if not np.all(np.isfinite(s)):
            raise TransferOverflowError(k)
        s = np.where(s > 0, s, 1.0)
        w /= s[..., None]
        log_w += np.log(s)
        if k in targets:
            out[k] = np.exp(2 * log_w) * np.sum(np.abs(w) ** 2, axis=-1) / math.pi
    return out


def _density_lstsq(model, sample, root, grid, n):
    """Direct minimisation over the kernel on the rescaled product.

    Loses accuracy once hyperbolic growth makes the columns of ``T_{0,n}(I; 0)``
    nearly parallel; kept as an independent cross-check at moderate depth.
    """
    z = np.asarray(grid, dtype=complex)
    entries, log_scale = transfer_batch(model, sample, 0, n, z)
    l = model.l
    M = entries[..., :, :l]
    Mx = M @ root.x
    vals = np.empty(z.shape)
    flags = np.zeros(z.shape, dtype=bool)
    B = root.kernel_basis
    for i in np.ndindex(z.shape):
        if B.shape[1] == 0:
            res = Mx[i]
        else:
            MB = M[i] @ B
            w, _, rank, _ = np.linalg.lstsq(MB, -Mx[i], rcond=RANK_RCOND)
            if rank < B.shape[1]:
                flags[i] = True
                vals[i] = 0.0
                continue
            res = Mx[i] + MB @ w
        r2 = float(np.vdot(res, res).real)
        vals[i] = math.exp(-2 * log_scale[i]) / (math.pi * r2) if r2 > 0 else 0.0
        flags[i] = r2 == 0
    return vals, flags


def density_estimate(
    model: OperatorModel,
    sample: PotentialSample,
    x,
    grid,
    n: int,
    *,
    method: str = "qr",
) -> DensityEstimate:
    """``f_n(lambda) = 1 / (pi min_{v in K} |T_{0,n}(x + v; 0)|^2)`` on ``grid``."""
    root = _as_root(x)
    if not 0 <= n < sample.N:
        raise IndexError(f"depth n={n} needs a sample with more than n sites (N={sample.N})")
    grid = np.asarray(grid, dtype=float)
    if method == "qr":
        vals = _density_qr(model, sample, root, grid, [n])[n]
        flags = np.zeros(grid.shape, dtype=bool)
    elif method == "lstsq":
        vals, flags = _density_lstsq(model, sample, root, grid, n)
    else:
        raise ValueError(f"unknown method {method!r}")
    return DensityEstimate(grid=grid, values=vals, n=n, x=root, flags=flags, method=method)


def density_curves(model, sample, x, grid, n_list) -> dict[int, DensityEstimate]:
    """``density_estimate`` at several depths from a single sweep."""
    root = _as_root(x)
    grid = np.asarray(grid, dtype=float)
    if max(n_list) >= sample.N:
        raise IndexError(f"depth {max(n_list)} needs more than {sample.N} sites")
    vals = _density_qr(model, sample, root, grid, n_list)
    flags = np.zeros(grid.shape, dtype=bool)
    return {n: DensityEstimate(grid=grid, values=vals[n], n=n, x=root, flags=flags) for n in sorted(vals)}


@dataclass
class ACReport:
    n_list: list[int]
    integrals: list[float]
    x_integrals: list[float]
    liminf_estimate: float
    running_min: list[float]
    excluded: list[float]
    cauchy_schwarz_max_ratio: float
    cauchy_schwarz_ok: bool
    C_y: float
    CQ: float
    relation_ok: bool
    m: int
    m_star: int
    grid: np.ndarray = field(repr=False)
    T_norms: dict = field(repr=False, default_factory=dict)

    @property
    def spread(self) -> float:
        """``max / min`` of the per-depth integrals."""
        vals = np.asarray(self.integrals)
        return float(vals.max() / vals.min())

    def to_dict(self) -> dict:
        return {
            "n_list": self.n_list, "integrals": self.integrals, "x_integrals": self.x_integrals,
            "liminf_estimate": self.liminf_estimate, "running_min": self.running_min,
            "excluded": self.excluded, "cauchy_schwarz_max_ratio": self.cauchy_schwarz_max_ratio,
            "cauchy_schwarz_ok": self.cauchy_schwarz_ok, "C_y": self.C_y, "CQ": self.CQ,
            "relation_ok": self.relation_ok, "m": self.m, "m_star": self.m_star, "spread": self.spread,
        }


def ac_criterion(
    model: OperatorModel,
    sample: PotentialSample,
    x,
    a: float,
    b: float,
    grid,
    n_list,
    m: int | None = None,
    *,
    window=None,
    cs_slack: float = 1e-9,
) -> ACReport:
    """Per-depth integrals of ``|T_{0,n}(u_{lambda,n}; x)|^4`` over ``[a, b]``.

    ``u`` comes from ``solve_uy`` with ``Y = D^{-1}C`` of the recursion
    over sites ``m..n``; then ``T_{0,n}(u; x) = Q (X_{m,n} y; 0)`` exactly, which
    is how the norm is evaluated (the direct product cancels catastrophically).
    ``m`` defaults to ``max(m*, 1)``.  Energies where the rank condition fails
    are dropped from the quadrature and listed in ``excluded``.
    """
    root = _as_root(x)
    window = window or spectral_gap(model, a, b)
    hat, m_star = truncate_potential(sample, window)
    m = max(m_star, 1) if m is None else m
    if m < m_star:
        raise ValueError(f"m={m} is below m*={m_star}")
    n_list = sorted(int(n) for n in n_list)
    if n_list[0] < m or n_list[-1] >= sample.N:
        raise IndexError(f"depths must lie in [{m}, {sample.N - 1}]")
    grid = np.asarray(grid, dtype=float)
    split = channel_split(model, grid.astype(complex), window=window)
    run = schur_run(model, hat, m, n_list[-1], None, split, keep="checkpoints", checkpoints=n_list)
    states = {m + s.n - 1: s for s in run.trajectory}
    head = head_steps(model, sample, m, grid)
    dens = _density_qr(model, sample, root, grid, n_list)

    excluded: set[int] = set()
    T_norms, X_norms, y_norms = {}, {}, []
    for n in n_list:
        st = states[n]
        sol = solve_uy(root.x, st.DinvC, split, head)
        bad = ~sol.rank_full
        if np.any(sol.residual[~bad] > UY_TOL):
            raise ArithmeticError(f"(u, y) residual {float(np.max(sol.residual[~bad])):.3e} at depth {n}")
        excluded.update(np.flatnonzero(bad).tolist())
        Xy = (st.X @ sol.y[..., None])[..., 0]
        v = np.concatenate([Xy, np.zeros(grid.shape + (split.l1,), dtype=complex)], axis=-1)
        Tn = np.linalg.norm((split.Q @ v[..., None])[..., 0], axis=-1)
        Tn[bad] = np.nan
        T_norms[n] = Tn
        X_norms[n] = opnorm(st.X)
        y_norms.extend(np.linalg.norm(sol.y[~bad], axis=-1).tolist())

    keep = np.ones(grid.shape, dtype=bool)
    keep[list(excluded)] = False
    g = grid[keep]
    integrals = [float(np.trapezoid(T_norms[n][keep] ** 4, g)) for n in n_list]
    x_integrals = [float(np.trapezoid(X_norms[n][keep] ** 4, g)) for n in n_list]
    running = list(np.minimum.accumulate(integrals))

    ratios = [np.max((math.pi * dens[n][keep]) ** 2 / T_norms[n][keep] ** 4) for n in n_list]
    cs_max = float(max(ratios)) if ratios else 0.0
    C_y = max(y_norms) if y_norms else 0.0
    relation = all(
        I <= (window.CQ * C_y) ** 4 * J * (1 + 1e-9) + 1e-300 for I, J in zip(integrals, x_integrals)
    )
    return ACReport(
        n_list=n_list, integrals=integrals, x_integrals=x_integrals, liminf_estimate=float(running[-1]),
        running_min=[float(r) for r in running], excluded=[float(grid[i]) for i in sorted(excluded)],
        cauchy_schwarz_max_ratio=cs_max, cauchy_schwarz_ok=bool(cs_max <= 1 + cs_slack), C_y=C_y,
        CQ=window.CQ, relation_ok=bool(relation), m=m, m_star=m_star, grid=grid, T_norms=T_norms,
    )


@dataclass(frozen=True)
class OracleDensity:
    grid: np.ndarray
    values: np.ndarray
    eta: float
    N: int
    energies: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    def integral(self, weight=None) -> float:
        vals = self.values if weight is None else self.values * weight(self.grid)
        return float(np.trapezoid(vals, self.grid))


def truncation_spectral_oracle(
    model: OperatorModel,
    sample: PotentialSample,
    N: int,
    x,
    eta: float | None = None,
    grid=None,
) -> OracleDensity:
    """``g(lambda) = Im <x, (H_{0,N} - lambda - i eta)^{-1} x> / pi`` from a dense eigensolve.

    ``x`` sits at site 0.  ``eta`` defaults to ``4/N``; ``grid`` defaults to
    512 points per unit over the spectrum hull padded by ``10 eta``.
    """
    root = _as_root(x)
    if N > 5000 * model.l:
        raise ValueError(f"N={N} is too large for a dense eigensolve (limit {5000 * model.l})")
    eta = 4.0 / N if eta is None else float(eta)
    H = restrict(model, sample, 0, N)
    if not np.any(H.imag):
        H = H.real  # the real symmetric solver is several times faster
    E, vecs = scipy.linalg.eigh(H, driver="evr")
    weights = np.abs(vecs[: model.l, :].conj().T @ root.x) ** 2
    if grid is None:
        lo, hi = E[0] - 10 * eta, E[-1] + 10 * eta
        grid = np.linspace(lo, hi, int(math.ceil(512 * (hi - lo))) + 1)
    grid = np.asarray(grid, dtype=float)
    vals = np.empty(grid.shape)
    for s in range(0, grid.size, 1024):
        lam = grid[s:s + 1024, None]
        vals[s:s + 1024] = (weights[None, :] * eta / ((E[None, :] - lam) ** 2 + eta**2)).sum(-1) / math.pi
    return OracleDensity(grid=grid, values=vals, eta=eta, N=N, energies=E, weights=weights)
