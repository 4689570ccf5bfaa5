"""Schur-complement process of conjugated transfer-matrix products.

For ``X_{n+1} = (T + W_n) X_n`` with ``T = diag(S, Gamma)`` split into blocks of
sizes ``l0`` and ``l1``, the state tracks

    X_n = A_n - B_n D_n^{-1} C_n,   Z_n = B_n D_n^{-1},   Y_n = D_n^{-1} C_n

without ever forming the exponentially growing ``D_n``.  Every routine
broadcasts over leading batch axes (grids of spectral parameters, ensembles of
samples).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.optimize

from .channels import ChannelSplit, GapEstimate, channel_split, free_transfer, spectral_gap, w_bound
from .model import OperatorModel, PotentialSample
from .transfer import (
    AdmissibilityError,
    TransferMatrix,
    conjugate_potential,
    truncate_potential,
)

TAU_RANK = 1e-8
PINV_RCOND = 1e-10
BOUND_SLACK = 1e-12


def opnorm(M: np.ndarray) -> np.ndarray:
    """Spectral norm over the last two axes; 0 for empty matrices."""
    M = np.asarray(M)
    if M.shape[-1] == 0 or M.shape[-2] == 0:
        return np.zeros(M.shape[:-2])
    return np.linalg.norm(M, ord=2, axis=(-2, -1))


@dataclass(frozen=True)
class SchurState:
    """One point of the recursion.

    ``D^{-1}_n`` decays geometrically and underflows after a few hundred
    steps, so it is kept as ``exp(Dinv_log) * Dinv`` with ``Dinv`` of unit
    max-entry; the running bound ``prod |G_k^{-1}|`` is kept as its logarithm.
    """

    X: np.ndarray
    Z: np.ndarray
    DinvC: np.ndarray
    Dinv: np.ndarray
    Dinv_log: np.ndarray | float
    log_Dinv_bound: np.ndarray | float
    n: int

    @property
    def Dinv_norm_bound(self):
        return np.exp(self.log_Dinv_bound)

    @property
    def Dinv_true(self) -> np.ndarray:
        return np.exp(self.Dinv_log)[..., None, None] * self.Dinv

    def log_Dinv_norm(self):
        """``log |D_n^{-1}|`` without underflow."""
        with np.errstate(divide="ignore"):
            return np.log(opnorm(self.Dinv)) + self.Dinv_log


@dataclass(frozen=True)
class RankDiagnostic:
    """``smax`` is the scale ``|(Y I)| |Qinv T_head (I; 0)|`` bounding ``|A|`` from above."""

    lam: float
    smin: float
    smax: float
    rank_full: bool


class RankDeficientError(ArithmeticError):
    def __init__(self, diagnostic: RankDiagnostic):
        super().__init__(
            f"rank condition fails at lambda={diagnostic.lam}: smin={diagnostic.smin:.3e}, scale={diagnostic.smax:.3e}"
        )
        self.diagnostic = diagnostic


def schur_init(l0: int, l1: int, batch_shape: tuple = ()) -> SchurState:
    if l0 < 0 or l1 < 0:
        raise ValueError("block sizes must be >= 0")
    batch_shape = tuple(batch_shape)

    def zeros(r, c):
        return np.zeros(batch_shape + (r, c), dtype=complex)

    def eye(k):
        return np.broadcast_to(np.eye(k, dtype=complex), batch_shape + (k, k)).copy()

    scalar = np.zeros(batch_shape) if batch_shape else 0.0
    return SchurState(
        X=eye(l0), Z=zeros(l0, l1), DinvC=zeros(l1, l0), Dinv=eye(l1),
        Dinv_log=scalar, log_Dinv_bound=scalar, n=0,
    )


def _blocks(W, l0):
    if isinstance(W, tuple):
        return W
    return W[..., :l0, :l0], W[..., :l0, l0:], W[..., l0:, :l0], W[..., l0:, l0:]


def check_admissible(S, Gamma, W, gap: float, slack: float = BOUND_SLACK) -> None:
    """Raise unless ``|S| <= e^g``, ``|Gamma^-1| <= e^{-2g}`` and ``|W| <= (e^{2g} - e^g)/4``."""
    nS = float(np.max(opnorm(S))) if np.size(S) else 0.0
    if nS > math.exp(gap) * (1 + slack):
        raise AdmissibilityError(f"|S| = {nS:.6g} exceeds e^gap = {math.exp(gap):.6g}")
    if np.size(Gamma):
        nG = float(np.max(opnorm(np.linalg.inv(Gamma))))
        if nG > math.exp(-2 * gap) * (1 + slack):
            raise AdmissibilityError(f"|Gamma^-1| = {nG:.6g} exceeds e^-2gap = {math.exp(-2 * gap):.6g}")
    if isinstance(W, tuple):
        W = np.concatenate([np.concatenate(W[:2], -1), np.concatenate(W[2:], -1)], -2)
    nW = float(np.max(opnorm(W)))
    if nW > w_bound(gap) * (1 + slack):
        raise AdmissibilityError(f"|W| = {nW:.6g} exceeds (e^2g - e^g)/4 = {w_bound(gap):.6g}")


def schur_step(state: SchurState, S, Gamma, W, gap: float | None = None) -> SchurState:
    """Advance ``(X, Z, D^{-1}C)`` by one factor ``T + W``.

    ``W`` is the full ``(l0+l1)``-square perturbation or its blocks
    ``(a, b, c, d)``.  When ``gap`` is given the contraction preconditions are
    checked before anything is updated.
    """
    if gap is not None:
        check_admissible(S, Gamma, W, gap)
    l0 = state.X.shape[-1]
    a, b, c, d = _blocks(W, l0)
    Sa = S + a
    G = c @ state.Z + Gamma + d
    Ginv = np.linalg.inv(G) if G.shape[-1] else G
    Z = (Sa @ state.Z + b) @ Ginv
    cX = c @ state.X
    X = Sa @ state.X - Z @ cX
    Dinv = state.Dinv @ Ginv
    DinvC = state.DinvC + np.exp(state.Dinv_log)[..., None, None] * (Dinv @ cX)
    if G.shape[-1]:
        peak = np.max(np.abs(Dinv), axis=(-2, -1))
        peak = np.where(peak > 0, peak, 1.0)
        Dinv = Dinv / peak[..., None, None]
        Dinv_log = state.Dinv_log + np.log(peak)
        with np.errstate(divide="ignore"):
            log_bound = state.log_Dinv_bound + np.log(opnorm(Ginv))
    else:
        Dinv_log, log_bound = state.Dinv_log, state.log_Dinv_bound
    return SchurState(X=X, Z=Z, DinvC=DinvC, Dinv=Dinv, Dinv_log=Dinv_log, log_Dinv_bound=log_bound, n=state.n + 1)


@dataclass(frozen=True)
class SchurRun:
    trajectory: list[SchurState]
    Y: np.ndarray
    certificate: np.ndarray | float
    m: int
    N: int

    @property
    def final(self) -> SchurState:
        return self.trajectory[-1]


def _working_split(model, z, split, window):
    if split is not None:
        split._require_constants()
        return split
    if window is None:
        raise ValueError("pass a split carrying gap/CQ or a window from spectral_gap")
    return channel_split(model, z, window=window)


def schur_run(
    model: OperatorModel,
    sample: PotentialSample,
    m: int,
    N: int,
    z,
    split: ChannelSplit | None = None,
    *,
    window: GapEstimate | None = None,
    keep: str = "all",
    checkpoints=(),
) -> SchurRun:
    """Run the recursion over sites ``m .. N`` (inclusive) of an already truncated sample.

    The final ``DinvC`` estimates ``Y_m``; ``certificate`` is
    ``|DinvC(N) - DinvC(midpoint)|``.  ``keep="all"`` stores every state
    (index 0 is the initial state), ``keep="checkpoints"`` only the states after
    the sites listed in ``checkpoints`` plus the last one.
    """
    split = _working_split(model, z, split, window)
    if not 0 <= m <= N < sample.N:
        raise IndexError(f"need 0 <= m <= N < {sample.N}, got m={m}, N={N}")
    batch = np.shape(split.z)
    S, Gamma = split.S, split.Gamma
    state = schur_init(split.l0, split.l1, batch)
    keep_at = set(int(c) for c in checkpoints)
    traj = [state] if keep == "all" else []
    mid_site = m + (N - m + 1) // 2 - 1
    mid = state.DinvC
    bound = w_bound(split.gap)
    for site in range(m, N + 1):
        W = conjugate_potential(split, sample.matrices[site])
        nW = float(np.max(opnorm(W)))
        if nW >= bound:
            raise AdmissibilityError(f"inadmissible step at site {site}: |W| = {nW:.6g} >= {bound:.6g}", site)
        state = schur_step(state, S, Gamma, W)
        if keep == "all" or site in keep_at or site == N:
            traj.append(state)
        if site == mid_site:
            mid = state.DinvC
    cert = opnorm(state.DinvC - mid)
    return SchurRun(trajectory=traj, Y=state.DinvC, certificate=cert, m=m, N=N)


@dataclass(frozen=True)
class HeadSteps:
    """The single-site factors ``T_0, ..., T_{m-1}`` of the head, left unmultiplied.

    The product grows like ``e^{m log|gamma|}`` and in floating point its
    non-growing rows (the ones that determine ``y``) drown in the rounding of
    the growing row.  Keeping the factors lets ``construct_uy`` and
    ``rank_matrix`` work on orthonormal bases instead.  ``matrices`` has shape
    ``(m, ..., 2l, 2l)`` with the batch axes of ``z``.
    """

    matrices: np.ndarray

    @property
    def m(self) -> int:
        return self.matrices.shape[0]


def head_steps(model: OperatorModel, sample: PotentialSample, m: int, z) -> HeadSteps:
    """Factors of ``T^z_{0,m-1}`` for a scalar or array ``z``."""
    if not 0 <= m <= sample.N:
        raise IndexError(f"head length {m} outside the sample (N={sample.N})")
    base = free_transfer(model, np.asarray(z, dtype=complex))
    l = model.l
    mats = np.broadcast_to(base, (m,) + base.shape).copy()
    mats[..., :l, :l] += sample.matrices[:m].reshape((m,) + (1,) * (base.ndim - 2) + (l, l))
    return HeadSteps(mats)


def _head_matrix(T_head, l2: int) -> tuple[np.ndarray, np.ndarray | float]:
    if T_head is None:
        return np.eye(l2, dtype=complex), 0.0
    if isinstance(T_head, TransferMatrix):
        return T_head.entries, T_head.log_scale
    if isinstance(T_head, tuple):
        return T_head
    return np.asarray(T_head, dtype=complex), 0.0


def _hermitian(M):
    return M.conj().swapaxes(-1, -2)


def _constraint_bases(Y, split: ChannelSplit, steps: HeadSteps):
    """Pull the constraint ``(Y I) Qinv v = 0`` back from site ``m`` to site 0.

    Returns the orthonormal constraint rows at site 0 and, for every site
    ``k = 0..m``, an orthonormal basis of the admissible subspace there.
    """
    l_h = split.l_h
    eye = np.broadcast_to(np.eye(l_h, dtype=complex), Y.shape[:-1] + (l_h,))
    rows = np.concatenate([Y, eye], axis=-1) @ split.Qinv
    kernels = [None] * (steps.m + 1)
    for k in range(steps.m, -1, -1):
        if k < steps.m:
            rows = rows @ steps.matrices[k]
        Qc, _ = np.linalg.qr(_hermitian(rows), mode="complete")
        rows = _hermitian(Qc[..., :l_h])
        kernels[k] = Qc[..., l_h:]
    return rows, kernels


@dataclass(frozen=True)
class UYSolution:
    """Batched output of ``solve_uy``; ``residual`` is ``|rows_0 (u; x)| / |(u; x)|``."""

    u: np.ndarray
    y: np.ndarray
    smin: np.ndarray
    residual: np.ndarray

    @property
    def rank_full(self) -> np.ndarray:
        return self.smin > TAU_RANK


def solve_uy(x, Y, split: ChannelSplit, steps: HeadSteps) -> UYSolution:
    """Batched ``u`` (minimum norm) and ``y`` with ``Qinv T_head (u; x) = (y; -Y y)``.

    The constraint rows are carried back through the head with
    re-orthonormalisation at every site, and ``(u; x)`` is carried forward
    inside the admissible subspaces, so no growing direction is ever
    multiplied into the answer.  ``smin`` is the smallest singular value of
    the ``u`` block of the orthonormal rows; it vanishes exactly when
    ``(Y I) Qinv T_head (I; 0)`` loses rank.
    """
    l, l_h, l_e = split.l, split.l_h, split.l_e
    batch = np.shape(split.z)
    x = np.broadcast_to(np.asarray(x, dtype=complex), batch + (l,))
    if l_h == 0:
        u = np.zeros(batch + (l,), dtype=complex)
        ident = np.broadcast_to(np.eye(2 * l, dtype=complex), batch + (2 * l, 2 * l))
        kernels = [ident] * (steps.m + 1)
        smin = np.full(batch, np.inf)
        residual = np.zeros(batch)
    else:
        rows, kernels = _constraint_bases(Y, split, steps)
        A = rows[..., :l]
        smin = np.linalg.svd(A, compute_uv=False)[..., -1]
        rhs = -(rows[..., l:] @ x[..., None])
        u = (np.linalg.pinv(A, rcond=PINV_RCOND) @ rhs)[..., 0]
        v = np.concatenate([u, x], axis=-1)
        residual = np.linalg.norm((rows @ v[..., None])[..., 0], axis=-1) / np.linalg.norm(v, axis=-1)
    c = _hermitian(kernels[0]) @ np.concatenate([u, x], axis=-1)[..., None]
    for k in range(steps.m):
        c = _hermitian(kernels[k + 1]) @ (steps.matrices[k] @ (kernels[k] @ c))
    w = (split.Qinv @ (kernels[-1] @ c))[..., 0]
    return UYSolution(u=u, y=w[..., : l + l_e], smin=smin, residual=residual)


def rank_matrix(Y: np.ndarray, split: ChannelSplit, T_head=None, lam: float | None = None):
    """``A = (Y  I) Qinv T_head (I; 0)`` and its rank diagnostic.

    ``T_head`` is ``T^z_{0,m-1}`` as a ``TransferMatrix``, an
    ``(entries, log_scale)`` pair or a plain matrix (``None`` means identity),
    or a ``HeadSteps``.  With ``HeadSteps`` the returned ``A`` is left-multiplied
    by the invertible factor that orthonormalises the constraint rows: the rank
    is the same and the scale is 1.  Prefer it whenever the head is long.
    """
    l, l_h = split.l, split.l_h
    lam = float(np.real(split.z)) if lam is None else lam
    if l_h == 0:
        return np.zeros((0, l), dtype=complex), RankDiagnostic(lam=lam, smin=math.inf, smax=0.0, rank_full=True)
    if isinstance(T_head, HeadSteps):
        rows, _ = _constraint_bases(Y, split, T_head)
        A = rows[..., :l]
        smin = float(np.linalg.svd(A, compute_uv=False)[-1])
        return A, RankDiagnostic(lam=lam, smin=smin, smax=1.0, rank_full=bool(smin > TAU_RANK))
    H, log_scale = _head_matrix(T_head, 2 * l)
    YI = np.concatenate([Y, np.eye(l_h, dtype=complex)], axis=-1)
    R = split.Qinv @ H[..., :, :l]
    A_scaled = YI @ R
    s = np.linalg.svd(A_scaled, compute_uv=False)
    scale = float(opnorm(YI) * opnorm(R))
    smin = float(s[-1])
    diag = RankDiagnostic(lam=lam, smin=smin, smax=scale, rank_full=bool(smin > TAU_RANK * scale))
    return math.exp(log_scale) * A_scaled, diag


def construct_uy(x: np.ndarray, Y: np.ndarray, split: ChannelSplit, T_head=None, tol: float = 1e-8):
    """Solve ``Qinv T_head (u; x) = (y; -Y y)`` for ``u`` (minimum norm) and ``y``.

    ``T_head`` as in ``rank_matrix``.  An explicit product is only trustworthy
    while its growth stays far below ``1/eps``; pass ``HeadSteps`` otherwise.
    ``y`` is returned de-scaled.  Raises ``RankDeficientError`` if ``Y a + c``
    is not surjective.
    """
    l, l_h, l_e = split.l, split.l_h, split.l_e
    x = np.asarray(x, dtype=complex)
    if isinstance(T_head, HeadSteps):
        sol = solve_uy(x, Y, split, T_head)
        if l_h and not sol.rank_full:
            lam = float(np.real(split.z))
            raise RankDeficientError(RankDiagnostic(lam=lam, smin=float(sol.smin), smax=1.0, rank_full=False))
        if sol.residual > tol:
            raise ArithmeticError(f"(u, y) residual {float(sol.residual):.3e} exceeds tolerance")
        return sol.u, sol.y
    H, log_scale = _head_matrix(T_head, 2 * l)
    P = split.Qinv @ H
    top = l + l_e
    fa, fb, fc, fd = P[:top, :l], P[:top, l:], P[top:, :l], P[top:, l:]
    if l_h == 0:
        u = np.zeros(l, dtype=complex)
    else:
        _, diag = rank_matrix(Y, split, (H, log_scale))
        if not diag.rank_full:
            raise RankDeficientError(diag)
        lhs = Y @ fa + fc
        rhs = -(Y @ fb + fd) @ x
        u = np.linalg.pinv(lhs, rcond=PINV_RCOND) @ rhs
    y = fa @ u + fb @ x
    resid = float(np.linalg.norm(fc @ u + fd @ x + Y @ y)) if l_h else 0.0
    if resid > tol * (1 + float(np.linalg.norm(y))):
        raise ArithmeticError(f"(u, y) residual {resid:.3e} exceeds tolerance")
    return u, math.exp(log_scale) * y


def _scan_setup(model, sample, m, a, b, window):
    window = window or spectral_gap(model, a, b)
    hat, m_star = truncate_potential(sample, window)
    return window, hat, m_star


def rank_scan(
    model: OperatorModel,
    sample: PotentialSample,
    m: int,
    a: float,
    b: float,
    grid_points: int,
    *,
    N: int | None = None,
    window: GapEstimate | None = None,
):
    """``(grid, smin)``: smallest singular value of the row-orthonormalised ``A^lambda_m``."""
    window, hat, m_star = _scan_setup(model, sample, m, a, b, window)
    if m < m_star:
        raise ValueError(f"m={m} is below m*={m_star}; the truncated and original potentials differ past m")
    N = sample.N - 1 if N is None else N
    grid = np.linspace(a, b, grid_points)
    if window.l_h == 0:
        return grid, np.full(grid.shape, np.inf)
    split = channel_split(model, grid.astype(complex), window=window)
    run = schur_run(model, hat, m, N, None, split, keep="checkpoints")
    rows, _ = _constraint_bases(run.Y, split, head_steps(model, sample, m, grid))
    return grid, np.linalg.svd(rows[..., : model.l], compute_uv=False)[..., -1]


def _rank_smin(model, sample, hat, m, N, lam, window):
    split = channel_split(model, complex(lam), window=window)
    run = schur_run(model, hat, m, N, None, split, keep="checkpoints")
    _, diag = rank_matrix(run.Y, split, head_steps(model, sample, m, complex(lam)), lam=lam)
    return diag.smin


def find_rank_deficiencies(
    model: OperatorModel,
    sample: PotentialSample,
    m: int,
    a: float,
    b: float,
    grid_points: int,
    *,
    N: int | None = None,
    window: GapEstimate | None = None,
    tau: float = TAU_RANK,
    xtol: float = 1e-14,
) -> list[float]:
    """Energies in ``[a, b]`` where ``rank A^lambda_m < l_h``.

    Local minima of ``smin`` on the grid are refined by golden-section
    search; a candidate is kept when the refined value drops below ``tau``.
    """
    window, hat, _ = _scan_setup(model, sample, m, a, b, window)
    if window.l_h == 0:
        return []
    N = sample.N - 1 if N is None else N
    grid, smin = rank_scan(model, sample, m, a, b, grid_points, N=N, window=window)

    def f(t):
        return _rank_smin(model, sample, hat, m, N, t, window)

    out = []
    for i in range(len(grid)):
        lo, hi = max(i - 1, 0), min(i + 1, len(grid) - 1)
        if smin[i] > smin[lo] or smin[i] > smin[hi]:
            continue
        if lo == i or hi == i:
            if smin[i] >= tau:
                continue
            lam_star = float(grid[i])
        else:
            res = scipy.optimize.minimize_scalar(f, bracket=(grid[lo], grid[i], grid[hi]), method="golden", tol=xtol)
            lam_star = float(res.x)
            if not (grid[lo] <= lam_star <= grid[hi]) or res.fun >= tau:
                continue
        if not out or abs(lam_star - out[-1]) > (grid[1] - grid[0]):
            out.append(lam_star)
    return out
