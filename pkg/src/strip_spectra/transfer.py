"""Transfer matrices, truncated potentials and resolvent boundary data."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .channels import ChannelSplit, free_transfer, w_bound
from .model import OperatorModel, PotentialSample, restrict

RENORM_TRIGGER = 2.0
BETA_RCOND = 1e-12
SPECTRUM_PROXIMITY = 1e-10
REAL_PERTURBATION = 1e-8


class SingularSolveError(ArithmeticError):
    """``z`` too close to the spectrum of a finite restriction, or ``beta`` not invertible."""

    def __init__(self, msg: str, proximity: float):
        super().__init__(msg)
        self.proximity = proximity


class TransferOverflowError(OverflowError):
    def __init__(self, step: int):
        super().__init__(f"transfer product overflowed at site {step} despite rescaling")
        self.step = step


class AdmissibilityError(ValueError):
    """A conjugated perturbation violates ``|W| < (e^{2g} - e^g)/4``."""

    def __init__(self, msg: str, site: int | None = None):
        super().__init__(msg)
        self.site = site


def _cjson(M) -> list:
    M = np.asarray(M)
    return [[[float(v.real), float(v.imag)] for v in row] for row in M]


def _from_cjson(rows) -> np.ndarray:
    arr = np.asarray(rows, dtype=float)
    return arr[..., 0] + 1j * arr[..., 1]


@dataclass(frozen=True)
class TransferMatrix:
    """``e^{log_scale} * entries``."""

    entries: np.ndarray
    log_scale: float = 0.0

    def matrix(self) -> np.ndarray:
        return math.exp(self.log_scale) * self.entries

    def __matmul__(self, other: "TransferMatrix") -> "TransferMatrix":
        return _renormalize(self.entries @ other.entries, self.log_scale + other.log_scale)

    def to_dict(self) -> dict:
        return {"entries": _cjson(self.entries), "log_scale": self.log_scale}

    @classmethod
    def from_dict(cls, d) -> "TransferMatrix":
        return cls(entries=_from_cjson(d["entries"]), log_scale=float(d["log_scale"]))


def _renormalize(M: np.ndarray, log_scale: float) -> TransferMatrix:
    s = float(np.max(np.abs(M)))
    if s > RENORM_TRIGGER:
        return TransferMatrix(M / s, log_scale + math.log(s))
    return TransferMatrix(M, log_scale)


def _check_site(sample: PotentialSample, n: int):
    if not 0 <= n < sample.N:
        raise IndexError(f"site {n} outside the sample (N={sample.N})")


def transfer_single(model: OperatorModel, sample: PotentialSample, n: int, z: complex) -> TransferMatrix:
    """``T^z_n = [[V_n + A - z, -I], [I, 0]]``."""
    _check_site(sample, n)
    T = free_transfer(model, z)
    T[: model.l, : model.l] += sample.matrices[n]
    return TransferMatrix(T, 0.0)


def transfer_product(model: OperatorModel, sample: PotentialSample, m: int, n: int, z: complex) -> TransferMatrix:
    """``T_n T_{n-1} ... T_m``, rescaled into ``log_scale`` whenever the max entry exceeds 2.

    ``n = m - 1`` gives the identity (empty product).
    """
    if n == m - 1:
        return TransferMatrix(np.eye(2 * model.l, dtype=complex), 0.0)
    if not m <= n:
        raise IndexError(f"need m <= n, got m={m}, n={n}")
    _check_site(sample, m)
    _check_site(sample, n)
    l = model.l
    base = free_transfer(model, z)
    M = np.eye(2 * l, dtype=complex)
    log_scale = 0.0
    for k in range(m, n + 1):
        T = base.copy()
        T[:l, :l] += sample.matrices[k]
        M = T @ M
        s = float(np.max(np.abs(M)))
        if not math.isfinite(s):
            raise TransferOverflowError(k)
        if s > RENORM_TRIGGER:
            M /= s
            log_scale += math.log(s)
    return TransferMatrix(M, log_scale)


def transfer_batch(model: OperatorModel, sample: PotentialSample, m: int, n: int, z) -> tuple[np.ndarray, np.ndarray]:
    """``transfer_product`` for an array of ``z``; returns ``(entries, log_scale)`` arrays."""
    z = np.asarray(z, dtype=complex)
    l = model.l
    M = np.broadcast_to(np.eye(2 * l, dtype=complex), z.shape + (2 * l, 2 * l)).copy()
    log_scale = np.zeros(z.shape)
    if n < m:
        return M, log_scale
    base = free_transfer(model, z)
    for k in range(m, n + 1):
        T = base.copy()
        T[..., :l, :l] += sample.matrices[k]
        M = T @ M
        s = np.max(np.abs(M), axis=(-2, -1))
        if not np.all(np.isfinite(s)):
            raise TransferOverflowError(k)
        big = s > RENORM_TRIGGER
        if np.any(big):
            M[big] /= s[big][:, None, None]
            log_scale[big] += np.log(s[big])
    return M, log_scale


def truncate_potential(sample: PotentialSample, split) -> tuple[PotentialSample, int]:
    """Zero every site with ``|V_n| >= (e^{2g} - e^g)/(4 CQ^2)``.

    ``split`` is a ``ChannelSplit`` carrying ``gap``/``CQ`` or a ``GapEstimate``.
    Returns the truncated sample and ``m*``, the smallest index with no zeroed
    site at or beyond it.
    """
    if isinstance(split, ChannelSplit):
        split._require_constants()
    thr = split.threshold
    norms = sample.norms()
    cut = norms >= thr
    mats = sample.matrices.copy()
    mats[cut] = 0
    hits = np.flatnonzero(cut)
    m_star = int(hits[-1]) + 1 if hits.size else 0
    return PotentialSample(matrices=mats, seed=sample.seed, N=sample.N), m_star


def conjugate_potential(split: ChannelSplit, V: np.ndarray) -> np.ndarray:
    """``Qinv [[V, 0], [0, 0]] Q``; broadcasts over leading axes of ``V`` and the split."""
    l = split.l
    return split.Qinv[..., :, :l] @ V @ split.Q[..., :l, :]


def conjugated_step(split: ChannelSplit, model: OperatorModel, hat_sample: PotentialSample, n: int, z=None):
    """Diagonal free part and conjugated perturbation ``W^z_n`` at site ``n``.

    Raises ``AdmissibilityError`` when ``|W^z_n| >= (e^{2g} - e^g)/4``, which
    signals a split/threshold mismatch.
    """
    split._require_constants()
    if z is not None and not np.allclose(np.asarray(z, dtype=complex), split.z, rtol=0, atol=1e-14):
        raise ValueError("split was computed at a different z")
    _check_site(hat_sample, n)
    W = conjugate_potential(split, hat_sample.matrices[n])
    norm = np.linalg.norm(W, ord=2, axis=(-2, -1))
    bound = w_bound(split.gap)
    if np.any(norm >= bound):
        raise AdmissibilityError(
            f"|W_{n}| = {float(np.max(norm)):.6g} >= {bound:.6g}; the potential is not truncated for this split", n
        )
    D = np.zeros(W.shape, dtype=complex)
    d = split.diagonal
    idx = np.arange(d.shape[-1])
    D[..., idx, idx] = d
    return D, W


@dataclass(frozen=True)
class BoundaryData:
    """Corner blocks of ``(H_{m,n} - z)^{-1}``: ``alpha = P_m* R P_m``, ``beta = P_m* R P_n``,
    ``gamma = P_n* R P_m``, ``delta = P_n* R P_n``."""

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray
    z: complex
    m: int
    n: int
    perturbation: complex = 0j

    def to_dict(self) -> dict:
        return {
            "alpha": _cjson(self.alpha), "beta": _cjson(self.beta),
            "gamma": _cjson(self.gamma), "delta": _cjson(self.delta),
            "z": [self.z.real, self.z.imag], "m": self.m, "n": self.n,
            "perturbation": [self.perturbation.real, self.perturbation.imag],
        }

    @classmethod
    def from_dict(cls, d) -> "BoundaryData":
        return cls(
            alpha=_from_cjson(d["alpha"]), beta=_from_cjson(d["beta"]),
            gamma=_from_cjson(d["gamma"]), delta=_from_cjson(d["delta"]),
            z=complex(*d["z"]), m=int(d["m"]), n=int(d["n"]),
            perturbation=complex(*d.get("perturbation", (0.0, 0.0))),
        )


def boundary_data(
    model: OperatorModel, sample: PotentialSample, m: int, n: int, z: complex, *, perturb_real: bool = False
) -> BoundaryData:
    """Resolvent corner blocks from one factorised solve with ``2l`` right-hand sides.

    With ``perturb_real=True`` a real ``z`` closer than ``1e-10`` to the spectrum
    is moved to ``z + 1e-8 i`` and the shift is recorded in ``perturbation``.
    """
    H = restrict(model, sample, m, n)
    l = model.l
    z = complex(z)
    dist = float(np.min(np.abs(scipy.linalg.eigvalsh(H) - z)))
    shift = 0j
    if dist < SPECTRUM_PROXIMITY:
        if perturb_real and z.imag == 0:
            shift = 1j * REAL_PERTURBATION
            z = z + shift
        else:
            raise SingularSolveError(f"z={z} is within {dist:.3e} of the spectrum of H_{{{m},{n}}}", dist)
    size = H.shape[0]
    rhs = np.zeros((size, 2 * l), dtype=complex)
    rhs[:l, :l] = np.eye(l)
    rhs[-l:, l:] = np.eye(l)
    lu = scipy.linalg.lu_factor(H - z * np.eye(size))
    X = scipy.linalg.lu_solve(lu, rhs)
    top, bot = X[:l], X[-l:]
    return BoundaryData(
        alpha=top[:, :l], beta=top[:, l:], gamma=bot[:, :l], delta=bot[:, l:],
        z=z - shift, m=m, n=n, perturbation=shift,
    )


def transfer_from_boundary(bd: BoundaryData) -> TransferMatrix:
    """``[[b^-1, -b^-1 a], [d b^-1, g - d b^-1 a]]`` from the corner blocks."""
    sv = np.linalg.svd(bd.beta, compute_uv=False)
    if sv[-1] <= BETA_RCOND * sv[0]:
        raise SingularSolveError(
            f"beta is numerically singular: smallest singular value {sv[-1]:.3e} (largest {sv[0]:.3e})", float(sv[-1])
        )
    binv = np.linalg.inv(bd.beta)
    binv_a = binv @ bd.alpha
    T = np.block([[binv, -binv_a], [bd.delta @ binv, bd.gamma - bd.delta @ binv_a]])
    return _renormalize(T, 0.0)
