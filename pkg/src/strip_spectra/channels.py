"""Band structure and the elliptic/hyperbolic channel decomposition.

At a spectral parameter ``z`` channel ``j`` is elliptic when ``|alpha_j - Re z| < 2``
and hyperbolic when ``|alpha_j - Re z| > 2``.  Ordering elliptic channels first,
the free transfer matrix is diagonalised by ``Q_z`` into
``diag(e^{iK}, e^{-iK}, Gamma^{-1}, Gamma)`` where ``2 cos k_j = alpha_j - z`` and
``gamma_j + 1/gamma_j = alpha_j - z`` with ``|gamma_j| > 1``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .model import OperatorModel

TAU_PAR = 1e-9


class Channel(str, enum.Enum):
    ELLIPTIC = "elliptic"
    HYPERBOLIC = "hyperbolic"
    PARABOLIC = "parabolic"


class ChannelError(ValueError):
    """Spectral parameter outside the admissible region (band edge, no elliptic channel, ...)."""


@dataclass(frozen=True)
class BandStructure:
    bands: list[tuple[float, float]]
    sigma: list[tuple[float, float]]
    sigma0: tuple[float, float] | None

    def to_dict(self) -> dict:
        return {
            "bands": [list(b) for b in self.bands],
            "sigma": [list(s) for s in self.sigma],
            "sigma0": list(self.sigma0) if self.sigma0 else None,
        }

    def contains(self, lam: float) -> bool:
        return any(a < lam < b for a, b in self.sigma)


def band_structure(model: OperatorModel) -> BandStructure:
    alpha = model.alpha
    bands = [(float(a - 2), float(a + 2)) for a in alpha]
    edges = sorted({e for b in bands for e in b})
    sigma = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        mid = 0.5 * (lo + hi)
        if any(a < mid < b for a, b in bands):
            sigma.append((lo, hi))
    lo, hi = float(np.max(alpha) - 2), float(np.min(alpha) + 2)
    sigma0 = (lo, hi) if lo < hi else None
    return BandStructure(bands=bands, sigma=sigma, sigma0=sigma0)


def classify_channels(model: OperatorModel, lam: float, tol: float = TAU_PAR) -> list[Channel]:
    out = []
    for a in model.alpha:
        d = abs(a - lam) - 2.0
        if abs(d) <= tol:
            out.append(Channel.PARABOLIC)
        elif d < 0:
            out.append(Channel.ELLIPTIC)
        else:
            out.append(Channel.HYPERBOLIC)
    return out


def channel_order(model: OperatorModel, lam: float, tol: float = TAU_PAR) -> tuple[np.ndarray, int]:
    """Permutation putting elliptic channels first (stable), and ``l_e``."""
    kinds = classify_channels(model, lam, tol)
    if Channel.PARABOLIC in kinds:
        j = kinds.index(Channel.PARABOLIC)
        raise ChannelError(
            f"channel {j} is parabolic at lambda={lam} (|alpha_j - lambda| = 2); Q_z is singular there"
        )
    ell = [j for j, k in enumerate(kinds) if k is Channel.ELLIPTIC]
    hyp = [j for j, k in enumerate(kinds) if k is Channel.HYPERBOLIC]
    if not ell:
        raise ChannelError(f"lambda={lam} lies outside every band (no elliptic channel)")
    return np.array(ell + hyp, dtype=int), len(ell)


def elliptic_momenta(w) -> np.ndarray:
    """``k`` with ``2 cos k = w``; principal arccos, so ``k in (0, pi)`` for real ``w in (-2, 2)``."""
    return np.arccos(np.asarray(w, dtype=complex) / 2)


def hyperbolic_multipliers(w) -> np.ndarray:
    """Root ``gamma`` of ``gamma^2 - w gamma + 1 = 0`` with ``|gamma| > 1``."""
    w = np.asarray(w, dtype=complex)
    r = np.sqrt(w * w - 4)
    g1, g2 = (w + r) / 2, (w - r) / 2
    return np.where(np.abs(g1) >= np.abs(g2), g1, g2)


def _blockdiag_eye(n, shape):
    return np.broadcast_to(np.eye(n, dtype=complex), shape + (n, n))


def _diag(v):
    v = np.asarray(v)
    out = np.zeros(v.shape + (v.shape[-1],), dtype=complex)
    idx = np.arange(v.shape[-1])
    out[..., idx, idx] = v
    return out


@dataclass(frozen=True)
class ChannelSplit:
    """Channel data at one ``z`` (or a 1-D array of ``z`` sharing channel types).

    Array fields carry a leading batch axis when ``z`` is an array.  ``Q`` and
    ``Qinv`` act in the model basis; the conjugated basis is ordered
    ``(e^{iK}, e^{-iK}, Gamma^{-1}, Gamma)``.
    """

    z: complex | np.ndarray
    l_e: int
    l_h: int
    perm: np.ndarray
    k: np.ndarray
    gamma: np.ndarray
    Q: np.ndarray
    Qinv: np.ndarray
    gap: float | None = None
    CQ: float | None = None
    height: float | None = None

    @property
    def l(self) -> int:
        return self.l_e + self.l_h

    @property
    def l0(self) -> int:
        return 2 * self.l_e + self.l_h

    @property
    def l1(self) -> int:
        return self.l_h

    @property
    def K(self) -> np.ndarray:
        return _diag(self.k)

    @property
    def Gamma(self) -> np.ndarray:
        return _diag(self.gamma)

    @property
    def diagonal(self) -> np.ndarray:
        """Eigenvalues ``(e^{iK}, e^{-iK}, Gamma^{-1}, Gamma)`` of the free transfer matrix."""
        eik = np.exp(1j * self.k)
        return np.concatenate([eik, 1 / eik, 1 / self.gamma, self.gamma], axis=-1)

    @property
    def S(self) -> np.ndarray:
        return _diag(self.diagonal[..., : self.l0])

    @property
    def threshold(self) -> float:
        """Truncation level ``(e^{2g} - e^g) / (4 CQ^2)`` for ``|V_n|``."""
        self._require_constants()
        return w_bound(self.gap) / self.CQ**2

    def _require_constants(self):
        if self.gap is None or self.CQ is None:
            raise ChannelError("split carries no gap/CQ; build it with channel_split(..., window=spectral_gap(...))")


def w_bound(gap: float) -> float:
    """Admissible size ``(e^{2g} - e^g)/4`` of the conjugated perturbation."""
    return (math.exp(2 * gap) - math.exp(gap)) / 4


def free_transfer(model: OperatorModel, z) -> np.ndarray:
    """``[[A - z, -I], [I, 0]]``, batched over an array ``z``."""
    z = np.asarray(z, dtype=complex)
    l = model.l
    T = np.zeros(z.shape + (2 * l, 2 * l), dtype=complex)
    idx = np.arange(l)
    T[..., idx, idx] = model.alpha - z[..., None]
    T[..., idx, idx + l] = -1.0
    T[..., idx + l, idx] = 1.0
    return T


def _assemble(k, gamma, perm, l):
    """``Q``, ``Qinv`` in the model basis from momenta and multipliers."""
    shape = k.shape[:-1]
    l_e, l_h = k.shape[-1], gamma.shape[-1]
    eik = np.exp(1j * k)
    emik = 1 / eik
    ginv = 1 / gamma
    Qp = np.zeros(shape + (2 * l, 2 * l), dtype=complex)
    e, h = np.arange(l_e), np.arange(l_h)
    # columns: [e^{iK} | e^{-iK} | Gamma^{-1} | Gamma]; rows: [Psi_{n+1} (ell, hyp) | Psi_n (ell, hyp)]
    Qp[..., e, e] = eik
    Qp[..., e, l_e + e] = emik
    Qp[..., l_e + h, 2 * l_e + h] = ginv
    Qp[..., l_e + h, 2 * l_e + l_h + h] = gamma
    Qp[..., l + e, e] = 1
    Qp[..., l + e, l_e + e] = 1
    Qp[..., l + l_e + h, 2 * l_e + h] = 1
    Qp[..., l + l_e + h, 2 * l_e + l_h + h] = 1

    qk = 1 / (eik - emik)
    qg = 1 / (ginv - gamma)
    Qi = np.zeros_like(Qp)
    Qi[..., e, e] = qk
    Qi[..., e, l + e] = -emik * qk
    Qi[..., l_e + e, e] = -qk
    Qi[..., l_e + e, l + e] = qk * eik
    Qi[..., 2 * l_e + h, l_e + h] = qg
    Qi[..., 2 * l_e + h, l + l_e + h] = -gamma * qg
    Qi[..., 2 * l_e + l_h + h, l_e + h] = -qg
    Qi[..., 2 * l_e + l_h + h, l + l_e + h] = ginv * qg

    rows = np.concatenate([perm, l + perm])
    Q = np.empty_like(Qp)
    Qinv = np.empty_like(Qi)
    Q[..., rows, :] = Qp
    Qinv[..., :, rows] = Qi
    return Q, Qinv


def _norm_2x2(a, b, c, d):
    """Spectral norm of ``[[a, b], [c, d]]`` elementwise, in closed form."""
    fro2 = abs(a) ** 2 + abs(b) ** 2 + abs(c) ** 2 + abs(d) ** 2
    det2 = abs(a * d - b * c) ** 2
    return np.sqrt((fro2 + np.sqrt(np.maximum(fro2**2 - 4 * det2, 0))) / 2)


def _conjugation_norm(k, gamma) -> float:
    """``max(|Q|, |Qinv|)`` over a batch; both are permuted direct sums of 2x2 channel blocks."""
    eik = np.exp(1j * k)
    t = np.concatenate([eik, 1 / gamma], axis=-1)
    s = np.concatenate([1 / eik, gamma], axis=-1)
    if t.size == 0:
        return 0.0
    # block [[t, s], [1, 1]] and its inverse [[1, -s], [-1, t]] / (t - s)
    one = np.ones_like(t)
    nq = _norm_2x2(t, s, one, one)
    nqi = _norm_2x2(one, -s, -one, t) / np.abs(t - s)
    return float(max(nq.max(), nqi.max()))


def _split_arrays(model: OperatorModel, z, perm: np.ndarray, l_e: int):
    z = np.asarray(z, dtype=complex)
    w = model.alpha[perm] - z[..., None]
    k = elliptic_momenta(w[..., :l_e])
    gamma = hyperbolic_multipliers(w[..., l_e:])
    Q, Qinv = _assemble(k, gamma, perm, model.l)
    return k, gamma, Q, Qinv


@dataclass(frozen=True)
class GapEstimate:
    """Uniform constants on the rectangle ``[a, b] + i[-height, height]``."""

    a: float
    b: float
    gap: float
    height: float
    CQ: float
    l_e: int
    l_h: int
    perm: np.ndarray

    def __iter__(self):
        # unpacks as (gap, height, CQ)
        return iter((self.gap, self.height, self.CQ))

    @property
    def threshold(self) -> float:
        return w_bound(self.gap) / self.CQ**2

    def to_dict(self) -> dict:
        return {
            "a": self.a, "b": self.b, "gap": self.gap, "height": self.height, "CQ": self.CQ,
            "l_e": self.l_e, "l_h": self.l_h, "perm": [int(p) for p in self.perm],
        }


def channel_split(model: OperatorModel, z, window: GapEstimate | None = None, tol: float = TAU_PAR) -> ChannelSplit:
    """Channel data at ``z``.

    ``z`` may be a scalar or a 1-D array; for an array all real parts must share
    the same channel types.  Passing ``window`` attaches its ``gap``, ``CQ``
    and ``height`` (and fixes the channel order to the window's).
    """
    z_arr = np.asarray(z, dtype=complex)
    lam = z_arr.real.reshape(-1)
    if window is not None:
        perm, l_e = window.perm, window.l_e
        for x in (lam.min(), lam.max()):
            p, le = channel_order(model, float(x), tol)
            if le != l_e or not np.array_equal(p, perm):
                raise ChannelError(f"Re z = {x} has different channel types than the window [{window.a}, {window.b}]")
    else:
        perm, l_e = channel_order(model, float(lam[0]), tol)
        for x in lam[1:]:
            p, le = channel_order(model, float(x), tol)
            if le != l_e or not np.array_equal(p, perm):
                raise ChannelError("channel types differ across the requested z values")
    k, gamma, Q, Qinv = _split_arrays(model, z_arr, perm, l_e)
    zval = complex(z_arr) if z_arr.ndim == 0 else z_arr
    kw = {}
    if window is not None:
        kw = dict(gap=window.gap, CQ=window.CQ, height=window.height)
    return ChannelSplit(z=zval, l_e=l_e, l_h=model.l - l_e, perm=perm, k=k, gamma=gamma, Q=Q, Qinv=Qinv, **kw)


def spectral_gap(
    model: OperatorModel,
    a: float,
    b: float,
    *,
    height: float | None = None,
    n_lambda: int | None = None,
    elliptic_gap: float = 1.0,
    tol: float = TAU_PAR,
) -> GapEstimate:
    """Find ``gap`` and ``height`` with ``|Gamma^{-1}| <= e^{-2 gap}`` and ``|e^{+-iK}| <= e^{gap}``.

    Both bounds are enforced with a multiplicative margin ``e^{-gap/100}`` on
    the boundary of ``[a, b] x [-height, height]``, sampled with step
    ``<= 1e-3 (b - a)``; every bounded quantity attains its extreme there.
    The gap is the largest value the hyperbolic bound allows; the height is
    halved from an initial guess until the elliptic bound holds.  Without a
    hyperbolic channel the gap is ``elliptic_gap``.
    """
    if not a < b:
        raise ChannelError(f"need a < b, got [{a}, {b}]")
    edges = np.concatenate([model.alpha - 2, model.alpha + 2])
    if np.any((edges >= a - tol) & (edges <= b + tol)):
        e = edges[(edges >= a - tol) & (edges <= b + tol)][0]
        raise ChannelError(f"[{a}, {b}] touches the band edge {e}")
    perm, l_e = channel_order(model, a, tol)
    p2, le2 = channel_order(model, b, tol)
    if le2 != l_e or not np.array_equal(p2, perm):
        raise ChannelError(f"channel types change inside [{a}, {b}]")
    l_h = model.l - l_e

    n_lambda = n_lambda or 1001
    n_lambda = max(n_lambda, 1001)
    lam = np.linspace(a, b, n_lambda)
    edge_dist = float(np.min(np.abs(edges[:, None] - lam[None, :])))
    c = height if height is not None else min(0.25, 0.5 * edge_dist)

    step = (b - a) / (n_lambda - 1)

    def rect(c):
        # log|gamma| and Im k are harmonic and |Q|, |Qinv| subharmonic on the
        # rectangle, so their extremes sit on its boundary
        # odd count keeps the real axis, where |Qinv| tends to peak
        eta = np.linspace(-c, c, 2 * int(math.ceil(c / step)) + 1)
        return np.concatenate([lam - 1j * c, lam + 1j * c, a + 1j * eta, b + 1j * eta])

    for _ in range(60):
        zs = rect(c)
        w = model.alpha[perm] - zs[:, None]
        im_k = np.abs(elliptic_momenta(w[:, :l_e]).imag)
        emax = float(im_k.max())
        if l_h:
            gmin = float(np.abs(hyperbolic_multipliers(w[:, l_e:])).min())
            gap = 0.5 * math.log(gmin) / (1 + 1 / 200)
        else:
            gap = float(elliptic_gap)
        if gap > 0 and emax <= gap * (1 - 1 / 100):
            break
        if height is not None:
            raise ChannelError(f"no positive gap with height {height} on [{a}, {b}]")
        c /= 2
    else:
        raise ChannelError(f"no positive gap found on [{a}, {b}]")

    zs = rect(c)
    w = model.alpha[perm] - zs[:, None]
    CQ = 1.01 * _conjugation_norm(elliptic_momenta(w[:, :l_e]), hyperbolic_multipliers(w[:, l_e:]))
    return GapEstimate(a=float(a), b=float(b), gap=gap, height=c, CQ=CQ, l_e=l_e, l_h=l_h, perm=perm)
