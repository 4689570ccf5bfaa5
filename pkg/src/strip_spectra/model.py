"""Random block-Jacobi operators on the half-strip.

The operator acts on sequences ``Psi_n in C^l`` (``n >= 0``, ``Psi_{-1} = 0``) as

    (H Psi)_n = -Psi_{n-1} - Psi_{n+1} + A Psi_n + V_n Psi_n

with a fixed Hermitian ``A`` and independent random Hermitian ``V_n``.  ``A`` is
always stored in its eigenbasis; sampled potentials are expressed in the same
basis.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

HERMITIAN_TOL = 1e-12

POTENTIAL_KINDS = ("zero", "diagonal-iid", "hermitian-gaussian", "user-matrix-sequence")


class SummabilityWarning(UserWarning):
    """Potential decay too slow for sum(|E V_n| + E|V_n|^2) to converge."""


def _as_hermitian(M, name: str, tol: float = HERMITIAN_TOL) -> np.ndarray:
    M = np.asarray(M, dtype=complex)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {M.shape}")
    asym = float(np.linalg.norm(M - M.conj().T, 2)) if M.size else 0.0
    if asym > tol:
        raise ValueError(f"{name} is not Hermitian: |{name} - {name}*| = {asym:.3e}")
    return M


@dataclass(frozen=True)
class PotentialSpec:
    """Distribution of the random potential.

    Site ``n`` carries ``V_n = a_n G_n + b_n M`` where ``a_n = sigma (n+1)^-p``,
    ``G_n`` is a normalised random Hermitian matrix of the chosen ``kind`` and
    ``b_n = (n+1)^-mean_power`` scales the optional deterministic ``mean_shift``.

    ``diagonal-iid`` draws ``G_n = diag(g_1..g_l)`` with ``g_j`` uniform on
    ``[-1, 1]`` (``dist="uniform"``) or standard normal (``dist="gaussian"``).
    ``hermitian-gaussian`` draws ``G_n = (X + X*)/2`` with ``X`` having iid
    standard complex normal entries.  ``user-matrix-sequence`` uses
    ``matrices`` verbatim (sites past the end are zero) and ignores ``sigma``.
    """

    kind: str = "zero"
    sigma: float = 0.0
    p: float = 1.0
    dist: str = "uniform"
    mean_shift: np.ndarray | None = None
    mean_power: float = 2.0
    matrices: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in POTENTIAL_KINDS:
            raise ValueError(f"unknown potential kind {self.kind!r}; expected one of {POTENTIAL_KINDS}")
        if self.dist not in ("uniform", "gaussian"):
            raise ValueError(f"unknown dist {self.dist!r}")
        if not (math.isfinite(self.sigma) and self.sigma >= 0):
            raise ValueError("sigma must be finite and >= 0")
        if self.mean_shift is not None:
            object.__setattr__(self, "mean_shift", _as_hermitian(self.mean_shift, "mean_shift"))
        if self.kind == "user-matrix-sequence":
            if self.matrices is None:
                raise ValueError("user-matrix-sequence requires matrices")
            mats = np.asarray(self.matrices, dtype=complex)
            if mats.ndim != 3 or mats.shape[1] != mats.shape[2]:
                raise ValueError("matrices must have shape (N, l, l)")
            for k, M in enumerate(mats):
                _as_hermitian(M, f"matrices[{k}]")
            object.__setattr__(self, "matrices", mats)

    def scale(self, n) -> np.ndarray | float:
        """Per-site scale ``a_n = sigma (n+1)^-p``."""
        return self.sigma * (np.asarray(n, dtype=float) + 1.0) ** (-self.p)

    def mean_scale(self, n) -> np.ndarray | float:
        return (np.asarray(n, dtype=float) + 1.0) ** (-self.mean_power)

    def is_summable(self) -> bool:
        """Symbolic check of sum_n (|E V_n| + E|V_n|^2) < inf for the built-in rules."""
        ok = True
        if self.kind in ("diagonal-iid", "hermitian-gaussian") and self.sigma > 0:
            ok &= 2 * self.p > 1
        if self.mean_shift is not None and np.any(self.mean_shift):
            ok &= self.mean_power > 1
        return bool(ok)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "sigma": self.sigma, "p": self.p}
        if self.kind == "diagonal-iid":
            d["dist"] = self.dist
        if self.mean_shift is not None:
            d["mean_shift"] = _matrix_to_json(self.mean_shift)
            d["mean_power"] = self.mean_power
        if self.matrices is not None:
            d["matrices"] = [_matrix_to_json(M) for M in self.matrices]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "PotentialSpec":
        kw = {k: d[k] for k in ("kind", "sigma", "p", "dist", "mean_power") if k in d}
        if "mean_shift" in d:
            kw["mean_shift"] = _matrix_from_json(d["mean_shift"])
        if "matrices" in d:
            kw["matrices"] = np.array([_matrix_from_json(M) for M in d["matrices"]])
        return cls(**kw)


@dataclass(frozen=True)
class OperatorModel:
    """Strip operator of width ``l`` with ``A = diag(alpha)`` in the model basis.

    ``U`` maps model coordinates to the coordinates ``A`` was given in:
    ``U* A_orig U = diag(alpha)``.
    """

    l: int
    alpha: np.ndarray
    potential: PotentialSpec = field(default_factory=PotentialSpec)
    U: np.ndarray | None = None

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float).reshape(-1)
        if self.l < 1 or alpha.shape != (self.l,):
            raise ValueError(f"alpha must have length l={self.l}")
        if not np.all(np.isfinite(alpha)):
            raise ValueError("alpha entries must be finite")
        object.__setattr__(self, "alpha", alpha)
        if self.potential.matrices is not None and self.potential.matrices.shape[1] != self.l:
            raise ValueError("user matrices do not match the strip width")

    @property
    def A(self) -> np.ndarray:
        return np.diag(self.alpha).astype(complex)

    def to_dict(self, seed: int | None = None) -> dict:
        d = {"l": self.l, "alpha": [float(a) for a in self.alpha], "potential": self.potential.to_dict()}
        if self.U is not None:
            d["U"] = _matrix_to_json(self.U)
        if seed is not None:
            d["seed"] = int(seed)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "OperatorModel":
        """Build from the JSON document form; accepts ``alpha`` or a full ``A``."""
        potential = PotentialSpec.from_dict(d.get("potential", {"kind": "zero"}))
        if "A" in d:
            return build_model(_matrix_from_json(d["A"]), potential)
        alpha = np.asarray(d["alpha"], dtype=float)
        U = _matrix_from_json(d["U"]) if "U" in d else None
        l = int(d.get("l", alpha.size))
        return cls(l=l, alpha=alpha, potential=potential, U=U)


@dataclass(frozen=True)
class PotentialSample:
    """One realisation ``V_0 .. V_{N-1}`` in the model basis."""

    matrices: np.ndarray
    seed: int
    N: int

    def __post_init__(self):
        mats = np.asarray(self.matrices, dtype=complex)
        if mats.ndim != 3 or mats.shape[0] != self.N:
            raise ValueError("matrices must have shape (N, l, l)")
        object.__setattr__(self, "matrices", mats)

    @property
    def l(self) -> int:
        return self.matrices.shape[1]

    def norms(self) -> np.ndarray:
        """Operator 2-norm of every site."""
        return np.linalg.norm(self.matrices, ord=2, axis=(-2, -1))

    def to_csv(self) -> str:
        """One row per site, ``re``/``im`` interleaved in row-major entry order."""
        l = self.l
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["n"]
        for i in range(l):
            for j in range(l):
                header += [f"re_{i}_{j}", f"im_{i}_{j}"]
        w.writerow(header)
        for n, M in enumerate(self.matrices):
            row = [n]
            for v in M.reshape(-1):
                row += [repr(float(v.real)), repr(float(v.imag))]
            w.writerow(row)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, seed: int = 0) -> "PotentialSample":
        rows = list(csv.reader(io.StringIO(text)))
        body = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
        l = math.isqrt(body.shape[1] // 2)
        mats = (body[:, 0::2] + 1j * body[:, 1::2]).reshape(-1, l, l)
        return cls(matrices=mats, seed=seed, N=mats.shape[0])


def build_model(A, potential: PotentialSpec | None = None) -> OperatorModel:
    """Diagonalise ``A`` and attach the potential spec.

    Eigenvalues are sorted ascending, ties broken by original index.  For an
    already diagonal ``A`` the stored ``U`` is the sorting permutation (or
    ``None`` when no reordering is needed), so no rounding is introduced.
    """
    A = _as_hermitian(A, "A")
    potential = potential or PotentialSpec()
    l = A.shape[0]
    if not np.any(A - np.diag(np.diag(A))):
        d = np.diag(A).real
        order = np.argsort(d, kind="stable")
        U = None if np.array_equal(order, np.arange(l)) else np.eye(l, dtype=complex)[:, order]
        alpha = d[order]
    else:
        w, vecs = np.linalg.eigh(A)
        # eigh returns ascending eigenvalues; degenerate ones stay in LAPACK order
        alpha, U = w, vecs
    model = OperatorModel(l=l, alpha=alpha, potential=potential, U=U)
    if not potential.is_summable():
        warnings.warn(
            f"potential decay (p={potential.p}, mean_power={potential.mean_power}) violates the summability condition",
            SummabilityWarning,
            stacklevel=2,
        )
    return model


def site_rng(seed: int, n: int) -> np.random.Generator:
    """Independent stream for site ``n`` keyed by ``(seed, n)``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(n),)))


def _draw_unit(spec: PotentialSpec, l: int, rng: np.random.Generator) -> np.ndarray:
    if spec.kind == "diagonal-iid":
        if spec.dist == "uniform":
            g = rng.uniform(-1.0, 1.0, size=l)
        else:
            g = rng.standard_normal(l)
        return np.diag(g).astype(complex)
    # hermitian-gaussian
    X = (rng.standard_normal((l, l)) + 1j * rng.standard_normal((l, l))) / math.sqrt(2.0)
    return (X + X.conj().T) / 2


def sample_potential(model: OperatorModel, N: int, seed: int) -> PotentialSample:
    """Draw ``V_0 .. V_{N-1}``; site ``n`` depends only on ``(spec, seed, n)``."""
    if N < 1:
        raise ValueError("N must be >= 1")
    spec, l = model.potential, model.l
    mats = np.zeros((N, l, l), dtype=complex)
    if spec.kind == "user-matrix-sequence":
        k = min(N, spec.matrices.shape[0])
        mats[:k] = spec.matrices[:k]
    elif spec.kind != "zero" and spec.sigma > 0:
        scales = spec.scale(np.arange(N))
        for n in range(N):
            mats[n] = scales[n] * _draw_unit(spec, l, site_rng(seed, n))
    if spec.mean_shift is not None:
        mats += spec.mean_scale(np.arange(N))[:, None, None] * spec.mean_shift
    if model.U is not None and spec.kind != "user-matrix-sequence":
        mats = model.U.conj().T @ mats @ model.U
    # exact symmetry, independent of rounding in the conjugation
    mats = (mats + np.conj(np.swapaxes(mats, -1, -2))) / 2
    return PotentialSample(matrices=mats, seed=int(seed), N=N)


def restrict(model: OperatorModel, sample: PotentialSample, m: int, n: int) -> np.ndarray:
    """Dense ``H_{m,n}``: diagonal blocks ``A + V_k``, off-diagonal blocks ``-I``."""
    if not (0 <= m <= n < sample.N):
        raise IndexError(f"need 0 <= m <= n < {sample.N}, got m={m}, n={n}")
    l = model.l
    size = n - m + 1
    H = np.zeros((size * l, size * l), dtype=complex)
    A = model.A
    for i, k in enumerate(range(m, n + 1)):
        H[i * l:(i + 1) * l, i * l:(i + 1) * l] = A + sample.matrices[k]
    if size > 1:
        idx = np.arange((size - 1) * l)
        H[idx, idx + l] = -1.0
        H[idx + l, idx] = -1.0
    return H


def fold_full_line(A_full, potentials) -> tuple[OperatorModel, PotentialSample]:
    """Fold a full-line operator onto the half-strip of width ``2l``.

    ``potentials`` is either a mapping ``{n: V_n}`` over ``n = -N-1 .. N`` or a
    sequence ordered the same way.  Site ``n >= 1`` of the result carries
    ``diag(V_n, V_{-n-1})``; site 0 carries ``[[V_0, -I], [-I, V_{-1}]]``.
    The returned model's ``U`` maps model coordinates back to
    (upper sheet, lower sheet) coordinates.
    """
    A_full = _as_hermitian(A_full, "A_full")
    l = A_full.shape[0]
    if isinstance(potentials, Mapping):
        keys = sorted(potentials)
        if not keys:
            raise ValueError("empty potential window")
        N = keys[-1]
        if keys != list(range(-N - 1, N + 1)):
            raise ValueError(f"potential window {keys[0]}..{keys[-1]} is not symmetric (-N-1..N)")
        seq = [potentials[k] for k in keys]
    else:
        seq = list(potentials)
        if len(seq) == 0 or len(seq) % 2:
            raise ValueError(f"potential window of length {len(seq)} is not symmetric (-N-1..N)")
        N = len(seq) // 2 - 1
    V = np.array([_as_hermitian(M, "potential") for M in seq]).reshape(2 * N + 2, l, l)
    off = N + 1  # V[off + n] is the potential at full-line site n

    d, U1 = np.linalg.eigh(A_full)
    if not np.any(A_full - np.diag(np.diag(A_full))):
        d, U1 = np.diag(A_full).real.copy(), np.eye(l, dtype=complex)
    V = U1.conj().T @ V @ U1

    folded = np.zeros((N + 1, 2 * l, 2 * l), dtype=complex)
    for n in range(N + 1):
        folded[n, :l, :l] = V[off + n]
        folded[n, l:, l:] = V[off - n - 1]
    folded[0, :l, l:] = -np.eye(l)
    folded[0, l:, :l] = -np.eye(l)

    alpha2 = np.concatenate([d, d])
    order = np.argsort(alpha2, kind="stable")
    P = np.eye(2 * l, dtype=complex)[:, order]
    folded = P.T @ folded @ P + 0.0  # + 0.0 clears signed zeros from the permutation products
    U = np.kron(np.eye(2), U1) @ P
    spec = PotentialSpec(kind="user-matrix-sequence", matrices=folded)
    model = OperatorModel(l=2 * l, alpha=alpha2[order], potential=spec, U=U)
    return model, PotentialSample(matrices=folded, seed=0, N=N + 1)


def _matrix_to_json(M) -> list:
    M = np.asarray(M)
    if not np.iscomplexobj(M) or not np.any(M.imag):
        return [[float(v) for v in row] for row in M.real]
    return [[[float(v.real), float(v.imag)] for v in row] for row in M]


def _matrix_from_json(rows: Sequence) -> np.ndarray:
    arr = np.asarray(rows, dtype=float)
    if arr.ndim == 3:
        return arr[..., 0] + 1j * arr[..., 1]
    return arr.astype(complex)
