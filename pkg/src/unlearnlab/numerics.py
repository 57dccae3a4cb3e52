"""Dense linear algebra and stable probability kernels.

Matrices are plain 2-D numpy arrays. Everything here is a pure function of
its inputs. Reductions are carried out in float64 regardless of the storage
dtype of the arguments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SVD_TOL = 1e-12
SVD_MAX_SWEEPS = 100


class ShapeError(ValueError):
    """Raised when array shapes do not conform."""


class NumericalError(ArithmeticError):
    """Raised on non-finite values or failed iterative convergence."""


def as_matrix(data, dtype=np.float64) -> np.ndarray:
    """Validate and return ``data`` as a finite 2-D array."""
    m = np.asarray(data, dtype=dtype)
    if m.ndim != 2 or 0 in m.shape:
        raise ShapeError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericalError("matrix contains non-finite entries")
    return m


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``m = u @ diag(s) @ vt`` with ``s`` sorted descending."""

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray

    @property
    def rank(self) -> int:
        return len(self.s)

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.vt


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out_dtype = np.result_type(a, b)
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(out_dtype, copy=False)


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # Tournament schedule: each round is a set of disjoint column pairs and
    # every pair appears exactly once per sweep.
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        if pairs:
            rounds.append((np.array([p for p, _ in pairs]), np.array([q for _, q in pairs])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _complete_basis(u: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace columns of ``u`` not flagged in ``keep`` by an orthonormal completion."""
    if keep.all():
        return u
    d = u.shape[0]
    basis = [u[:, j] for j in np.flatnonzero(keep)]
    out = u.copy()
    candidates = iter(np.eye(d))
    for j in np.flatnonzero(~keep):
        for e in candidates:
            v = e.copy()
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            nrm = np.linalg.norm(v)
            if nrm > 1e-6:
                v /= nrm
                basis.append(v)
                out[:, j] = v
                break
    return out


def _jacobi_tall(m: np.ndarray, tol: float, max_sweeps: int):
    d, k = m.shape
    g = m.copy()
    v = np.eye(k)
    rounds = _round_robin(k)
    # Columns that shrink to rounding noise carry no direction; skip them.
    negligible = (np.finfo(np.float64).eps * np.linalg.norm(m)) ** 2
    for sweep in range(1, max_sweeps + 1):
        off = 0.0
        for p, q in rounds:
            gp, gq = g[:, p], g[:, q]
            alpha = np.einsum("ij,ij->j", gp, gp)
            beta = np.einsum("ij,ij->j", gq, gq)
            gamma = np.einsum("ij,ij->j", gp, gq)
            scale = np.sqrt(alpha * beta)
            with np.errstate(divide="ignore", invalid="ignore"):
                rel = np.where(np.minimum(alpha, beta) > negligible, np.abs(gamma) / scale, 0.0)
            off = max(off, float(rel.max(initial=0.0)))
            active = rel > tol
            if not active.any():
                continue
            gam = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * gam)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t = np.where(zeta == 0, 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)
            g[:, p], g[:, q] = c * gp - s * gq, s * gp + c * gq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if off <= tol:
            break
    else:
        raise NumericalError(f"SVD did not converge after {max_sweeps} sweeps (off-diagonal {off:.3e})")

    sv = np.linalg.norm(g, axis=0)
    order = np.argsort(-sv, kind="stable")
    sv, g, v = sv[order], g[:, order], v[:, order]
    keep = sv > sv[0] * 1e-14 * max(d, k) if sv[0] > 0 else np.zeros(k, dtype=bool)
    u = np.zeros((d, k))
    u[:, keep] = g[:, keep] / sv[keep]
    u = _complete_basis(u, keep)
    sv = np.where(keep, sv, 0.0)
    return u, sv, v.T


def svd(m, tol: float = SVD_TOL, max_sweeps: int = SVD_MAX_SWEEPS) -> SvdFactors:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Columns are orthogonalised in round-robin order, one vectorised batch of
    disjoint pairs at a time, until every normalised column inner product is
    below ``tol``. Singular vectors are sign-fixed so that the largest
    magnitude entry of each ``u`` column is positive.
    """
    m = as_matrix(m).astype(np.float64)
    d, k = m.shape
    tall = m if d >= k else m.T
    if tall.shape[0] > tall.shape[1]:
        # QR first so rotations act on a small square factor.
        q, rfac = np.linalg.qr(tall)
        ur, s, vt_ = _jacobi_tall(rfac, tol, max_sweeps)
        ut_ = q @ ur
    else:
        ut_, s, vt_ = _jacobi_tall(tall, tol, max_sweeps)
    if d >= k:
        u, vt = ut_, vt_
    else:
        u, vt = vt_.T, ut_.T
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return SvdFactors(u * signs, s, vt * signs[:, None])


def truncate(f: SvdFactors, r: int) -> SvdFactors:
    if not 1 <= r <= f.rank:
        raise ShapeError(f"rank {r} outside [1, {f.rank}]")
    return SvdFactors(f.u[:, :r], f.s[:r], f.vt[:r])


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericalError("logits contain non-finite entries")


def softmax_row(logits) -> np.ndarray:
    """Softmax along the last axis with max subtraction."""
    y = np.asarray(logits, dtype=np.float64)
    _check_finite(y)
    z = np.exp(y - y.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def log_softmax_row(logits) -> np.ndarray:
    y = np.asarray(logits, dtype=np.float64)
    _check_finite(y)
    shifted = y - y.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def row_sums(m) -> np.ndarray:
    return np.asarray(m, dtype=np.float64).sum(axis=1)
