"""Dense kernels: matrix volume, maxvol row selection, sketched solves, SVD.

Matrices are plain 2-D ``numpy.float64`` arrays in row-major order; an index
list stands in for any 0/1 row-selection operator, so applying a selection is
a gather costing O(P).  All routines are pure functions of their inputs (plus
an explicit seed where randomness-like hashing is involved) and are safe to
call concurrently on read-only data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import get_lapack_funcs, solve_triangular

from .errors import NumericalError, ShapeError

# Absolute pivot threshold below which an LU factor is declared rank deficient.
PIVOT_TOL = 1e-12

__all__ = [
    "RowSelection",
    "SvdResult",
    "SketchAccumulator",
    "volume",
    "square_maxvol",
    "rect_maxvol",
    "sketched_pinv",
    "maxvol_bound",
    "sketch_width",
    "truncated_svd",
]


def _as_matrix(a, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={a.ndim}")
    if a.size and not np.all(np.isfinite(a)):
        raise ShapeError(f"{name} contains non-finite entries")
    return a


@dataclass(frozen=True)
class RowSelection:
    """Ordered list of distinct row indices into a ``source_rows``-row matrix."""

    indices: np.ndarray
    source_rows: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).ravel()
        object.__setattr__(self, "indices", idx)
        if idx.size == 0:
            raise ShapeError("selection must contain at least one row")
        if idx.min() < 0 or idx.max() >= self.source_rows:
            raise ShapeError(
                f"selection indices out of range [0, {self.source_rows})"
            )
        if np.unique(idx).size != idx.size:
            raise ShapeError("selection indices must be distinct")

    @property
    def p(self) -> int:
        return int(self.indices.size)


@dataclass(frozen=True)
class SvdResult:
    """Truncated SVD factors: ``u`` D×R with orthonormal columns, ``sigma``
    non-increasing, optional ``vt`` R×N."""

    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray | None = None

    @property
    def rank(self) -> int:
        return int(self.sigma.size)


def volume(a) -> float:
    """Volume of a tall matrix, det(AᵀA).

    Non-negative for every real matrix with rows >= cols; invariant under
    row permutation.
    """
    a = _as_matrix(a)
    rows, cols = a.shape
    if rows < cols:
        raise ShapeError(f"volume needs rows >= cols, got {rows}x{cols}")
    det = float(np.linalg.det(a.T @ a))
    # det of a Gram matrix is >= 0; clamp the numerical noise.
    return max(det, 0.0)


def maxvol_bound(dim: int, rank: int, rows: int) -> float:
    """Spectral-norm bound coefficient sqrt(1 + (D-P)R / (P+1-R)).

    Upper bound on ||A (SA)^+||_2 for a P-row dominant selection from a
    D x R matrix.  Equals 1 when P = D and is non-increasing in P.
    """
    if not rank <= rows <= dim:
        raise ShapeError(
            f"need rank <= rows <= dim, got rank={rank} rows={rows} dim={dim}"
        )
    return float(np.sqrt(1.0 + (dim - rows) * rank / (rows + 1.0 - rank)))


def _lu_row_pivots(a: np.ndarray) -> np.ndarray:
    """Row indices chosen by partially pivoted Gaussian elimination on ``a``."""
    rows, cols = a.shape
    getrf = get_lapack_funcs("getrf", (a,))
    lu, piv, info = getrf(a, overwrite_a=False)
    if info < 0:
        raise NumericalError(f"LU factorization failed (illegal argument {-info})")
    diag = np.abs(np.diagonal(lu))[:cols]
    if info > 0 or diag.min() < PIVOT_TOL:
        raise NumericalError(
            "matrix is rank deficient: no non-singular "
            f"{cols}x{cols} row subset found (pivot below {PIVOT_TOL:g})"
        )
    index = np.arange(rows, dtype=np.int64)
    for i, p in enumerate(piv[:cols]):
        index[i], index[p] = index[p], index[i]
    return index[:cols]


def _square_maxvol(a: np.ndarray, tol: float, max_iters: int):
    """Dominant square submatrix search; returns (indices, coefficients).

    ``coefficients`` is the D x R matrix A Ahat^-1; at exit its entries have
    magnitude <= tol unless the sweep cap was reached.
    """
    rows, cols = a.shape
    index = _lu_row_pivots(a)
    try:
        coef = np.linalg.solve(a[index].T, a.T).T
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"initial submatrix is singular: {exc}") from exc
    # Swap sweep: while some |coef[i, j]| > tol, moving row i into slot j
    # multiplies |det| by |coef[i, j]| > 1, so the loop terminates.
    for _ in range(max_iters):
        flat = int(np.argmax(np.abs(coef)))
        i, j = divmod(flat, cols)
        pivot = coef[i, j]
        if abs(pivot) <= tol:
            break
        index[j] = i
        update_row = coef[i].copy()
        update_row[j] -= 1.0
        coef -= np.outer(coef[:, j], update_row) / pivot
    return index, coef


def square_maxvol(a, tol: float = 1.05, max_iters: int = 200) -> RowSelection:
    """Select R rows of a D x R matrix forming a dominant square submatrix.

    Initializes with partially pivoted Gaussian elimination, then runs the
    classical swap sweep until every entry of A Ahat^-1 has magnitude at
    most ``tol`` (or ``max_iters`` sweeps have run).

    Parameters
    ----------
    a : array_like, shape (D, R)
        Tall matrix of full column rank, D >= R.
    tol : float
        Dominance threshold for entries of the coefficient matrix; values
        below 1 are clamped to 1.
    max_iters : int
        Cap on row swaps.

    Returns
    -------
    RowSelection with exactly R distinct indices.
    """
    a = _as_matrix(a)
    rows, cols = a.shape
    if rows < cols:
        raise ShapeError(f"square_maxvol needs rows >= cols, got {rows}x{cols}")
    tol = max(float(tol), 1.0)
    index, _ = _square_maxvol(a, tol, max_iters)
    return RowSelection(index, rows)


def rect_maxvol(
    a,
    rows: int,
    tol: float = 0.0,
    *,
    square_tol: float = 1.05,
    square_iters: int = 200,
) -> RowSelection:
    """Greedy rectangular maximum-volume selection of ``rows`` rows.

    Starts from the square maxvol selection and grows it one row at a time,
    always adding the row whose coefficient row in A (SA)^+ has the largest
    Euclidean norm; each addition multiplies det((SA)ᵀ(SA)) by
    (1 + ||coef row||^2) >= 1.  Rank-1 updates keep the cost low.

    Parameters
    ----------
    a : array_like, shape (D, R)
        Tall matrix of full column rank.
    rows : int
        Number of rows P to select, R <= P <= D.
    tol : float
        Optional early-stop threshold: when positive, growth stops as soon
        as the largest coefficient-row norm drops to ``tol`` or below.  The
        default 0.0 always returns exactly ``rows`` rows.

    Returns
    -------
    RowSelection whose selection satisfies
    ||A (SA)^+||_2 <= sqrt(1 + (D-P) R / (P+1-R)).
    """
    a = _as_matrix(a)
    d, r = a.shape
    rows = int(rows)
    if d < r:
        raise ShapeError(f"rect_maxvol needs rows >= cols, got {d}x{r}")
    if not r <= rows <= d:
        raise ShapeError(f"need R <= P <= D, got R={r} P={rows} D={d}")

    index_sq, coef = _square_maxvol(a, max(float(square_tol), 1.0), square_iters)
    selected = list(index_sq)
    chosen = np.zeros(d, dtype=bool)
    chosen[index_sq] = True

    norm_sqr = np.einsum("ij,ij->i", coef, coef)
    norm_sqr[chosen] = 0.0
    tol_sqr = float(tol) * float(tol)

    while len(selected) < rows:
        i = int(np.argmax(norm_sqr))
        if chosen[i]:
            # Every remaining coefficient row is exactly zero (the unselected
            # rows vanish); any distinct row keeps (SA) full rank, so take the
            # lowest unchosen index.
            i = int(np.flatnonzero(~chosen)[0])
        if tol > 0.0 and norm_sqr[i] <= tol_sqr:
            break
        # Append row i to the selection; update coefficients by the
        # bordered pseudo-inverse formula.
        c = coef[i].copy()
        v = coef @ c
        scale = 1.0 / (1.0 + v[i])
        coef -= scale * np.outer(v, c)
        coef = np.hstack([coef, (scale * v)[:, None]])
        norm_sqr -= scale * v * v
        selected.append(i)
        chosen[i] = True
        norm_sqr[chosen] = 0.0

    return RowSelection(np.array(selected, dtype=np.int64), d)


def sketched_pinv(a, selection: RowSelection) -> np.ndarray:
    """Pseudo-inverse (SA)^+ of the selected row block, via QR.

    Returns an R x P matrix such that ``sketched_pinv(a, sel) @ a[sel.indices]``
    is the identity (to machine precision) whenever the selected block has
    full column rank.
    """
    a = _as_matrix(a)
    d, r = a.shape
    if selection.source_rows != d:
        raise ShapeError(
            f"selection targets {selection.source_rows} rows, matrix has {d}"
        )
    if selection.p < r:
        raise ShapeError(f"selection has {selection.p} rows, need at least {r}")
    sub = a[selection.indices]
    q, rr = np.linalg.qr(sub)
    diag = np.abs(np.diagonal(rr))
    if diag.min() <= PIVOT_TOL * max(diag.max(), 1.0):
        raise NumericalError(
            "selected submatrix is numerically rank deficient; "
            "cannot form its pseudo-inverse"
        )
    return solve_triangular(rr, q.T, lower=False)


# -- count-sketch accumulation ------------------------------------------------

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def _mix64_np(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer applied elementwise to a uint64 array."""
    with np.errstate(over="ignore"):
        x = x.copy()
        x ^= x >> np.uint64(30)
        x *= np.uint64(0xBF58476D1CE4E5B9)
        x ^= x >> np.uint64(27)
        x *= np.uint64(0x94D049BB133111EB)
        x ^= x >> np.uint64(31)
    return x


def _counter_draws(seed: int, start: int, count: int, width: int):
    """Bucket indices and ±1 signs for insertion counters start..start+count."""
    counters = np.arange(start, start + count, dtype=np.uint64)
    with np.errstate(over="ignore"):
        base = np.uint64(seed & _MASK64)
        zb = _mix64_np(base + (np.uint64(2) * counters + np.uint64(1)) * np.uint64(_GAMMA))
        zs = _mix64_np(base + (np.uint64(2) * counters + np.uint64(2)) * np.uint64(_GAMMA))
    buckets = (zb % np.uint64(width)).astype(np.int64)
    signs = np.where(zs & np.uint64(1), 1.0, -1.0)
    return buckets, signs


def sketch_width(rank: int) -> int:
    """Default count-sketch width for a target rank: max(4R + 10, 2R)."""
    rank = int(rank)
    if rank < 1:
        raise ShapeError(f"rank must be positive, got {rank}")
    return max(4 * rank + 10, 2 * rank)


class SketchAccumulator:
    """Streaming count-sketch buffer for a D x N matrix fed column by column.

    Each inserted column is added to one of ``width`` buckets with a ±1 sign;
    bucket and sign are a seeded 64-bit mix of the insertion counter, so the
    buffer is deterministic for a fixed seed and insertion order.  Accumulators
    built with the same seed and disjoint counter ranges (``start``) can be
    merged by bucket addition, which lets callers sketch shards in parallel.
    """

    def __init__(self, dim: int, width: int, seed: int = 0, start: int = 0):
        if dim < 1 or width < 1:
            raise ShapeError(f"invalid sketch dims: dim={dim} width={width}")
        self.dim = int(dim)
        self.width = int(width)
        self.seed = int(seed)
        self.samples_seen = int(start)
        self.buckets = np.zeros((self.dim, self.width), dtype=np.float64)

    def insert(self, column) -> "SketchAccumulator":
        """Add one column to its hashed bucket; returns self."""
        column = np.asarray(column, dtype=np.float64).ravel()
        if column.size != self.dim:
            raise ShapeError(
                f"column has length {column.size}, accumulator expects {self.dim}"
            )
        if not np.all(np.isfinite(column)):
            raise ShapeError("inserted column contains non-finite entries")
        h, s = _counter_draws(self.seed, self.samples_seen, 1, self.width)
        self.buckets[:, h[0]] += s[0] * column
        self.samples_seen += 1
        return self

    def insert_rows(self, rows) -> "SketchAccumulator":
        """Insert each row of an N x D array; bit-identical to N single inserts."""
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != self.dim:
            raise ShapeError(
                f"expected (n, {self.dim}) rows, got {rows.shape}"
            )
        if rows.size and not np.all(np.isfinite(rows)):
            raise ShapeError("inserted rows contain non-finite entries")
        n = rows.shape[0]
        if n == 0:
            return self
        h, s = _counter_draws(self.seed, self.samples_seen, n, self.width)
        # np.add.at applies updates in index order, matching sequential inserts.
        np.add.at(self.buckets.T, h, rows * s[:, None])
        self.samples_seen += n
        return self

    def merge(self, other: "SketchAccumulator") -> "SketchAccumulator":
        """Fold another accumulator (same seed/shape) into this one."""
        if (other.dim, other.width, other.seed) != (self.dim, self.width, self.seed):
            raise ShapeError("cannot merge accumulators with different dim/width/seed")
        self.buckets += other.buckets
        self.samples_seen = max(self.samples_seen, other.samples_seen)
        return self


def truncated_svd(m, rank: int, compute_vt: bool = True) -> SvdResult:
    """Rank-R truncation of the SVD of a dense D x N matrix.

    The residual ||M - U diag(sigma) Vt||_F equals the optimal rank-R
    residual; U has orthonormal columns and sigma is non-increasing.
    """
    m = _as_matrix(m)
    d, n = m.shape
    rank = int(rank)
    if not 1 <= rank <= min(d, n):
        raise ShapeError(
            f"rank must satisfy 1 <= R <= min(D, N)={min(d, n)}, got {rank}"
        )
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError:
        # Divide-and-conquer (gesdd) occasionally fails where plain QR
        # iteration (gesvd) converges; retry before giving up.
        try:
            import scipy.linalg as sla

            u, s, vt = sla.svd(m, full_matrices=False, lapack_driver="gesvd")
        except Exception as exc:  # pragma: no cover - depends on LAPACK state
            raise NumericalError(
                f"SVD failed to converge on a {d}x{n} matrix "
                f"(gesdd and gesvd drivers): {exc}"
            ) from exc
    return SvdResult(
        u=np.ascontiguousarray(u[:, :rank]),
        sigma=s[:rank].copy(),
        vt=np.ascontiguousarray(vt[:rank]) if compute_vt else None,
    )
