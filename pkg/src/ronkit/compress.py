"""Student-network construction: bases, row selection, weights, error bounds.

A compression plan names a contiguous suffix of the teacher's affine layers.
Each of those layers is lowered to a dense stage (convolutions become explicit
matrices, batch norms fold into the affine part), a low-rank basis of its
output activations is computed, representative output coordinates are chosen
by rectangular maxvol, and the student weights are assembled as

    first stage   S_1 W_1                      (rows of the lowered weight)
    middle stage  S_k W_k V_{k-1} (S_{k-1} V_{k-1})^+
    lifting map   V_K (S_K V_K)^+

with biases carried through by the same row gathers.  Max-pool stages gather
four pre-pool rows per retained unit and reduce them after the activation.
Only two consecutive bases are ever held in memory.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import FormatError, NumericalError, PlanError, ShapeError
from .linalg import (
    RowSelection,
    SketchAccumulator,
    maxvol_bound,
    rect_maxvol,
    sketch_width,
    sketched_pinv,
    truncated_svd,
)
from .network import (
    DEFAULT_LOWERING_CAP,
    Activation,
    ActivationKind,
    BatchNorm,
    Conv2d,
    Dense,
    MaxPool,
    Residual,
    StudentNetwork,
    StudentStage,
    TeacherNetwork,
    conv_to_dense,
    flat_size,
    fold_batchnorm,
    forward_teacher,
)

# Materialize the activation matrix exactly below this many entries; sketch above.
DEFAULT_MEMORY_CAP = 2**24
DEFAULT_CALIBRATION_LIMIT = 2048
DEFAULT_HOLDOUT_FRACTION = 0.1

# Relative singular-value threshold below which directions do not count
# toward the numerical rank.
RANK_FLOOR = 1e-12

STRATEGIES = ("fixed", "fraction", "energy")

__all__ = [
    "PlanEntry",
    "CompressionPlan",
    "LayerCompression",
    "LayerErrorStats",
    "ErrorReport",
    "ResidualStage",
    "RankWarning",
    "eligible_layers",
    "layer_seed",
    "make_uniform_plan",
    "load_plan",
    "save_plan",
    "collect_basis",
    "select_rows",
    "expand_pooled_selection",
    "compress_residual",
    "error_bound",
    "build_student",
]


class RankWarning(UserWarning):
    """Requested rank exceeded the numerical rank of the activations."""


def layer_seed(seed: int, layer: int) -> int:
    """Per-layer sketch seed derived from the plan seed; stable and documented."""
    mask = (1 << 64) - 1
    x = (int(seed) ^ ((int(layer) + 1) * 0x9E3779B97F4A7C15)) & mask
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & mask
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & mask
    return (x ^ (x >> 31)) & mask


# -- plans ---------------------------------------------------------------------


@dataclass(frozen=True)
class PlanEntry:
    """Per-layer compression request.

    ``layer`` indexes the affine layer in the teacher's layer list.
    ``strategy`` is one of fixed (value = rank), fraction (rank = ceil of
    value * output dim) or energy (smallest rank whose spectral tail energy
    is at most value * total).  ``rows`` overrides the oversampling count P;
    otherwise P = min(D, ceil(oversample * R)) clamped to [R, 2R].
    """

    layer: int
    strategy: str
    value: float
    oversample: float = 1.5
    rows: int | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise PlanError(f"unknown strategy '{self.strategy}'")
        if self.strategy == "fixed" and (
            self.value != int(self.value) or self.value < 1
        ):
            raise PlanError(f"fixed rank must be a positive integer, got {self.value}")
        if self.strategy == "fraction" and not 0.0 < self.value <= 1.0:
            raise PlanError(f"rank fraction must be in (0, 1], got {self.value}")
        if self.strategy == "energy" and not 0.0 <= self.value < 1.0:
            raise PlanError(f"energy threshold must be in [0, 1), got {self.value}")
        if not 1.0 <= self.oversample <= 2.0:
            raise PlanError(
                f"oversample factor must lie in [1, 2], got {self.oversample}"
            )
        if self.rows is not None and self.rows < 1:
            raise PlanError(f"rows must be positive, got {self.rows}")


@dataclass
class CompressionPlan:
    """Ordered per-layer entries covering a contiguous suffix of affine layers."""

    entries: list
    seed: int = 0

    def __post_init__(self):
        self.entries = sorted(self.entries, key=lambda e: e.layer)
        if not self.entries:
            raise PlanError("plan has no entries")
        layers = [e.layer for e in self.entries]
        if len(set(layers)) != len(layers):
            raise PlanError(f"duplicate plan entries for layers {layers}")

    @property
    def first_compressed_layer(self) -> int:
        return self.entries[0].layer

    def validate(self, net: TeacherNetwork) -> None:
        """Check the entries form a contiguous suffix of eligible layers."""
        eligible = eligible_layers(net)
        if self.first_compressed_layer not in eligible:
            raise PlanError(
                f"layer {self.first_compressed_layer} is not an eligible affine "
                f"layer (eligible: {eligible})"
            )
        want = [i for i in eligible if i >= self.first_compressed_layer]
        got = [e.layer for e in self.entries]
        if got != want:
            raise PlanError(
                f"plan must cover the contiguous suffix {want} of eligible layers, "
                f"got {got}"
            )


def eligible_layers(net: TeacherNetwork) -> list:
    """Indices of top-level dense/conv layers that a plan may compress."""
    return [
        i for i, layer in enumerate(net.layers) if isinstance(layer, (Dense, Conv2d))
    ]


def make_uniform_plan(
    net: TeacherNetwork,
    strategy: str,
    value: float,
    *,
    oversample: float = 1.5,
    layers_from: int | None = None,
    seed: int = 0,
) -> CompressionPlan:
    """One entry per eligible layer from ``layers_from`` (default: all)."""
    eligible = eligible_layers(net)
    if not eligible:
        raise PlanError("network has no compressible affine layers")
    first = eligible[0] if layers_from is None else int(layers_from)
    if first not in eligible:
        raise PlanError(f"layers-from {first} is not an eligible layer {eligible}")
    entries = [
        PlanEntry(layer=i, strategy=strategy, value=value, oversample=oversample)
        for i in eligible
        if i >= first
    ]
    return CompressionPlan(entries, seed=seed)


def load_plan(path) -> CompressionPlan:
    """Read a plan file (JSON; schema documented in docs/format.md)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: cannot parse plan file: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("entries"), list):
        raise FormatError(f"{path}: plan must be an object with an 'entries' list")
    entries = []
    for i, rec in enumerate(doc["entries"]):
        try:
            entries.append(
                PlanEntry(
                    layer=int(rec["layer"]),
                    strategy=str(rec["strategy"]),
                    value=float(rec["value"]),
                    oversample=float(rec.get("oversample", 1.5)),
                    rows=None if rec.get("rows") is None else int(rec["rows"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: bad plan entry {i}: {exc}") from exc
    return CompressionPlan(entries, seed=int(doc.get("seed", 0)))


def save_plan(path, plan: CompressionPlan) -> None:
    doc = {
        "seed": plan.seed,
        "entries": [
            {
                "layer": e.layer,
                "strategy": e.strategy,
                "value": e.value,
                "oversample": e.oversample,
                "rows": e.rows,
            }
            for e in plan.entries
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- stage extraction ----------------------------------------------------------


@dataclass
class _Stage:
    """One compressible dense stage of the lowered teacher."""

    affine_index: int
    last_index: int
    label: str
    weight: np.ndarray
    bias: np.ndarray
    activation: ActivationKind
    pooled: bool
    pre_pool_shape: tuple | None
    in_dim: int
    out_dim: int


def _extract_stages(net: TeacherNetwork, first: int, lowering_cap: int):
    """Split layers[first:] into affine stages; returns (prefix, stages)."""
    layers, shapes = net.layers, net.shapes
    prefix = list(layers[:first])
    stages = []
    i = first
    while i < len(layers):
        layer = layers[i]
        if isinstance(layer, Residual):
            raise PlanError(
                f"layer {i}: residual blocks are not supported inside the "
                "compressed suffix (compress their branches via compress_residual)"
            )
        if not isinstance(layer, (Dense, Conv2d)):
            raise PlanError(
                f"layer {i} ({type(layer).__name__}) cannot start a compressed "
                "stage; batch norms must directly follow their affine layer"
            )
        in_shape = shapes[i]
        if isinstance(layer, Dense):
            affine = layer
            label = f"dense[{i}]"
        else:
            affine = conv_to_dense(layer, in_shape, cap=lowering_cap)
            label = f"conv[{i}]"
        cur_shape = shapes[i + 1]
        j = i + 1
        while j < len(layers) and isinstance(layers[j], BatchNorm):
            affine = fold_batchnorm(affine, layers[j])
            cur_shape = shapes[j + 1]
            j += 1
        act = ActivationKind.identity()
        pooled = False
        pre_pool_shape = None
        while j < len(layers) and isinstance(layers[j], (Activation, MaxPool)):
            sub = layers[j]
            if isinstance(sub, Activation):
                if act.name != "identity":
                    raise PlanError(f"layer {j}: stage already has an activation")
                act = sub.kind
            else:
                if pooled:
                    raise PlanError(f"layer {j}: stage already has a max pool")
                pooled = True
                # Shape entering the pool.  Activation and 2x2 max commute
                # for non-decreasing element-wise functions, so applying the
                # activation before the pool is exact regardless of the
                # teacher's ordering.
                pre_pool_shape = shapes[j]
            cur_shape = shapes[j + 1]
            j += 1
        stages.append(
            _Stage(
                affine_index=i,
                last_index=j - 1,
                label=label,
                weight=affine.weight,
                bias=affine.bias,
                activation=act,
                pooled=pooled,
                pre_pool_shape=pre_pool_shape,
                in_dim=flat_size(in_shape),
                out_dim=flat_size(cur_shape),
            )
        )
        i = j
    return prefix, stages


def _apply_stage(stage: _Stage, x: np.ndarray) -> np.ndarray:
    y = x @ stage.weight.T + stage.bias
    y = stage.activation.apply(y)
    if stage.pooled:
        c, h, w = stage.pre_pool_shape
        y = y.reshape(-1, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))
        y = y.reshape(len(x), -1)
    return y


def stage_span(net: TeacherNetwork, layer: int) -> int:
    """Last layer index belonging to the stage that starts at ``layer``."""
    if layer not in eligible_layers(net):
        raise PlanError(f"layer {layer} is not an affine layer")
    j = layer + 1
    while j < len(net.layers) and isinstance(
        net.layers[j], (BatchNorm, Activation, MaxPool)
    ):
        j += 1
    return j - 1


# -- basis collection ----------------------------------------------------------


@dataclass
class LayerCompression:
    """Per-layer compression artifacts: basis, spectrum, selection, pinv."""

    layer: int
    label: str
    basis: np.ndarray
    spectrum: np.ndarray
    residual_rms: float
    samples: int
    sketched: bool
    requested_rank: int
    selection: RowSelection | None = None
    pinv: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return int(self.basis.shape[0])

    @property
    def rank(self) -> int:
        return int(self.basis.shape[1])

    @property
    def rows(self) -> int:
        return 0 if self.selection is None else self.selection.p


def _numerical_rank(sigma: np.ndarray) -> int:
    if sigma.size == 0 or sigma[0] <= 0.0:
        return 0
    return int(np.count_nonzero(sigma >= sigma[0] * RANK_FLOOR))


def _basis_from_matrix(
    matrix: np.ndarray,
    samples: int,
    rank: int,
    *,
    layer: int,
    label: str,
    sketched: bool,
    warn: bool = True,
) -> LayerCompression:
    """Truncate the left singular basis of a D x m carrier matrix.

    ``matrix`` is either the transposed activation matrix or a count-sketch
    buffer whose left subspace approximates it.  Lowers the rank to the
    numerical rank when the requested one is unattainable.
    """
    svd = truncated_svd(matrix, min(matrix.shape), compute_vt=False)
    sigma = svd.sigma
    num_rank = _numerical_rank(sigma)
    if num_rank == 0:
        raise NumericalError(f"{label}: activations are identically zero")
    eff_rank = min(rank, num_rank)
    if eff_rank < rank and warn:
        warnings.warn(
            f"{label}: requested rank {rank} exceeds numerical rank {num_rank}; "
            "lowering",
            RankWarning,
            stacklevel=3,
        )
    tail = float(np.sum(sigma[eff_rank:] ** 2))
    return LayerCompression(
        layer=layer,
        label=label,
        basis=np.ascontiguousarray(svd.u[:, :eff_rank]),
        spectrum=sigma,
        residual_rms=math.sqrt(max(tail, 0.0) / samples),
        samples=samples,
        sketched=sketched,
        requested_rank=rank,
    )


def _check_rank_request(label: str, rank: int, dim: int, samples: int) -> None:
    if rank < 1 or rank > dim:
        raise PlanError(f"{label}: rank must satisfy 1 <= R <= {dim}, got {rank}")
    if samples < rank:
        raise NumericalError(
            f"{label}: {samples} calibration samples cannot determine a "
            f"rank-{rank} basis"
        )


def _basis_from_activations(
    z: np.ndarray,
    rank: int,
    *,
    layer: int,
    label: str,
    seed: int,
    sketch: bool | None,
    memory_cap: int,
    warn: bool = True,
) -> LayerCompression:
    n, d = z.shape
    _check_rank_request(label, rank, d, n)
    use_sketch = bool(n * d > memory_cap) if sketch is None else bool(sketch)
    if use_sketch:
        acc = SketchAccumulator(d, sketch_width(rank), seed=seed)
        acc.insert_rows(z)
        matrix = acc.buckets
    else:
        matrix = z.T
    return _basis_from_matrix(
        matrix, n, rank, layer=layer, label=label, sketched=use_sketch, warn=warn
    )


def collect_basis(
    net: TeacherNetwork,
    data,
    layer: int,
    rank: int,
    *,
    seed: int = 0,
    sketch: bool | None = None,
    memory_cap: int = DEFAULT_MEMORY_CAP,
) -> LayerCompression:
    """Basis of the outputs of the stage starting at layer ``layer``.

    Outputs are collected at the stage boundary (after any batch norm,
    activation and pooling attached to the affine layer).  When the stacked
    activation matrix would exceed ``memory_cap`` entries (or ``sketch`` is
    True), activations are streamed into a count-sketch accumulator chunk by
    chunk instead of being materialized; the spectrum then comes from the
    sketch buffer.  ``build_student`` derives per-layer seeds as
    ``layer_seed(plan.seed, layer)``.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ShapeError(f"data must be 2-D, got ndim={data.ndim}")
    upto = stage_span(net, layer)
    d = flat_size(net.shapes[upto + 1])
    n = data.shape[0]
    label = f"{'conv' if isinstance(net.layers[layer], Conv2d) else 'dense'}[{layer}]"
    _check_rank_request(label, rank, d, n)
    use_sketch = bool(n * d > memory_cap) if sketch is None else bool(sketch)
    if not use_sketch:
        z = forward_teacher(net, data, upto=upto)
        return _basis_from_matrix(
            z.T, n, rank, layer=layer, label=label, sketched=False
        )
    acc = SketchAccumulator(d, sketch_width(rank), seed=seed)
    chunk = max(1, memory_cap // max(d, 1))
    for lo in range(0, n, chunk):
        acc.insert_rows(forward_teacher(net, data[lo : lo + chunk], upto=upto))
    return _basis_from_matrix(
        acc.buckets, n, rank, layer=layer, label=label, sketched=True
    )


def select_rows(lc: LayerCompression, rows: int) -> LayerCompression:
    """Fill in the maxvol selection and sketched pseudo-inverse."""
    if not lc.rank <= rows <= lc.dim:
        raise PlanError(
            f"{lc.label}: rows must satisfy R <= P <= D "
            f"({lc.rank} <= {rows} <= {lc.dim})"
        )
    sel = rect_maxvol(lc.basis, rows)
    return replace(lc, selection=sel, pinv=sketched_pinv(lc.basis, sel))


def expand_pooled_selection(indices, pre_pool_shape) -> np.ndarray:
    """Pre-pool row indices gathering each selected pooled unit's 2x2 window.

    ``indices`` select coordinates of the pooled output (channel-major over
    the halved grid); the result lists 4 pre-pool coordinates per selected
    unit, window entries contiguous in row-major (0,0),(0,1),(1,0),(1,1)
    order, so a group-of-4 max reproduces the pooled values exactly.
    """
    if isinstance(indices, RowSelection):
        indices = indices.indices
    idx = np.asarray(indices, dtype=np.int64).ravel()
    c, h, w = (int(v) for v in pre_pool_shape)
    if h % 2 or w % 2:
        raise ShapeError(f"pooled stage needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    if idx.size and (idx.min() < 0 or idx.max() >= c * h2 * w2):
        raise ShapeError("pooled selection indices out of range")
    ci, rem = np.divmod(idx, h2 * w2)
    row, col = np.divmod(rem, w2)
    base = ci * h * w + (2 * row) * w + 2 * col
    out = np.empty(4 * idx.size, dtype=np.int64)
    out[0::4] = base
    out[1::4] = base + 1
    out[2::4] = base + w
    out[3::4] = base + w + 1
    return out


# -- residual blocks -----------------------------------------------------------


@dataclass
class ResidualStage:
    """Sampled merge of residual branches: c = (SV)^+ psi(sum_i S V_i c_i)."""

    branch_maps: list
    pinv: np.ndarray
    activation: ActivationKind

    def apply(self, branch_embeddings) -> np.ndarray:
        if len(branch_embeddings) != len(self.branch_maps):
            raise ShapeError(
                f"expected {len(self.branch_maps)} branch embeddings, "
                f"got {len(branch_embeddings)}"
            )
        total = None
        for c, m in zip(branch_embeddings, self.branch_maps):
            lift = np.asarray(c, dtype=np.float64) @ m.T
            total = lift if total is None else total + lift
        return self.activation.apply(total) @ self.pinv.T


def compress_residual(
    branch_lcs,
    out_lc: LayerCompression,
    activation: ActivationKind | None = None,
) -> ResidualStage:
    """Stage weights for a residual block from branch and output bases.

    Each branch contributes its basis sampled at the output selection,
    S V_i; the output compression supplies the selection S and pseudo-inverse
    (S V)^+ computed on the summed post-activation output.
    """
    if out_lc.selection is None or out_lc.pinv is None:
        raise PlanError("output compression needs a selection (run select_rows)")
    if not branch_lcs:
        raise PlanError("residual block needs at least one branch compression")
    rows = out_lc.selection.indices
    maps = []
    for i, lc in enumerate(branch_lcs):
        if lc.dim != out_lc.dim:
            raise ShapeError(
                f"branch {i} basis has {lc.dim} rows, output has {out_lc.dim}"
            )
        maps.append(np.ascontiguousarray(lc.basis[rows]))
    return ResidualStage(
        branch_maps=maps,
        pinv=out_lc.pinv,
        activation=activation or ActivationKind.identity(),
    )


# -- error accounting ----------------------------------------------------------


def error_bound(dim: int, rank: int, rows: int, residual_norm: float) -> float:
    """Per-layer error bound sqrt(1 + (D-P)R/(P+1-R)) * ||eps||.

    Monotone non-increasing in P; equals the residual itself when P = D.
    """
    if not rank <= rows <= dim:
        raise PlanError(f"bound needs R <= P <= D, got R={rank} P={rows} D={dim}")
    if residual_norm < 0.0:
        raise PlanError(f"residual norm must be >= 0, got {residual_norm}")
    return maxvol_bound(dim, rank, rows) * float(residual_norm)


@dataclass
class LayerErrorStats:
    """Error-bound bookkeeping for one compressed layer."""

    layer: int
    label: str
    dim: int
    rank: int
    rows: int
    bound_coefficient: float
    residual_rms: float
    residual_emp_rms: float
    residual_emp_max: float
    error_emp_rms: float
    error_emp_max: float
    bound_rms: float
    bound_max: float
    requested_rank: int
    sketched: bool

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "label": self.label,
            "dim": self.dim,
            "rank": self.rank,
            "rows": self.rows,
            "bound_coefficient": self.bound_coefficient,
            "residual_rms": self.residual_rms,
            "residual_emp_rms": self.residual_emp_rms,
            "residual_emp_max": self.residual_emp_max,
            "error_emp_rms": self.error_emp_rms,
            "error_emp_max": self.error_emp_max,
            "bound_rms": self.bound_rms,
            "bound_max": self.bound_max,
            "requested_rank": self.requested_rank,
            "sketched": self.sketched,
        }


_REPORT_COLUMNS = (
    "layer",
    "label",
    "dim",
    "rank",
    "rows",
    "bound_coefficient",
    "residual_rms",
    "residual_emp_rms",
    "residual_emp_max",
    "error_emp_rms",
    "error_emp_max",
    "bound_rms",
    "bound_max",
)


@dataclass
class ErrorReport:
    """Per-layer residuals, empirical errors and bound values."""

    layers: list
    fit_samples: int
    holdout_samples: int

    def to_dict(self) -> dict:
        return {
            "fit_samples": self.fit_samples,
            "holdout_samples": self.holdout_samples,
            "layers": [s.to_dict() for s in self.layers],
        }

    def to_tsv(self) -> str:
        lines = ["\t".join(_REPORT_COLUMNS)]
        for s in self.layers:
            rec = s.to_dict()
            cells = []
            for col in _REPORT_COLUMNS:
                v = rec[col]
                cells.append(format(v, ".12g") if isinstance(v, float) else str(v))
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"


def _rank_upfront(entry: PlanEntry, dim: int) -> int | None:
    """Rank implied by the entry before seeing the spectrum; None for energy."""
    if entry.strategy == "fixed":
        rank = int(entry.value)
        if rank > dim:
            raise PlanError(
                f"layer {entry.layer}: fixed rank {rank} exceeds output dim {dim}"
            )
        return rank
    if entry.strategy == "fraction":
        return max(1, min(dim, math.ceil(entry.value * dim)))
    return None


def _energy_rank(entry: PlanEntry, sigma: np.ndarray) -> int:
    total = float(np.sum(sigma**2))
    if total <= 0.0:
        raise NumericalError(f"layer {entry.layer}: activations are identically zero")
    tail = total
    for r in range(1, sigma.size + 1):
        tail -= float(sigma[r - 1] ** 2)
        if tail <= entry.value * total:
            return r
    return int(sigma.size)


def _resolve_rows(entry: PlanEntry, rank: int, dim: int, lowered: bool) -> int:
    if entry.rows is not None:
        rows = int(entry.rows)
        if not rank <= rows <= min(2 * rank, dim):
            if not lowered:
                raise PlanError(
                    f"layer {entry.layer}: rows {rows} outside "
                    f"[R, min(2R, D)] = [{rank}, {min(2 * rank, dim)}]"
                )
            rows = max(rank, min(rows, 2 * rank, dim))
        return rows
    rows = min(dim, math.ceil(entry.oversample * rank))
    return max(rank, min(rows, 2 * rank, dim))


def _holdout_stats(z_hold, lc: LayerCompression, coeff: float):
    """Per-sample residual and sampled-error norms on held-out rows."""
    if z_hold.shape[0] == 0:
        nan = float("nan")
        return nan, nan, nan, nan, nan, nan
    eps = z_hold - (z_hold @ lc.basis) @ lc.basis.T
    eps_norms = np.linalg.norm(eps, axis=1)
    err = eps[:, lc.selection.indices] @ lc.pinv.T
    err_norms = np.linalg.norm(err, axis=1)
    resid_rms = float(np.sqrt(np.mean(eps_norms**2)))
    resid_max = float(eps_norms.max())
    return (
        resid_rms,
        resid_max,
        float(np.sqrt(np.mean(err_norms**2))),
        float(err_norms.max()),
        coeff * resid_rms,
        coeff * resid_max,
    )


def build_student(
    net: TeacherNetwork,
    data,
    plan: CompressionPlan,
    *,
    calibration_limit: int = DEFAULT_CALIBRATION_LIMIT,
    holdout_fraction: float = DEFAULT_HOLDOUT_FRACTION,
    memory_cap: int = DEFAULT_MEMORY_CAP,
    lowering_cap: int = DEFAULT_LOWERING_CAP,
    sketch: bool | None = None,
):
    """Assemble the student network and its error report.

    Propagates a calibration subset through the compressed suffix stage by
    stage, computing each stage's basis, maxvol selection and pseudo-inverse,
    and emitting the student weights as it goes; only the current and previous
    bases are held at any time.  A held-out fraction of the calibration subset
    never informs the bases and supplies the empirical error columns of the
    report.

    Returns (StudentNetwork, ErrorReport).
    """
    plan.validate(net)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != net.input_dim:
        raise ShapeError(
            f"calibration data must be N x {net.input_dim}, got {data.shape}"
        )
    prefix, stages = _extract_stages(net, plan.first_compressed_layer, lowering_cap)
    entries = plan.entries
    if len(stages) != len(entries) or any(
        s.affine_index != e.layer for s, e in zip(stages, entries)
    ):
        raise PlanError(
            f"plan entries {[e.layer for e in entries]} do not match stages "
            f"{[s.affine_index for s in stages]}"
        )

    n_total = data.shape[0]
    if n_total < 1:
        raise NumericalError("calibration data is empty")
    if n_total > calibration_limit:
        rng = np.random.default_rng(plan.seed)
        keep = np.sort(rng.permutation(n_total)[:calibration_limit])
        data = data[keep]
    n = data.shape[0]
    n_hold = int(math.floor(holdout_fraction * n))
    n_fit = n - n_hold
    if n_fit < 1:
        raise NumericalError("holdout fraction leaves no calibration samples")

    if prefix:
        z = forward_teacher(TeacherNetwork(net.input_shape, prefix), data)
    else:
        z = data
    z_fit, z_hold = z[:n_fit], z[n_fit:]

    prev_basis = None
    prev_pinv = None
    student_stages = []
    stats_rows = []
    for stage, entry in zip(stages, entries):
        z_fit = _apply_stage(stage, z_fit)
        z_hold = _apply_stage(stage, z_hold)
        seed = layer_seed(plan.seed, stage.affine_index)
        rank = _rank_upfront(entry, stage.out_dim)
        if rank is not None:
            lc = _basis_from_activations(
                z_fit,
                rank,
                layer=stage.affine_index,
                label=stage.label,
                seed=seed,
                sketch=sketch,
                memory_cap=memory_cap,
            )
        else:
            # Energy strategy: probe the full spectrum first, then truncate.
            probe = _basis_from_activations(
                z_fit,
                min(stage.out_dim, z_fit.shape[0]),
                layer=stage.affine_index,
                label=stage.label,
                seed=seed,
                sketch=sketch,
                memory_cap=memory_cap,
                warn=False,
            )
            rank = _energy_rank(entry, probe.spectrum)
            eff = min(rank, probe.basis.shape[1])
            if eff < rank:
                warnings.warn(
                    f"{stage.label}: requested rank {rank} exceeds numerical "
                    f"rank {probe.basis.shape[1]}; lowering",
                    RankWarning,
                    stacklevel=2,
                )
            tail = float(np.sum(probe.spectrum[eff:] ** 2))
            lc = replace(
                probe,
                basis=np.ascontiguousarray(probe.basis[:, :eff]),
                residual_rms=math.sqrt(max(tail, 0.0) / probe.samples),
                requested_rank=rank,
            )
        lowered = lc.rank < lc.requested_rank
        rows = _resolve_rows(entry, lc.rank, stage.out_dim, lowered)
        lc = select_rows(lc, rows)

        gather = (
            expand_pooled_selection(lc.selection.indices, stage.pre_pool_shape)
            if stage.pooled
            else lc.selection.indices
        )
        w_rows = stage.weight[gather]
        b_rows = stage.bias[gather]
        if prev_basis is None:
            w_stage = w_rows
        else:
            w_stage = (w_rows @ prev_basis) @ prev_pinv
        student_stages.append(
            StudentStage(
                w_stage,
                b_rows,
                stage.activation,
                pool_group=4 if stage.pooled else 1,
            )
        )

        coeff = maxvol_bound(lc.dim, lc.rank, lc.rows)
        (
            resid_emp_rms,
            resid_emp_max,
            err_emp_rms,
            err_emp_max,
            bound_rms,
            bound_max,
        ) = _holdout_stats(z_hold, lc, coeff)
        stats_rows.append(
            LayerErrorStats(
                layer=stage.affine_index,
                label=stage.label,
                dim=lc.dim,
                rank=lc.rank,
                rows=lc.rows,
                bound_coefficient=coeff,
                residual_rms=lc.residual_rms,
                residual_emp_rms=resid_emp_rms,
                residual_emp_max=resid_emp_max,
                error_emp_rms=err_emp_rms,
                error_emp_max=err_emp_max,
                bound_rms=bound_rms,
                bound_max=bound_max,
                requested_rank=lc.requested_rank,
                sketched=lc.sketched,
            )
        )
        prev_basis, prev_pinv = lc.basis, lc.pinv

    lift = prev_basis @ prev_pinv
    student = StudentNetwork(net.input_shape, prefix, student_stages, lift)
    report = ErrorReport(stats_rows, fit_samples=n_fit, holdout_samples=n_hold)
    return student, report
