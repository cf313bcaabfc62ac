"""FLOP accounting, accuracy evaluation, spectra, and a small timing harness.

FLOP convention: one multiply-accumulate counts as 2 FLOPs (stated explicitly
because papers vary; reduction ratios are convention-independent).  Affine
layers cost 2 * fan_in * fan_out, convolutions 2 * kh * kw * cin * cout * hout
* wout, batch norms 2 per output element, poolings and activations 1 per
output element, residual merges 1 per output element per extra branch.
Counts are additive over layers and independent of batch size.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .network import (
    Activation,
    BatchNorm,
    Conv2d,
    Dense,
    MaxPool,
    Residual,
    StudentNetwork,
    TeacherNetwork,
    flat_size,
    forward_student,
    forward_teacher,
    layer_output_shape,
)

__all__ = [
    "LayerFlops",
    "FlopReport",
    "SpectrumReport",
    "flops_teacher",
    "flops_student",
    "flop_reduction",
    "evaluate",
    "spectrum",
    "tail_mass",
    "time_forward",
]


@dataclass(frozen=True)
class LayerFlops:
    label: str
    kind: str
    flops: int

    def to_dict(self) -> dict:
        return {"label": self.label, "kind": self.kind, "flops": self.flops}


@dataclass
class FlopReport:
    """Per-layer multiply-add counts (2 FLOPs per MAC) and their total."""

    rows: list

    @property
    def total(self) -> int:
        return int(sum(r.flops for r in self.rows))

    def weight_layer_total(self) -> int:
        """FLOPs of affine layers only (dense/conv/stage/lift)."""
        return int(
            sum(r.flops for r in self.rows if r.kind in ("dense", "conv2d", "stage", "lift"))
        )

    def to_dict(self) -> dict:
        return {"total": self.total, "layers": [r.to_dict() for r in self.rows]}

    def to_tsv(self) -> str:
        lines = ["label\tkind\tflops"]
        lines += [f"{r.label}\t{r.kind}\t{r.flops}" for r in self.rows]
        lines.append(f"total\t-\t{self.total}")
        return "\n".join(lines) + "\n"


def _layer_flops(layer, in_shape, index: int, rows: list, label_prefix: str = ""):
    out_shape = layer_output_shape(layer, in_shape)
    out_size = flat_size(out_shape)
    label = f"{label_prefix}{type(layer).__name__.lower()}[{index}]"
    if isinstance(layer, Dense):
        rows.append(LayerFlops(label, "dense", 2 * layer.weight.shape[0] * layer.weight.shape[1]))
    elif isinstance(layer, Conv2d):
        cout, cin, kh, kw = layer.kernel.shape
        _, hout, wout = out_shape
        rows.append(LayerFlops(label, "conv2d", 2 * kh * kw * cin * cout * hout * wout))
    elif isinstance(layer, BatchNorm):
        rows.append(LayerFlops(label, "batchnorm", 2 * out_size))
    elif isinstance(layer, MaxPool):
        rows.append(LayerFlops(label, "maxpool", out_size))
    elif isinstance(layer, Activation):
        rows.append(LayerFlops(label, "activation", out_size))
    elif isinstance(layer, Residual):
        for bi, branch in enumerate(layer.branches):
            shape = in_shape
            for si, sub in enumerate(branch):
                _layer_flops(sub, shape, si, rows, f"residual[{index}].b{bi}.")
                shape = layer_output_shape(sub, shape)
        rows.append(
            LayerFlops(label, "residual_sum", (len(layer.branches) - 1) * out_size)
        )
    else:
        raise ShapeError(f"cannot count FLOPs for {type(layer).__name__}")
    return out_shape


def flops_teacher(net: TeacherNetwork) -> FlopReport:
    """Deterministic per-layer FLOP counts for a teacher network."""
    rows = []
    shape = net.input_shape
    for i, layer in enumerate(net.layers):
        shape = _layer_flops(layer, shape, i, rows)
    return FlopReport(rows)


def flops_student(student: StudentNetwork) -> FlopReport:
    """Per-layer FLOP counts for a student: prefix, stages, lifting map."""
    rows = []
    shape = student.input_shape
    for i, layer in enumerate(student.prefix):
        shape = _layer_flops(layer, shape, i, rows, "prefix.")
    for k, stage in enumerate(student.stages):
        gathered, fan_in = stage.weight.shape
        rows.append(LayerFlops(f"stage[{k}]", "stage", 2 * gathered * fan_in))
        if stage.activation.name != "identity":
            rows.append(LayerFlops(f"stage[{k}].act", "activation", gathered))
        if stage.pool_group > 1:
            rows.append(LayerFlops(f"stage[{k}].pool", "maxpool", stage.units))
    rows.append(
        LayerFlops("lift", "lift", 2 * student.lift.shape[0] * student.lift.shape[1])
    )
    return FlopReport(rows)


def flop_reduction(teacher: FlopReport, student: FlopReport) -> float:
    """Teacher/student FLOP ratio; > 1 means the student is cheaper."""
    if student.total <= 0:
        raise ShapeError("student FLOP total must be positive")
    return teacher.total / student.total


def _forward_any(model, data) -> np.ndarray:
    if isinstance(model, TeacherNetwork):
        return forward_teacher(model, data)
    if isinstance(model, StudentNetwork):
        return forward_student(model, data)
    raise ShapeError(f"cannot evaluate a {type(model).__name__}")


def evaluate(model, data, labels) -> dict:
    """Top-1/top-5 accuracy; argmax ties break toward the lowest class index."""
    labels = np.asarray(labels, dtype=np.int64).ravel()
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or labels.size != data.shape[0]:
        raise ShapeError(
            f"need one label per sample, got {labels.size} labels for {data.shape}"
        )
    logits = _forward_any(model, data)
    n_classes = logits.shape[1]
    top1 = np.argmax(logits, axis=1)
    k = min(5, n_classes)
    # Stable sort on negated logits keeps the lowest class index first on ties.
    topk = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return {
        "top1": float(np.mean(top1 == labels)),
        "top5": float(np.mean(np.any(topk == labels[:, None], axis=1))),
    }


@dataclass
class SpectrumReport:
    """Per-layer normalized singular values (each divided by the largest)."""

    entries: list  # dicts: {"layer", "label", "values": np.ndarray}
    notes: list

    def to_tsv(self) -> str:
        lines = ["layer\tlabel\tindex\tsigma_normalized"]
        for entry in self.entries:
            for i, v in enumerate(entry["values"]):
                lines.append(
                    f"{entry['layer']}\t{entry['label']}\t{i}\t{format(v, '.12g')}"
                )
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "entries": [
                {
                    "layer": e["layer"],
                    "label": e["label"],
                    "values": [float(v) for v in e["values"]],
                }
                for e in self.entries
            ],
            "notes": list(self.notes),
        }


def spectrum(
    net: TeacherNetwork,
    data,
    layers=None,
    *,
    seed: int = 0,
    memory_cap: int | None = None,
) -> SpectrumReport:
    """Normalized output spectra at the requested stage boundaries.

    ``layers`` lists indices of affine layers (default: all of them); outputs
    are collected after any batch norm/activation/pooling attached to the
    layer.  Layers without a matrix output are skipped with a note.  Exact
    zeros beyond the numerical rank are dropped so every reported value lies
    in (0, 1].
    """
    from .compress import (
        DEFAULT_MEMORY_CAP,
        RankWarning,
        collect_basis,
        eligible_layers,
        layer_seed,
        stage_span,
    )

    if memory_cap is None:
        memory_cap = DEFAULT_MEMORY_CAP
    n = np.asarray(data).shape[0]
    eligible = eligible_layers(net)
    targets = eligible if layers is None else list(layers)
    entries, notes = [], []
    for layer in targets:
        if layer not in eligible:
            kind = (
                type(net.layers[layer]).__name__
                if 0 <= layer < len(net.layers)
                else "missing"
            )
            notes.append(f"layer {layer} ({kind}): no matrix output, skipped")
            continue
        # The spectrum wants all singular values, so request a deep rank and
        # silence the inevitable numerical-rank lowering.
        d = flat_size(net.shapes[stage_span(net, layer) + 1])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RankWarning)
            lc = collect_basis(
                net,
                data,
                layer,
                rank=min(d, n, 256),
                seed=layer_seed(seed, layer),
                memory_cap=memory_cap,
            )
        sigma = lc.spectrum
        if sigma.size == 0 or sigma[0] <= 0.0:
            notes.append(f"layer {layer}: zero activations, skipped")
            continue
        values = sigma[sigma > 0.0] / sigma[0]
        entries.append({"layer": layer, "label": lc.label, "values": values})
    return SpectrumReport(entries, notes)


def tail_mass(values, rank: int) -> float:
    """Fraction of spectral energy beyond the leading ``rank`` values."""
    v = np.asarray(values, dtype=np.float64)
    total = float(np.sum(v**2))
    if total <= 0.0:
        return 0.0
    return float(np.sum(v[rank:] ** 2) / total)


def time_forward(model, data, repeats: int = 11) -> float:
    """Median wall-clock seconds for a forward pass (hardware-dependent,
    diagnostic only, never a pass/fail signal)."""
    data = np.asarray(data, dtype=np.float64)
    _forward_any(model, data)  # warm caches
    samples = []
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        _forward_any(model, data)
        samples.append(time.perf_counter() - t0)
    return float(np.median(samples))
