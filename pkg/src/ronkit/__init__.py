"""ronkit: compress feed-forward networks into small dense reduced-order nets.

The toolkit projects layer outputs onto low-dimensional subspaces (truncated
SVD, optionally through a streaming count-sketch), picks representative output
coordinates with the rectangular maximum-volume algorithm, and assembles a
fully-connected student network together with per-layer error bounds and FLOP
accounting.
"""

from .errors import (
    FormatError,
    MemoryGuardError,
    NumericalError,
    PlanError,
    RonError,
    ShapeError,
)
from .linalg import (
    RowSelection,
    SketchAccumulator,
    SvdResult,
    maxvol_bound,
    rect_maxvol,
    sketch_width,
    sketched_pinv,
    square_maxvol,
    truncated_svd,
    volume,
)
from .network import (
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
    fold_batchnorm,
    forward_student,
    forward_teacher,
)
from .modelio import (
    load_dataset,
    load_model,
    save_dataset,
    save_model,
    save_student,
)
from .compress import (
    CompressionPlan,
    ErrorReport,
    LayerCompression,
    PlanEntry,
    RankWarning,
    build_student,
    collect_basis,
    compress_residual,
    error_bound,
    expand_pooled_selection,
    load_plan,
    make_uniform_plan,
    save_plan,
    select_rows,
)
from .metrics import (
    FlopReport,
    SpectrumReport,
    evaluate,
    flop_reduction,
    flops_student,
    flops_teacher,
    spectrum,
    time_forward,
)

__version__ = "0.1.0"
