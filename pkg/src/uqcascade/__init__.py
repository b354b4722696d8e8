"""Window-based early-exit cascades over model ensembles.

Evaluation and simulation engine for adaptive-inference uncertainty
estimation: per-stage score tables, single-threshold and window exit
policies, threshold calibration, and selective-classification / OOD /
combined metrics with explicit computation-cost accounting.
"""

from .calibrate import (
    CoverageBase,
    CoverageExactly,
    OperatingPoint,
    Policy,
    RiskAtMost,
    Task,
    TPRExactly,
    UnsatisfiableCriterion,
    WindowBase,
    WindowSpec,
    adjust_window_offline,
    adjust_window_stream,
    build_windows,
    default_method,
    load_policy,
    refit_final_tau,
    resolve_tau,
    save_policy,
    window_around,
)
from .cascade import (
    CascadePolicy,
    CascadeTrace,
    SingleThreshold,
    Window,
    all_pass_policy,
    no_pass_policy,
    policy_from_windows,
    run_cascade,
    sweep_policy,
)
from .metrics import (
    EvalOutcome,
    MetricsReport,
    RCCurve,
    aurc,
    auroc,
    cov_at_risk,
    fpr_at_tpr,
    rc_curve,
    report,
    risk_at_cov,
    selective_risk_at,
    task_losses,
)
from .quantile import QuantileSketch
from .scoretab import (
    FormatError,
    IngestError,
    MixtureSpec,
    ScoreTable,
    ScoreTableError,
    ingest_csv,
    mix_subsample,
    read_binary,
    split_domains,
    write_binary,
)
from .synth import SynthSpec, generate, split
from .uncertainty import (
    CombineRule,
    PrefixOutput,
    ScoreKind,
    ScoreMethod,
    energy,
    neg_msp,
    prefix_evaluate,
    softmax,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
