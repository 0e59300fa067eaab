"""Rare-event STL verification and synthesis via elliptical slice sampling
inside a multilevel nesting ladder."""

from .stl import (
    Signal,
    LinearPredicate,
    Pred,
    Not,
    And,
    Or,
    Always,
    Eventually,
    Until,
    StlSyntaxError,
    SignalTooShortError,
    parse,
    render,
    horizon,
    robustness,
    robustness_batch,
    negate,
    collect_predicates,
)
from .lingauss import LtvSystem, TrajectoryGaussian, unroll, lift_predicates, sensitivities
from .ess import (
    AngularDomain,
    Ellipse,
    AnchorInfeasibleError,
    hyperplane_roots,
    active_segments,
    ess_step,
    chain,
    LinearStlSampler,
)
from .hdr import (
    NestingLadder,
    NestingRecord,
    VerificationResult,
    VerifyConfig,
    LadderError,
    LadderStallError,
    SeedSearchError,
    next_threshold,
    variance,
    error_bound,
    required_samples,
    mc_estimate,
    verify,
)
from .blackbox import (
    SimulatorError,
    SimulationBudgetExceeded,
    CallableRunFunction,
    SubprocessRunFunction,
    EllipseObjective,
    robustness_on_ellipse,
    LipschitzState,
    lipschitz_sample,
    GpModel,
    BoConfig,
    bo_sample,
    BlackboxSampler,
    blackbox_verify,
)
from .warp import (
    Bijector,
    Affine,
    ComponentwiseInverseCdf,
    MonotoneSpline,
    CoordinateSlice,
    Composition,
    UniformTarget,
    ExponentialTarget,
    TruncatedNormalTarget,
    WeightedSample,
    identity,
    compose,
    weighted_conditional,
    pullback_weight,
)
from .synthesis import (
    grad_mu,
    grad_sigma,
    grad_parameter,
    SynthesisProblem,
    SynthesisTrace,
    synthesize,
    fresh_failure_samples,
    find_satisfying_controls,
)
from .rng import substream

__version__ = "0.1.0"
