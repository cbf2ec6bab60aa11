"""Python bindings for the varformer C++ core."""

from ._core import (
    BayesLinear,
    ConfigError,
    ContractError,
    DomainError,
    Hypothesis,
    InfeasibleAlignmentError,
    KlMode,
    MinibatchForm,
    NumericalError,
    ParseError,
    Sample,
    ShapeError,
    SynthConfig,
    Tape,
    Tensor,
    Vocab,
    beam_search,
    cer,
    cross_entropy,
    ctc_loss,
    default_config,
    edit_distance,
    generate_synthetic,
    greedy_decode,
    kl_gaussian,
    minibatch_weight,
    ops,
    run_training,
    sigma_from_rho,
    wer,
)

__all__ = [name for name in dir() if not name.startswith("_")]
