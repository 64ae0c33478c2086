"""Exception types shared across the package.

Everything derives from ValueError so callers that only care about
"bad input" can catch one type, while tests can pin the precise failure.
"""


class DimensionError(ValueError):
    """Operand shapes do not compose."""


class KernelError(ValueError):
    """Convolution kernel has an unsupported shape (even height/width)."""


class ProbabilityError(ValueError):
    """A probability vector is invalid (negative mass or does not sum to 1)."""


class LabelError(ValueError):
    """A class label lies outside the valid range."""


class ConfigError(ValueError):
    """An experiment or policy configuration is invalid."""


class RegistryError(ValueError):
    """An augmentation op name is not registered."""


class ActionError(ValueError):
    """An action record is inconsistent with the policy that must score it."""


class ArchitectureError(ValueError):
    """A layer tape and reference gradients come from different architectures."""


class RewardError(ValueError):
    """Reward and log-prob gradient counts disagree."""


class FormatError(ValueError):
    """A dataset file does not match its binary layout."""


class SamplingError(ValueError):
    """Sampling was requested from an empty population."""


class VerifierError(ValueError):
    """The unbiasedness verifier was given a non-enumerable problem."""
