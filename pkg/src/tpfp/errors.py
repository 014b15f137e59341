"""Exception types, grouped into the exit-code families reported by the CLI."""


class TpfpError(Exception):
    """Base class for all tpfp errors."""

    exit_code = 1


class FormatError(TpfpError):
    """File-layout, parsing, or integrity problem (CLI exit code 2)."""

    exit_code = 2


class ResolutionError(TpfpError):
    """Config or tensor-name resolution problem (CLI exit code 3)."""

    exit_code = 3


class NumericError(TpfpError):
    """Degenerate or invalid numeric input (CLI exit code 4)."""

    exit_code = 4


# --- checkpoint access ---------------------------------------------------


class MissingIndex(FormatError):
    """No recognizable checkpoint layout in the given directory."""


class HeaderMalformed(FormatError):
    """A tensor-file header could not be parsed or is internally inconsistent."""


class DuplicateTensor(FormatError):
    """The same tensor name appears in more than one shard."""


class UnsupportedDType(FormatError):
    """A header declares a dtype outside the supported set."""


class SizeMismatch(FormatError):
    """Declared byte offsets disagree with shape and dtype, or run past EOF."""


class TensorNotFound(ResolutionError):
    """A requested tensor name is not present in the checkpoint."""


class DegenerateTensor(NumericError):
    """A tensor (or selected region) has fewer than two elements."""


class NonFiniteEncountered(NumericError):
    """A NaN or Inf element was found while streaming a tensor."""


# --- config / name resolution --------------------------------------------


class ConfigMissing(FormatError):
    """No readable model-config document in the checkpoint directory."""


class ConfigFieldMissing(ResolutionError):
    """A required config field is absent or invalid and cannot be derived."""


class UnresolvedLayer(ResolutionError):
    """One or more (layer, projection) slots have no matching tensor."""


class AmbiguousPattern(ResolutionError):
    """Multiple rules or tensors compete for the same resolution slot."""


class ShapeContradiction(ResolutionError):
    """A resolved tensor's shape is inconsistent with the model config."""


class MappingFileInvalid(FormatError):
    """A user-supplied name-mapping file is malformed."""


# --- fingerprints ---------------------------------------------------------


class DegenerateLayer(NumericError):
    """A layer's pooled projection matrix has fewer than two elements."""


class DegenerateSequence(NumericError):
    """A std sequence is constant (or too short) and cannot be normalized."""


class DocumentMalformed(FormatError):
    """A serialized document is not structurally valid."""


class SchemaVersionUnsupported(FormatError):
    """A serialized document declares a schema version this build cannot read."""


class HashMismatch(FormatError):
    """A stored content hash does not match the recomputed value."""


# --- comparison -----------------------------------------------------------


class KindMissing(ResolutionError):
    """A fingerprint lacks a projection kind required for comparison."""


class ConstantInput(NumericError):
    """Correlation input has zero variance."""


class LengthMismatch(NumericError):
    """Correlation inputs have different lengths."""


class TooFewSamples(NumericError):
    """Not enough samples for the requested statistic."""


class TargetShorterThanSource(NumericError):
    """Interpolation target length is shorter than the source sequence."""


# --- registry / fixtures --------------------------------------------------


class DuplicateModelId(FormatError):
    """A model id is already present in the registry."""


class SpecInvalid(FormatError):
    """A synthetic-checkpoint spec document is malformed or inconsistent."""
