"""Exception hierarchy for the crack-segmentation pipeline.

Every error is a FlexiCrackError and also the built-in exception a caller
would naturally catch, so ``except ValueError`` keeps working at call sites
that do not care about the finer classes.
"""


class FlexiCrackError(Exception):
    """Base class for all pipeline errors."""


# --- data_pipeline ---------------------------------------------------------


class DatasetError(FlexiCrackError, ValueError):
    """Dataset layout or content problem."""


class MissingMask(DatasetError):
    """An image stem has no matching mask file."""


class AmbiguousStem(DatasetError):
    """Two files in one directory share a stem (e.g. a.png and a.jpg)."""


class EmptyDataset(DatasetError):
    """A dataset directory yielded zero image/mask pairs."""


class BadTargetSize(DatasetError):
    """Target size is not a pair of positive multiples of 16."""


class DecodeError(DatasetError):
    """An image or mask file could not be decoded."""


class ShapeMismatch(FlexiCrackError, ValueError):
    """Two arrays that must agree in shape do not."""


# --- feature_extractor / model ---------------------------------------------


class BadResolution(FlexiCrackError, ValueError):
    """Input height or width is not divisible by 16."""


class BackendUnavailable(FlexiCrackError, FileNotFoundError):
    """Pretrained extractor weights could not be found or fetched."""


class CorruptWeights(FlexiCrackError, ValueError):
    """Checkpoint header and tensor table disagree, or the file is truncated."""


class VersionMismatch(FlexiCrackError, ValueError):
    """Checkpoint was written with an unsupported format version."""


class ChannelMismatch(FlexiCrackError, ValueError):
    """Feature map channel count does not match the module's expectation."""


class ConfigError(FlexiCrackError, ValueError):
    """Invalid model, training, or run configuration."""


# --- losses_metrics / training ----------------------------------------------


class NonBinaryInput(FlexiCrackError, ValueError):
    """A mask expected to hold only 0 and 1 holds other values."""


class EmptyInput(FlexiCrackError, ValueError):
    """An aggregation received no items."""


class NonFiniteLoss(FlexiCrackError, RuntimeError):
    """Loss or gradient became NaN or infinite during training."""
