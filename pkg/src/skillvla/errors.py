"""Exception hierarchy shared by all modules."""


class SkillVLAError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(SkillVLAError):
    """Array extents incompatible with the requested operation."""


class NumericError(SkillVLAError):
    """A primitive produced NaN or Inf, or numeric state is unusable."""


class ContractError(SkillVLAError):
    """An API precondition was violated by the caller."""


class ConfigError(SkillVLAError):
    """Invalid or unknown configuration value."""


class VocabularyError(SkillVLAError):
    """Token id outside the embedding table."""


class PlacementError(SkillVLAError):
    """Could not place scene objects under the separation constraints."""


class VersionError(SkillVLAError):
    """Serialized artifact has an incompatible format or config."""


class DataFormatError(SkillVLAError):
    """Dataset or checkpoint file is missing or malformed."""


class DegenerateCorrelationError(SkillVLAError):
    """Distance lists have zero variance; correlation undefined."""
