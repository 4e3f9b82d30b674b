"""Exception types shared across the package."""


class PatchlocError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(PatchlocError):
    """A file does not conform to its on-disk format (magic, version,
    truncation, checksum, malformed text record)."""


class InvariantViolation(PatchlocError):
    """A domain object violates one of its declared invariants."""


class InvalidGeometry(PatchlocError):
    """Patch window geometry is inconsistent with the feature map."""


class DegenerateDescriptorError(PatchlocError):
    """A descriptor collapsed to the zero vector somewhere in the pipeline."""


class ConfigError(PatchlocError):
    """A configuration value is out of its valid range or unparseable."""
