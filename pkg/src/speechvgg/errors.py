"""Exception types shared across the package."""


class DataError(Exception):
    """Input files or corpora violate the documented formats or ranges."""


class CheckpointError(Exception):
    """A checkpoint file is malformed, corrupted or incompatible."""
