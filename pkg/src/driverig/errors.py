"""Exception types shared across the rig."""


class DriverigError(Exception):
    """Base class for all rig-specific errors."""


class ConfigError(DriverigError):
    """Invalid run configuration; message lists every violated field."""


class DatasetError(DriverigError):
    """Base for dataset file problems."""


class VersionMismatchError(DatasetError):
    """File was written by an incompatible format version."""


class TruncatedFileError(DatasetError):
    """File ends before the record count promised by its header."""


class ChecksumError(DatasetError):
    """Payload bytes do not match the header checksum."""


class WorkerError(DriverigError):
    """A training worker failed; message carries the rank."""

    def __init__(self, rank, message):
        super().__init__(f"worker {rank} failed: {message}")
        self.rank = rank
