"""Exception hierarchy. CLI exit codes map onto these classes."""


class ChirpkitError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(ChirpkitError):
    """Invalid or unparseable configuration (CLI exit code 2)."""


class DataError(ChirpkitError):
    """Bad input data: shapes, formats, missing ids (CLI exit code 3)."""


class AudioFormatError(DataError):
    """Unreadable or unsupported audio input."""


class StoreCorruptionError(DataError):
    """Checksum mismatch or truncated record in the dataset store."""


class UnknownIdError(DataError):
    """Lookup of an id that is not in the store."""


class TrainingDivergedError(ChirpkitError):
    """Non-finite loss encountered during training (CLI exit code 4)."""


class RemoteApiError(ChirpkitError):
    """Remote service failure that survived the retry policy
    (CLI exit code 5, like other I/O failures)."""
