"""Custom exceptions for phantom RL fine-tuning operations."""

from typing import Optional, Sequence


class PhantomRLError(Exception):
    """Base exception for pyphantomrl operations."""

    exit_code = 1


class ConfigError(PhantomRLError):
    """Raised when a configuration file or override is invalid."""

    exit_code = 3

    def __init__(self, message: str = "Invalid configuration.", key: Optional[str] = None):
        self.key = key
        if key:
            message = f"{message} (key: {key})"
        super().__init__(message)


class ShapeMismatchError(PhantomRLError):
    """Raised when tensor shapes disagree."""

    def __init__(self, what: str, expected: Sequence[int], got: Sequence[int]):
        self.what = what
        self.expected = tuple(expected)
        self.got = tuple(got)
        super().__init__(f"Shape mismatch for {what}: expected {self.expected}, got {self.got}")


class NonFiniteError(PhantomRLError):
    """Raised when a NaN or infinity shows up where finite values are required."""

    def __init__(self, what: str = "value"):
        self.what = what
        super().__init__(f"Non-finite {what} encountered")


class UnregisteredParameterError(PhantomRLError):
    """Raised when a computation uses a trainable tensor the ParamStore does not know."""

    def __init__(self, count: int = 1):
        self.count = count
        super().__init__(
            f"Computation depends on {count} trainable tensor(s) not registered in the ParamStore"
        )


class MissingOptimizerStateError(PhantomRLError):
    """Raised when the optimizer has no state entry for a gradient it was handed."""

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"No optimizer state for parameter '{name}'")


class FrozenModelError(PhantomRLError):
    """Raised when a model that must stay frozen would be changed or is not frozen."""

    def __init__(self, message: str = "Model must be frozen for this operation."):
        super().__init__(message)


class OffPolicyError(PhantomRLError):
    """Raised when trajectories were sampled under different parameters than the current ones."""

    def __init__(self, sampled_hash: str, current_hash: str):
        self.sampled_hash = sampled_hash
        self.current_hash = current_hash
        super().__init__(
            f"Trajectory sampled under parameters {sampled_hash}, current parameters are {current_hash}"
        )


class TrainingDivergenceError(PhantomRLError):
    """Raised when training statistics stop being finite."""

    exit_code = 5

    def __init__(self, step: int, what: str = "statistics"):
        self.step = step
        super().__init__(f"Training diverged at step {step}: non-finite {what}")


class DatasetError(PhantomRLError):
    """Raised when a dumped dataset cannot be used."""

    exit_code = 4

    def __init__(self, message: str = "Dataset is missing or malformed."):
        super().__init__(message)


class DatasetMismatchError(PhantomRLError):
    """Raised when artifacts were produced from different datasets."""

    exit_code = 6

    def __init__(self, first: str, second: str):
        self.first = first
        self.second = second
        super().__init__(
            f"Dataset hash mismatch: {first} != {second}. Pass --force to evaluate anyway."
        )


class ArtifactIOError(PhantomRLError):
    """Raised when an artifact cannot be read or written."""

    exit_code = 4

    def __init__(self, path: str, error: Optional[Exception] = None):
        self.path = path
        self.original_error = error
        message = f"I/O failure on {path}"
        if error:
            message = f"{message}: {error}"
        super().__init__(message)


class OutputLockedError(PhantomRLError):
    """Raised when another invocation holds the output directory."""

    exit_code = 7

    def __init__(self, lock_path: str):
        self.lock_path = lock_path
        super().__init__(
            f"Output directory is locked by another run ({lock_path}). "
            "Remove the lock file if no other run is active."
        )


class CheckpointError(PhantomRLError):
    """Base exception for checkpoint container failures."""

    exit_code = 4


class BadMagicError(CheckpointError):
    """Raised when a file does not start with the checkpoint magic bytes."""

    exit_code = 10

    def __init__(self, found: bytes = b""):
        self.found = found
        super().__init__(f"bad magic: expected b'CXRL', found {found!r}")


class UnsupportedVersionError(CheckpointError):
    """Raised when the container format version is not supported."""

    exit_code = 11

    def __init__(self, version: int, supported: int):
        self.version = version
        self.supported = supported
        super().__init__(f"unsupported version {version} (supported: {supported})")


class HashMismatchError(CheckpointError):
    """Raised when the payload hash does not match the header."""

    exit_code = 12

    def __init__(self, expected: str, actual: str):
        self.expected = expected
        self.actual = actual
        super().__init__(f"hash mismatch: header says {expected}, payload hashes to {actual}")


class TruncatedPayloadError(CheckpointError):
    """Raised when the payload is shorter than the header promises."""

    exit_code = 13

    def __init__(self, expected: int, actual: int):
        self.expected = expected
        self.actual = actual
        super().__init__(f"truncated payload: expected {expected} bytes, found {actual}")
