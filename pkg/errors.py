"""
Error types for rawtobit
Every failure raised by the library derives from RawToBitError so the CLI
can report it with a single handler.
"""

from typing import Optional


class RawToBitError(Exception):
    """Base class for all rawtobit errors"""


class InvalidShape(RawToBitError, ValueError):
    """Tensor shapes do not satisfy an operation's contract"""


class UnsupportedPattern(RawToBitError, ValueError):
    """Bayer pattern other than RGGB"""


class InvalidMetadata(RawToBitError, ValueError):
    """Sensor metadata is inconsistent (e.g. white level <= black level)"""


class PatchTooLarge(RawToBitError, ValueError):
    """Requested patch does not fit inside the image"""


class InvalidSpec(RawToBitError, ValueError):
    """A layer or block configuration is invalid"""


class PadRequired(RawToBitError, ValueError):
    """Input dims are not a multiple of the network stride and padding was not requested"""


class MissingK(RawToBitError, ValueError):
    """Lambda is outside the preset table and no teacher latent width was given"""


class FormatError(RawToBitError):
    """Container bytes are not a rawtobit bitstream"""


class DecodeError(RawToBitError):
    """Bitstream is truncated or corrupted"""

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class ModelMismatch(RawToBitError):
    """Bitstream header does not match the checkpoint used to decode it"""


class CheckpointError(RawToBitError):
    """Checkpoint file is missing fields or holds an unknown system"""


class TrainingDiverged(RawToBitError):
    """Loss became NaN or infinite; a snapshot was written before aborting"""

    def __init__(self, message: str, snapshot_path: Optional[str] = None):
        self.snapshot_path = snapshot_path
        if snapshot_path:
            message = f"{message}; snapshot saved to {snapshot_path}"
        super().__init__(message)
