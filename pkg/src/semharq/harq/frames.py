"""
Wire format of transmission frames.

Header (little endian): magic ``J3CF``, version byte, round byte, role byte,
active length as uint32, R and SNR as float32. The payload holds the active
symbols as float32.
"""
import struct
from dataclasses import dataclass
from dataclasses import field

import numpy as np

from semharq.errors import FrameError

MAGIC = b"J3CF"
VERSION = 1
HEADER = struct.Struct("<4sBBBIff")
ROLES = {"jscc": 0, "check": 1, "nak": 2}
ROLE_NAMES = {v: k for k, v in ROLES.items()}


@dataclass(eq=False)
class Frame:
    """
    One transmitted codeword or a NAK event.

    Parameters
    ----------
    round_number : int
        1 for the initial round, 2 for the retransmission.
    role : str
        ``"jscc"``, ``"check"`` or ``"nak"``.
    ratio : float
        Compression ratio of the round.
    snr_db : float
        SNR of the round.
    payload : numpy.ndarray
        Active symbols; empty for NAK frames.
    """

    round_number: int
    role: str
    ratio: float
    snr_db: float
    payload: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype="<f4"))

    def __post_init__(self):
        if self.round_number not in (1, 2):
            raise FrameError(f"Round must be 1 or 2, got {self.round_number}.")
        if self.role not in ROLES:
            raise FrameError(f"Unknown frame role '{self.role}'.")
        self.payload = np.ascontiguousarray(np.asarray(self.payload).reshape(-1), dtype="<f4")
        if self.role == "nak" and self.payload.size:
            raise FrameError("NAK frames carry no payload.")
        # header fields travel as float32
        self.ratio = float(np.float32(self.ratio))
        self.snr_db = float(np.float32(self.snr_db))

    @classmethod
    def from_codeword(cls, round_number, role, values, active_count, ratio, snr_db):
        """Frame carrying the leading ``active_count`` symbols of ``values``."""
        values = np.asarray(values).reshape(-1)
        return cls(round_number, role, ratio, snr_db, values[:active_count])

    @classmethod
    def nak(cls, ratio, snr_db):
        """Feedback frame requesting the retransmission round."""
        return cls(2, "nak", ratio, snr_db)

    @property
    def active_length(self):
        return self.payload.size

    def symbols(self, length=None):
        """Payload as float64, zero padded to ``length``."""
        length = self.active_length if length is None else length
        out = np.zeros(length)
        out[:self.active_length] = self.payload
        return out

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return serialize(self) == serialize(other)

    def __repr__(self):
        return (
            f"Frame(round={self.round_number}, role={self.role!r}, R={self.ratio:.4f}, "
            f"snr_db={self.snr_db:.2f}, length={self.active_length})"
        )


def serialize(frame):
    """Encode ``frame`` into bytes."""
    header = HEADER.pack(
        MAGIC, VERSION, frame.round_number, ROLES[frame.role],
        frame.active_length, frame.ratio, frame.snr_db,
    )
    return header + frame.payload.tobytes()


def parse(blob):
    """
    Decode bytes produced by :func:`serialize`.

    Raises
    ------
    FrameError
        On a short header, wrong magic, version or role, or a payload whose
        length differs from the header's active length.
    """
    if len(blob) < HEADER.size:
        raise FrameError(f"Frame of {len(blob)} bytes is shorter than the {HEADER.size}-byte header.")
    magic, version, round_number, role, length, ratio, snr_db = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FrameError(f"Bad frame magic {magic!r}.")
    if version != VERSION:
        raise FrameError(f"Unsupported frame version {version}.")
    if role not in ROLE_NAMES:
        raise FrameError(f"Unknown frame role byte {role}.")
    payload = blob[HEADER.size:]
    if len(payload) != 4 * length:
        raise FrameError(
            f"Payload length mismatch: header announces {length} symbols, found {len(payload) / 4:g}."
        )
    return Frame(round_number, ROLE_NAMES[role], ratio, snr_db, np.frombuffer(payload, dtype="<f4"))


def frame_roundtrip(frame):
    """Serialize and parse ``frame``."""
    return parse(serialize(frame))
