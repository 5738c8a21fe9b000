r"""
Transmission state machine.

One sample goes through the initial round, a retransmission decision and at
most one retransmission. Every codeword crosses the link as a serialized
:class:`~semharq.harq.frames.Frame`; the receiver keeps the equalized round-one
codewords for joint decoding after the retransmission.
"""
import logging
from dataclasses import dataclass
from dataclasses import field
from typing import NamedTuple

import numpy as np

from semharq.agent.state import reward
from semharq.codec import adaptive_mask
from semharq.codec import check_encode
from semharq.codec import encode
from semharq.codec import estimate_quality
from semharq.codec import joint_decode
from semharq.codec import power_normalize
from semharq.errors import ProtocolError
from semharq.functions import perceptual_score
from semharq.functions import psnr
from semharq.harq.frames import Frame
from semharq.harq.frames import parse
from semharq.harq.frames import serialize
from semharq.harq.retx import refine_features
from semharq.harq.retx import second_check_encode
from semharq.harq.retx import second_estimate
from semharq.harq.retx import second_joint_decode

ROUND_TWO_FIELDS = (
    "z2_sent", "z2_received", "check2_sent", "check2_received",
    "reconstruction2", "score_r2", "psnr_r2", "estimate_r2",
)


@dataclass
class TransmissionRecord:
    """
    Full trace of one sample's transmission.

    Round-two fields are ``None`` unless ``action`` is 1.
    """

    sample_id: int
    snr_db: float
    ratio: float
    ratio2: float
    policy: str = ""
    seed: int = 0
    K_mask: int = 0
    k: int = 0
    z_sent: np.ndarray = None
    z_received: np.ndarray = None
    check_sent: np.ndarray = None
    check_received: np.ndarray = None
    scale_z: float = 1.0
    scale_check: float = 1.0
    gain: float = 1.0
    reconstruction: np.ndarray = None
    score_r1: float = float("nan")
    psnr_r1: float = float("nan")
    estimate: float = float("nan")
    threshold: float = float("nan")
    action: int = 0
    log_prob: float = float("nan")
    value: float = float("nan")
    K2_mask: int = 0
    z2_sent: np.ndarray = None
    z2_received: np.ndarray = None
    check2_sent: np.ndarray = None
    check2_received: np.ndarray = None
    gain2: float = float("nan")
    reconstruction2: np.ndarray = None
    score_r2: float = None
    psnr_r2: float = None
    estimate_r2: float = None
    reward: float = float("nan")
    final_psnr: float = float("nan")
    final_score: float = float("nan")
    symbols_sent: int = 0
    frames: list = field(default_factory=list, repr=False)

    def check(self):
        """
        Assert the record invariants.

        Raises
        ------
        ProtocolError
            If round-two fields disagree with the action or the symbol count
            is wrong.
        """
        present = [getattr(self, name) is not None for name in ROUND_TWO_FIELDS]
        if self.action == 1 and not all(present):
            raise ProtocolError(f"Sample {self.sample_id}: retransmitted without round-two results.")
        if self.action == 0 and any(present):
            raise ProtocolError(f"Sample {self.sample_id}: round-two results without retransmission.")
        expected = self.K_mask + self.k + (self.K2_mask + self.k if self.action == 1 else 0)
        if self.symbols_sent != expected:
            raise ProtocolError(
                f"Sample {self.sample_id}: {self.symbols_sent} symbols accounted, expected {expected}."
            )
        return self

    def to_row(self):
        """Scalar fields as one flat dictionary (one ``records.csv`` row)."""
        missing = float("nan")
        return {
            "policy": self.policy,
            "seed": self.seed,
            "sample_id": self.sample_id,
            "snr_db": self.snr_db,
            "R": self.ratio,
            "R2": self.ratio2,
            "K_mask": self.K_mask,
            "k": self.k,
            "gain": self.gain,
            "estimate": self.estimate,
            "threshold": self.threshold,
            "score_r1": self.score_r1,
            "psnr_r1": self.psnr_r1,
            "action": self.action,
            "K2_mask": self.K2_mask if self.action else 0,
            "gain2": self.gain2,
            "estimate_r2": missing if self.estimate_r2 is None else self.estimate_r2,
            "score_r2": missing if self.score_r2 is None else self.score_r2,
            "psnr_r2": missing if self.psnr_r2 is None else self.psnr_r2,
            "reward": self.reward,
            "final_psnr": self.final_psnr,
            "final_score": self.final_score,
            "symbols_sent": self.symbols_sent,
        }


RECORD_COLUMNS = tuple(TransmissionRecord(0, 0.0, 1.0, 1.0).to_row())


class InitialRound(NamedTuple):
    z_received: np.ndarray
    check_received: np.ndarray
    reconstruction: np.ndarray
    estimate: float
    record: TransmissionRecord
    features: np.ndarray


class HarqSystem:
    """
    Trained link with everything a transmission needs.

    Parameters
    ----------
    codec : semharq.codec.CodecBundle
        Base system.
    retx : semharq.harq.retx.RetxBundle
        Retransmission modules.
    channel : semharq.channel.Channel
        Physical channel.
    projector : semharq.functions.PerceptualProjector
        Ground-truth perceptual score.
    threshold : float
        Perceptual score threshold.
    """

    def __init__(self, codec, retx, channel, projector, threshold):
        if (codec.K, codec.k) != (retx.K, retx.k):
            raise ProtocolError(
                f"Codec (K={codec.K}, k={codec.k}) and retransmission modules "
                f"(K={retx.K}, k={retx.k}) do not match."
            )
        self.codec = codec
        self.retx = retx
        self.channel = channel
        self.projector = projector
        self.threshold = float(threshold)

    def __repr__(self):
        return (
            f"HarqSystem(K={self.codec.K}, k={self.codec.k}, channel={self.channel.kind!r}, "
            f"threshold={self.threshold:.4f})"
        )


def _send(frame, channel, realization, rng, length):
    """Put a frame on the air: serialize, parse, add channel noise, pad to ``length``."""
    received = parse(serialize(frame))
    return channel.transmit(received.symbols(length), realization, rng, received.active_length)


def initial_round(codec, channel, p, R, snr_db, rng, *, projector, sample_id=0, frame_log=None):
    """
    First transmission round.

    Runs encode, mask, check encoding, power normalization, the channel for
    both codewords (one shared realization), joint decoding and quality
    estimation.

    Parameters
    ----------
    codec : CodecBundle
        Trained base system.
    channel : Channel
        Physical channel.
    p : Image or array_like
        Source image.
    R : float
        Compression ratio.
    snr_db : float
        Channel SNR.
    rng : numpy.random.Generator
        Stream for fading and noise.
    projector : PerceptualProjector
        Ground-truth score.

    Returns
    -------
    InitialRound
    """
    pixels = np.asarray(getattr(p, "vector", p), dtype=np.float64).reshape(-1)
    frames = [] if frame_log is None else frame_log
    x = encode(codec, pixels, R, snr_db)
    masked = adaptive_mask(x, R)
    check = check_encode(codec, x, R, snr_db)
    z, scale_z = power_normalize(masked.values, masked.active_count)
    c, scale_c = power_normalize(check.sample)

    z_frame = Frame.from_codeword(1, "jscc", z.data, masked.active_count, R, snr_db)
    c_frame = Frame.from_codeword(1, "check", c.data, codec.k, R, snr_db)
    frames.extend([z_frame, c_frame])
    realization = channel.realize(snr_db, rng)
    z_rx = _send(z_frame, channel, realization, rng, codec.K)
    c_rx = _send(c_frame, channel, realization, rng, codec.k)

    reconstruction = joint_decode(codec, z_rx, c_rx, snr_db).data[0]
    estimate = float(estimate_quality(codec, z_rx, c_rx, snr_db, R).data[0])
    record = TransmissionRecord(
        sample_id=sample_id,
        snr_db=float(snr_db),
        ratio=float(R),
        ratio2=float("nan"),
        K_mask=masked.active_count,
        k=codec.k,
        z_sent=z_frame.symbols(codec.K),
        z_received=z_rx,
        check_sent=c_frame.symbols(codec.k),
        check_received=c_rx,
        scale_z=float(scale_z[0]),
        scale_check=float(scale_c[0]),
        gain=float(realization.gain),
        reconstruction=reconstruction,
        score_r1=perceptual_score(pixels, reconstruction, projector),
        psnr_r1=psnr(pixels, reconstruction),
        estimate=estimate,
        frames=frames,
    )
    return InitialRound(z_rx, c_rx, reconstruction, estimate, record, x.data[0])


def retransmission_round(codec, retx, channel, p, x, estimate, R2, snr_db, rng, *,
                         record, projector, frame_log=None):
    """
    Recovery-refinement retransmission.

    The transmitter re-encodes its retained features ``x``, removes what the
    receiver already holds and builds a second check codeword that also reads
    the fed back ``estimate``. The receiver decodes from all four codewords.

    Parameters
    ----------
    x : numpy.ndarray or None
        Semantic features retained by the transmitter after round one.
    estimate : float
        Round-one quality estimate fed back with the NAK.
    record : TransmissionRecord
        Round-one record, completed in place.

    Returns
    -------
    tuple
        ``(reconstruction2, record)``.

    Raises
    ------
    ProtocolError
        If the transmitter holds no features for the sample.
    """
    if x is None:
        raise ProtocolError(f"Sample {record.sample_id}: no retained features for retransmission.")
    if record.z_received is None or record.check_received is None:
        raise ProtocolError(f"Sample {record.sample_id}: receiver holds no round-one codewords.")
    frames = record.frames if frame_log is None else frame_log
    x = np.asarray(x, dtype=np.float64)
    x_sec = refine_features(retx, x, R2, snr_db)
    masked = adaptive_mask(x_sec, R2)
    check = second_check_encode(retx, x, x_sec, R2, snr_db, estimate)
    z2, _ = power_normalize(masked.values, masked.active_count)
    c2, _ = power_normalize(check.sample)

    z_frame = Frame.from_codeword(2, "jscc", z2.data, masked.active_count, R2, snr_db)
    c_frame = Frame.from_codeword(2, "check", c2.data, retx.k, R2, snr_db)
    frames.extend([z_frame, c_frame])
    realization = channel.realize(snr_db, rng)
    z2_rx = _send(z_frame, channel, realization, rng, retx.K)
    c2_rx = _send(c_frame, channel, realization, rng, retx.k)

    z1_rx, c1_rx = record.z_received, record.check_received
    reconstruction2 = second_joint_decode(retx, z1_rx, c1_rx, z2_rx, c2_rx, snr_db).data[0]
    pixels = np.asarray(getattr(p, "vector", p), dtype=np.float64).reshape(-1)

    record.ratio2 = float(R2)
    record.K2_mask = masked.active_count
    record.z2_sent = z_frame.symbols(retx.K)
    record.z2_received = z2_rx
    record.check2_sent = c_frame.symbols(retx.k)
    record.check2_received = c2_rx
    record.gain2 = float(realization.gain)
    record.reconstruction2 = reconstruction2
    record.estimate_r2 = float(second_estimate(retx, z1_rx, c1_rx, z2_rx, c2_rx, snr_db, R2).data[0])
    record.score_r2 = perceptual_score(pixels, reconstruction2, projector)
    record.psnr_r2 = psnr(pixels, reconstruction2)
    return reconstruction2, record


def run_transmission(system, p, snr_db, R, R2, policy, rng, sample_id=0, seed=0):
    """
    Transmit one sample with at most one retransmission.

    ``rng`` is split into three independent streams: round one, the policy
    decision and round two. The same ``snr_db`` governs both rounds.

    Parameters
    ----------
    system : HarqSystem
        Trained link.
    p : Image or array_like
        Source image.
    snr_db : float
        Channel SNR.
    R, R2 : float
        Compression ratios of the two rounds.
    policy : semharq.policies.Policy
        Retransmission decision rule.
    rng : numpy.random.Generator
        Per-sample stream.

    Returns
    -------
    TransmissionRecord
        Completed and checked record.
    """
    round_one_rng, decision_rng, round_two_rng = rng.spawn(3)
    first = initial_round(
        system.codec, system.channel, p, R, snr_db, round_one_rng,
        projector=system.projector, sample_id=sample_id,
    )
    record = first.record
    record.policy = policy.label
    record.seed = seed
    record.threshold = system.threshold
    record.ratio2 = float(R2)
    record.action = int(policy.decide(record, decision_rng))

    if record.action == 1:
        logging.debug(f"Sample {sample_id}: NAK at {snr_db} dB with estimate {record.estimate:.4f}.")
        record.frames.append(Frame.nak(R2, snr_db))
        retransmission_round(
            system.codec, system.retx, system.channel, p, first.features, first.estimate,
            R2, snr_db, round_two_rng, record=record, projector=system.projector,
        )
        record.final_psnr, record.final_score = record.psnr_r2, record.score_r2
        record.symbols_sent = record.K_mask + record.k + record.K2_mask + record.k
    else:
        record.final_psnr, record.final_score = record.psnr_r1, record.score_r1
        record.symbols_sent = record.K_mask + record.k
    record.reward = reward(record.score_r1, record.score_r2, record.action, system.threshold)
    return record.check()
