from dataclasses import dataclass

import numpy as np

from semharq.codec import SNR_SCALE
from semharq.errors import ContractError

# reward table of the retransmission decision
REWARD_RECOVERED = 10.0
REWARD_ACCEPTED = 0.5
REWARD_FAILED_RETRY = -0.5
REWARD_MISSED = -5.0
REWARD_WASTED = -1.0


@dataclass
class AgentState:
    r"""
    Decision input of the retransmission agent.

    Attributes
    ----------
    snr_db : float
        Channel SNR.
    ratio : float
        Compression ratio of the initial round.
    threshold : float
        Perceptual score threshold.
    estimate : float
        Receiver-side quality estimate.
    deviation : float
        ``estimate - threshold``.
    check_codeword : numpy.ndarray
        Received, equalized check codeword of length ``k``.
    """

    snr_db: float
    ratio: float
    threshold: float
    estimate: float
    deviation: float
    check_codeword: np.ndarray

    def groups(self):
        """
        Inputs grouped by their physical meaning.

        Returns
        -------
        dict
            ``channel`` (scaled SNR, R), ``quality`` (threshold, estimate,
            deviation) and ``codeword`` (the received check codeword).
        """
        return {
            "channel": np.array([self.snr_db / SNR_SCALE, self.ratio]),
            "quality": np.array([self.threshold, self.estimate, self.deviation]),
            "codeword": np.asarray(self.check_codeword, dtype=np.float64).reshape(-1),
        }


def build_state(record, threshold):
    """
    Assemble the agent state after the initial round.

    Parameters
    ----------
    record : TransmissionRecord
        Record holding the round-one estimate and received check codeword.
    threshold : float
        Perceptual score threshold.

    Returns
    -------
    AgentState
    """
    estimate = float(record.estimate)
    return AgentState(
        snr_db=float(record.snr_db),
        ratio=float(record.ratio),
        threshold=float(threshold),
        estimate=estimate,
        deviation=estimate - float(threshold),
        check_codeword=np.array(record.check_received, dtype=np.float64),
    )


def stack_groups(states):
    """Batch the groups of several states into matrices."""
    groups = [s.groups() for s in states]
    return {key: np.stack([g[key] for g in groups]) for key in groups[0]}


def reward(score_r1, score_r2, action, threshold):
    r"""
    Sparse reward of one retransmission decision.

    ============================  ======  ======
    case                          action  reward
    ============================  ======  ======
    fail, recovered               1       +10.0
    pass                          0       +0.5
    fail, still failing           1       -0.5
    fail                          0       -5.0
    pass                          1       -1.0
    ============================  ======  ======

    A sample fails when its score exceeds ``threshold``.

    Raises
    ------
    ContractError
        If ``action`` is 1 and ``score_r2`` is missing.

    Examples
    --------
    >>> reward(0.4, 0.2, 1, 0.3)
    10.0
    >>> reward(0.2, None, 0, 0.3)
    0.5
    """
    if action not in (0, 1):
        raise ContractError(f"Action must be 0 or 1, got {action}.")
    failed = score_r1 > threshold
    if action == 0:
        return REWARD_MISSED if failed else REWARD_ACCEPTED
    if score_r2 is None:
        raise ContractError("A retransmission needs the post-retransmission score.")
    if not failed:
        return REWARD_WASTED
    return REWARD_RECOVERED if score_r2 <= threshold else REWARD_FAILED_RETRY
