import logging

from semharq.errors import ConfigurationError
from semharq.policies.policy import Policy
from semharq.policies.policy import policy_registry


@policy_registry
class NeverRetransmit(Policy):
    """Accept every initial reconstruction."""

    kind = "none"

    def decide(self, record, rng):
        return 0


@policy_registry
class AlwaysRetransmit(Policy):
    """Retransmit every sample."""

    kind = "always"

    def decide(self, record, rng):
        return 1


@policy_registry
class ThresholdPolicy(Policy):
    r"""
    Fixed rule on the receiver's quality estimate.

    Retransmit when :math:`\hat{s} > \theta \cdot \mathrm{scale}`. The scale
    may be one number or a mapping from SNR to scale, in which case the
    entry of the record's SNR is used.

    Parameters
    ----------
    threshold : float
        Perceptual score threshold :math:`\theta`.
    scale : float or dict, optional
        Multiplicative threshold scale, strictly positive (default 1).
    """

    kind = "threshold"

    def __init__(self, **kwargs):
        kwargs.setdefault("scale", 1.0)
        super().__init__(**kwargs)
        if "threshold" not in self.__dict__:
            raise ConfigurationError("Threshold policy needs a 'threshold'.")
        scales = self.scale.values() if isinstance(self.scale, dict) else [self.scale]
        if any(s <= 0 for s in scales):
            raise ConfigurationError(f"Threshold scale must be strictly positive, got {self.scale}.")

    def scale_at(self, snr_db):
        if not isinstance(self.scale, dict):
            return self.scale
        try:
            return self.scale[float(snr_db)]
        except KeyError:
            calibrated = ", ".join(f"{s:g}" for s in sorted(self.scale))
            msg = f"Threshold scale is calibrated at {calibrated} dB only, not at {snr_db:g} dB."
            logging.error(msg)
            raise ConfigurationError(msg) from None

    def decide(self, record, rng):
        return int(record.estimate > self.threshold * self.scale_at(record.snr_db))


@policy_registry
class OraclePolicy(Policy):
    """Retransmit iff the true round-one score exceeds the threshold (evaluation only)."""

    kind = "oracle"

    def decide(self, record, rng):
        return int(record.score_r1 > record.threshold)


@policy_registry
class RandomPolicy(Policy):
    """
    Retransmit with fixed probability.

    Parameters
    ----------
    probability : float, optional
        Retransmission probability in [0, 1] (default 0.5).
    """

    kind = "random"

    def __init__(self, **kwargs):
        kwargs.setdefault("probability", 0.5)
        super().__init__(**kwargs)
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigurationError(f"Retransmission probability {self.probability} outside [0, 1].")

    def decide(self, record, rng):
        return int(rng.random() < self.probability)
