r"""
Physical channel models.

Symbols are real valued and power normalized to unit average power over the
active positions. The received signal of one round is

.. math::

    \tilde{z} = \frac{h z + n}{h} = z + \frac{n}{h},
    \qquad n \sim \mathcal{N}(0, \sigma^2),
    \qquad \sigma = \sqrt{10^{-\mathrm{SNR}/10}}

with :math:`h = 1` for AWGN and a Rayleigh distributed block-fading gain with
:math:`E[h^2] = 1` otherwise. The receiver has perfect channel state
information and equalizes coherently.
"""
from dataclasses import dataclass

import numpy as np

from semharq.errors import ConfigurationError

KINDS = ("awgn", "rayleigh")


def snr_to_noise_std(snr_db):
    r"""
    Noise standard deviation for unit signal power.

    Examples
    --------
    >>> snr_to_noise_std(0.0)
    1.0
    >>> round(snr_to_noise_std(13.0), 4)
    0.2239
    """
    if not np.all(np.isfinite(snr_db)):
        raise ConfigurationError(f"SNR must be finite, got {snr_db}.")
    return float(np.sqrt(10.0 ** (-np.asarray(snr_db, dtype=np.float64) / 10.0)))


@dataclass
class ChannelRealization:
    """
    One block-fading channel use.

    ``gain`` is a float for a single codeword or an array of shape ``(B, 1)``
    holding one gain per row of a batch.
    """

    kind: str
    snr_db: float
    gain: object
    noise_std: float
    stream: int = 0

    @property
    def effective_noise_std(self):
        """Noise standard deviation after equalization."""
        return self.noise_std / np.asarray(self.gain)


class Channel:
    """
    AWGN or block-fading Rayleigh channel.

    Parameters
    ----------
    kind : str
        ``"awgn"`` or ``"rayleigh"``.
    """

    def __init__(self, kind="awgn"):
        if kind not in KINDS:
            raise ConfigurationError(f"Unknown channel kind '{kind}'. Choose one of {KINDS}.")
        self.kind = kind

    def __repr__(self):
        return f"Channel(kind={self.kind!r})"

    def realize(self, snr_db, rng, batch=None, stream=0):
        """
        Draw the fading gain of one round.

        Parameters
        ----------
        snr_db : float
            Configured SNR.
        rng : numpy.random.Generator
            Stream for the fading draw.
        batch : int, optional
            Draw one independent gain per row of a batch.
        """
        shape = None if batch is None else (batch, 1)
        if self.kind == "awgn":
            gain = 1.0 if shape is None else np.ones(shape)
        else:
            # scale 1/sqrt(2) gives E[h^2] = 1
            gain = rng.rayleigh(scale=1.0 / np.sqrt(2.0), size=shape)
            gain = float(gain) if shape is None else gain
        return ChannelRealization(self.kind, float(snr_db), gain, snr_to_noise_std(snr_db), stream)

    def transmit(self, c, realization, rng, active_count=None):
        """
        Send power-normalized codewords through one realization.

        Parameters
        ----------
        c : numpy.ndarray or Tensor
            Codewords of shape ``(n,)`` or ``(B, n)``.
        realization : ChannelRealization
            Gain and noise level of the round.
        rng : numpy.random.Generator
            Noise stream.
        active_count : int, optional
            Number of leading transmitted symbols; the remaining positions are
            not sent and arrive as exact zeros.

        Returns
        -------
        numpy.ndarray or Tensor
            Equalized received symbols, of the same type as ``c``.
        """
        shape = c.shape
        n = shape[-1] if active_count is None else int(active_count)
        noise = np.zeros(shape)
        noise[..., :n] = rng.normal(0.0, 1.0, size=shape[:-1] + (n,))
        noise = noise * realization.effective_noise_std
        if active_count is None:
            return c + noise
        mask = np.zeros(shape)
        mask[..., :n] = 1.0
        return (c + noise) * mask


def transmit(c, realization, rng, active_count=None):
    """Module-level shortcut for :meth:`Channel.transmit`."""
    return Channel(realization.kind).transmit(c, realization, rng, active_count)


def empirical_snr_db(sent, received, gain=1.0):
    """
    Measured SNR of a transmission, conditional on the fading gain.

    The noise after equalization is scaled back by ``gain`` so that the result
    is comparable with the configured SNR for both channel kinds.
    """
    sent = np.asarray(sent, dtype=np.float64)
    noise = (np.asarray(received, dtype=np.float64) - sent) * np.asarray(gain)
    return float(10.0 * np.log10(np.mean(sent ** 2) / np.mean(noise ** 2)))
