r"""
Joint source-channel-check coding chain.

All operations take batches: arrays or :class:`~semharq.autodiff.Tensor`
objects of shape ``(B, n)``. A 1-D input is treated as a batch of one. The
outputs are tensors so that the training stages can differentiate through the
whole chain; evaluation code reads ``.data``.
"""
import logging
import math
from dataclasses import dataclass
from dataclasses import field

import numpy as np

from semharq.autodiff import Mlp
from semharq.autodiff import Tensor
from semharq.autodiff import concat
from semharq.autodiff.checkpoint import load_checkpoint
from semharq.autodiff.checkpoint import save_checkpoint
from semharq.autodiff.tensor import as_tensor
from semharq.errors import CheckpointError
from semharq.errors import ConfigurationError
from semharq.errors import DegenerateCodewordError
from semharq.errors import DimensionError
from semharq.errors import DomainError

SNR_SCALE = 13.0
SIGMA_FLOOR = 1e-6
COMPONENTS = ("enc", "chk", "dec", "est")


def rows(value):
    """Promote a vector to a one-row batch."""
    value = as_tensor(value)
    return value.reshape(1, -1) if value.ndim == 1 else value


def condition(batch, *scalars):
    """
    Constant ``(B, len(scalars))`` block of conditioning inputs.

    Each scalar may be a number or a length-``B`` array.
    """
    cols = [np.broadcast_to(np.asarray(s, dtype=np.float64).reshape(-1), (batch,)) for s in scalars]
    return Tensor(np.stack(cols, axis=1))


def mask_size(K, R):
    r"""Number of transmitted symbols :math:`\lceil K R \rceil`."""
    if not 0.0 < R <= 1.0:
        raise ConfigurationError(f"Compression ratio R={R} outside (0, 1].")
    # rounding keeps K*R = 4.000000000000001 from turning into 5
    return max(1, math.ceil(round(K * R, 9)))


@dataclass
class MaskedCodeword:
    """Masked feature batch; entries beyond ``active_count`` are exactly 0."""

    values: Tensor
    active_count: int
    ratio: float


@dataclass
class CheckCodeword:
    """Reparameterized Gaussian check codeword ``sample = mu + sigma * eps``."""

    mu: Tensor
    sigma: Tensor
    sample: Tensor


@dataclass
class CodecBundle:
    r"""
    Learned components of the base link.

    Parameters
    ----------
    encoder : Mlp
        :math:`D + 2 \to K`, input pixels, R and SNR.
    check_encoder : Mlp
        :math:`K + 2 \to 2k`, emits mean and raw scale of the check codeword.
    joint_decoder : Mlp
        :math:`K + k + 1 \to D` with sigmoid output.
    estimator : Mlp
        :math:`K + k + 2 \to 1` with sigmoid output.
    K, k : int
        Feature and check codeword lengths.
    image_shape : tuple of int
        ``(c, h, w)``.
    frozen : set of str
        Component keys excluded from training.
    """

    encoder: Mlp
    check_encoder: Mlp
    joint_decoder: Mlp
    estimator: Mlp
    K: int
    k: int
    image_shape: tuple
    frozen: set = field(default_factory=set)

    def __post_init__(self):
        D = int(np.prod(self.image_shape))
        expected = {
            "enc": (D + 2, self.K),
            "chk": (self.K + 2, 2 * self.k),
            "dec": (self.K + self.k + 1, D),
            "est": (self.K + self.k + 2, 1),
        }
        for key, (n_in, n_out) in expected.items():
            net = self.components[key]
            if (net.input_dim, net.output_dim) != (n_in, n_out):
                raise ConfigurationError(
                    f"Component '{key}' maps {net.input_dim} -> {net.output_dim}, "
                    f"expected {n_in} -> {n_out}."
                )

    @classmethod
    def build(cls, K, k, image_shape, width=256, depth=3, seed=0):
        """
        Create a freshly initialised bundle.

        ``depth`` counts the affine layers of every component.
        """
        if K <= 0 or k <= 0 or depth < 1 or width <= 0:
            raise ConfigurationError(f"Invalid codec sizes K={K}, k={k}, width={width}, depth={depth}.")
        D = int(np.prod(image_shape))

        def sizes(n_in, n_out):
            return [n_in] + [width] * (depth - 1) + [n_out]

        return cls(
            encoder=Mlp.build(sizes(D + 2, K), seed=[seed, 0], name="enc"),
            check_encoder=Mlp.build(sizes(K + 2, 2 * k), seed=[seed, 1], name="chk"),
            joint_decoder=Mlp.build(
                sizes(K + k + 1, D), output_activation="sigmoid", seed=[seed, 2], name="dec"
            ),
            estimator=Mlp.build(
                sizes(K + k + 2, 1), output_activation="sigmoid", seed=[seed, 3], name="est"
            ),
            K=K,
            k=k,
            image_shape=tuple(image_shape),
        )

    @classmethod
    def from_config(cls, config):
        """Build from a :class:`~semharq.config.RunConfig`."""
        data, codec = config.data, config.codec
        return cls.build(
            codec.feature_dim, codec.check_dim, (data.channels, data.height, data.width),
            codec.hidden_width, codec.depth, seed=config.train.seed,
        )

    @property
    def components(self):
        return {
            "enc": self.encoder,
            "chk": self.check_encoder,
            "dec": self.joint_decoder,
            "est": self.estimator,
        }

    @property
    def pixel_count(self):
        return int(np.prod(self.image_shape))

    def parameters(self, names=None):
        """Parameters of the selected components (default: all but frozen)."""
        if names is None:
            names = [n for n in COMPONENTS if n not in self.frozen]
        params = {}
        for name in names:
            params.update(self.components[name].parameters())
        return params

    def state_dict(self):
        state = {"meta.codec": np.array([self.K, self.k, *self.image_shape], dtype=np.float64)}
        for net in self.components.values():
            state.update(net.state_dict())
        return state

    def load_state_dict(self, state):
        """
        Restore parameters from a checkpoint mapping.

        Raises
        ------
        CheckpointError
            If the stored K, k or image shape differ from this bundle's.
        """
        if "meta.codec" not in state:
            raise CheckpointError("Checkpoint holds no codec parameters.")
        stored = [int(v) for v in state["meta.codec"]]
        if stored[:2] != [self.K, self.k]:
            raise CheckpointError(
                f"Checkpoint has K={stored[0]}, k={stored[1]}; configuration has K={self.K}, k={self.k}."
            )
        if tuple(stored[2:]) != tuple(self.image_shape):
            raise CheckpointError(
                f"Checkpoint image shape {tuple(stored[2:])} differs from configured {self.image_shape}."
            )
        try:
            for net in self.components.values():
                net.load_state_dict(state)
        except ConfigurationError as e:
            raise CheckpointError(f"Checkpoint does not fit the codec: {e}") from e

    def save(self, path, extra=None):
        state = self.state_dict()
        state.update(extra or {})
        save_checkpoint(state, path)

    def load(self, path):
        self.load_state_dict(load_checkpoint(path))
        logging.info(f"Loaded codec parameters from {path}.")
        return self


def encode(bundle, images, R, snr_db):
    r"""
    Semantic encoder :math:`x = f_\mathrm{en}(p, R, \mathrm{SNR})`.

    ``R`` and ``snr_db / 13`` are appended to the flattened pixels.

    Returns
    -------
    Tensor
        Features of shape ``(B, K)``.
    """
    p = rows(getattr(images, "vector", images))
    if p.shape[1] != bundle.pixel_count:
        raise DimensionError(f"Encoder expects {bundle.pixel_count} pixels, got {p.shape[1]}.")
    return bundle.encoder(concat([p, condition(p.shape[0], R, np.asarray(snr_db) / SNR_SCALE)]))


def adaptive_mask(x, R):
    r"""
    Keep the first :math:`K_\mathrm{mask} = \lceil K R \rceil` features.

    Parameters
    ----------
    x : Tensor or array_like
        Features of shape ``(B, K)``.
    R : float
        Compression ratio in :math:`(0, 1]`.

    Returns
    -------
    MaskedCodeword
    """
    x = rows(x)
    K = x.shape[1]
    active = mask_size(K, R)
    mask = np.zeros(K)
    mask[:active] = 1.0
    return MaskedCodeword(x * mask, active, float(R))


def power_normalize(c, active_count=None):
    r"""
    Scale every row to unit mean power over its active symbols.

    Parameters
    ----------
    c : Tensor or array_like
        Codewords of shape ``(B, n)``.
    active_count : int, optional
        Number of leading active symbols, all of them by default.

    Returns
    -------
    tuple
        ``(normalized, scale)`` where ``normalized * scale`` restores ``c`` and
        ``scale`` has shape ``(B,)``.

    Raises
    ------
    DegenerateCodewordError
        If a row has no power on its active symbols.
    """
    c = rows(c)
    n = c.shape[1] if active_count is None else int(active_count)
    power = (c[:, :n] * c[:, :n]).sum(axis=1, keepdims=True) * (1.0 / n)
    if np.any(power.data <= 0.0):
        raise DegenerateCodewordError("Cannot normalize a codeword with zero power on its active symbols.")
    scale = power ** 0.5
    return c / scale, scale.data.reshape(-1)


def check_encode(bundle, x, R, snr_db, rng=None, training=False):
    r"""
    Check encoder producing a reparameterized Gaussian codeword.

    .. math::

        \mu, \rho = f_\mathrm{com}(x, R, \mathrm{SNR}) \qquad
        \sigma = \mathrm{softplus}(\rho) + 10^{-6} \qquad
        x_\mathrm{com} = \mu + \sigma \odot \varepsilon

    The network sees the semantic features only, never the source image.
    :math:`\varepsilon \sim \mathcal{N}(0, I)` while training and 0 otherwise.
    """
    x = rows(x)
    if x.shape[1] != bundle.K:
        raise DimensionError(f"Check encoder expects K={bundle.K} features, got {x.shape[1]}.")
    out = bundle.check_encoder(concat([x, condition(x.shape[0], R, np.asarray(snr_db) / SNR_SCALE)]))
    mu = out[:, :bundle.k]
    sigma = out[:, bundle.k:].softplus() + SIGMA_FLOOR
    if training:
        if rng is None:
            raise ConfigurationError("Training-mode check encoding needs an rng.")
        sample = mu + sigma * rng.standard_normal(mu.shape)
    else:
        sample = mu
    return CheckCodeword(mu, sigma, sample)


def kl_to_standard_normal(mu, sigma):
    r"""
    Closed-form :math:`\mathrm{KL}(\mathcal{N}(\mu, \sigma^2) \,\|\, \mathcal{N}(0, I))`.

    .. math::

        \sum_j \frac{\mu_j^2 + \sigma_j^2 - 1}{2} - \log \sigma_j

    Returns
    -------
    Tensor
        Sum over the last axis.

    Raises
    ------
    DomainError
        If any sigma is not strictly positive.
    """
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    if np.any(sigma.data <= 0.0):
        raise DomainError("KL divergence needs strictly positive sigma.")
    return ((mu * mu + sigma * sigma - 1.0) * 0.5 - sigma.log()).sum(axis=-1)


def _received(bundle, z, c):
    z, c = rows(z), rows(c)
    if z.shape[1] != bundle.K or c.shape[1] != bundle.k:
        raise DimensionError(
            f"Decoder expects codewords of length K={bundle.K} and k={bundle.k}, "
            f"got {z.shape[1]} and {c.shape[1]}."
        )
    if z.shape[0] != c.shape[0]:
        raise DimensionError(f"Codeword batches differ: {z.shape[0]} and {c.shape[0]}.")
    return z, c


def joint_decode(bundle, z_received, check_received, snr_db):
    r"""
    Cooperative decoder reading both received codewords.

    Returns
    -------
    Tensor
        Reconstructed pixels of shape ``(B, D)`` clipped to :math:`[0, 1]`.
    """
    z, c = _received(bundle, z_received, check_received)
    out = bundle.joint_decoder(concat([z, c, condition(z.shape[0], np.asarray(snr_db) / SNR_SCALE)]))
    return out.clip(0.0, 1.0)


def estimate_quality(bundle, z_received, check_received, snr_db, R):
    """
    Receiver-side estimate of the perceptual score of the reconstruction.

    Returns
    -------
    Tensor
        Estimates of shape ``(B,)`` in :math:`(0, 1)`.
    """
    z, c = _received(bundle, z_received, check_received)
    out = bundle.estimator(concat([z, c, condition(z.shape[0], np.asarray(snr_db) / SNR_SCALE, R)]))
    return out.reshape(-1)


@dataclass
class LossBatch:
    """Inputs of :func:`ib_loss` for ``B`` samples."""

    images: np.ndarray
    reconstructions: Tensor
    scores: np.ndarray
    estimates: Tensor
    mu: Tensor
    sigma: Tensor


def ib_loss(batch, gamma=1e-4):
    r"""
    Information-bottleneck training loss.

    .. math::

        \mathcal{L} = \frac{1}{B}\sum_i (s_i - \hat{s}_i)^2
        + \frac{1}{B}\sum_i \mathrm{MSE}(p_i, \tilde{p}_i)
        + \gamma \frac{1}{B}\sum_i \mathrm{KL}(\mu_i, \sigma_i)

    Returns
    -------
    Tensor
        Scalar loss.
    """
    images = np.asarray(batch.images, dtype=np.float64)
    B = images.shape[0]
    estimator_term = ((as_tensor(batch.estimates) - np.asarray(batch.scores).reshape(-1)) ** 2).mean()
    mse_term = ((as_tensor(batch.reconstructions) - images.reshape(B, -1)) ** 2).mean()
    loss = estimator_term + mse_term
    if gamma:
        loss = loss + gamma * kl_to_standard_normal(batch.mu, batch.sigma).mean()
    return loss
