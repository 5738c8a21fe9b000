import logging
from dataclasses import dataclass
from dataclasses import field

import numpy as np

from semharq.autodiff import Mlp
from semharq.autodiff import concat
from semharq.autodiff.checkpoint import load_checkpoint
from semharq.autodiff.checkpoint import save_checkpoint
from semharq.codec import SIGMA_FLOOR
from semharq.codec import SNR_SCALE
from semharq.codec import CheckCodeword
from semharq.codec import condition
from semharq.codec import rows
from semharq.errors import CheckpointError
from semharq.errors import ConfigurationError
from semharq.errors import DimensionError

COMPONENTS = ("enc2", "eo", "chk2", "dec2", "est2")


@dataclass
class RetxBundle:
    r"""
    Learned components of the retransmission round.

    Parameters
    ----------
    second_encoder : Mlp
        :math:`K + 2 \to K`, re-encodes the retained features for round two.
    entropy_optimizer : Mlp
        :math:`2K \to K`, removes what the receiver already holds from the
        round-two features.
    second_check_encoder : Mlp
        :math:`2K + 3 \to 2k`, reads both feature sets, R2, SNR and the fed
        back quality estimate.
    second_joint_decoder : Mlp
        :math:`2K + 2k + 1 \to D`, decodes from all four received codewords.
    second_estimator : Mlp
        :math:`2K + 2k + 2 \to 1`, quality estimate of the round-two output.
    K, k : int
        Feature and check codeword lengths.
    image_shape : tuple of int
        ``(c, h, w)``.
    ratio2 : float
        Default compression ratio of the retransmission.
    """

    second_encoder: Mlp
    entropy_optimizer: Mlp
    second_check_encoder: Mlp
    second_joint_decoder: Mlp
    second_estimator: Mlp
    K: int
    k: int
    image_shape: tuple
    ratio2: float = 0.125
    frozen: set = field(default_factory=set)

    def __post_init__(self):
        K, k, D = self.K, self.k, self.pixel_count
        expected = {
            "enc2": (K + 2, K),
            "eo": (2 * K, K),
            "chk2": (2 * K + 3, 2 * k),
            "dec2": (2 * K + 2 * k + 1, D),
            "est2": (2 * K + 2 * k + 2, 1),
        }
        for key, (n_in, n_out) in expected.items():
            net = self.components[key]
            if (net.input_dim, net.output_dim) != (n_in, n_out):
                raise ConfigurationError(
                    f"Component '{key}' maps {net.input_dim} -> {net.output_dim}, "
                    f"expected {n_in} -> {n_out}."
                )

    @classmethod
    def build(cls, K, k, image_shape, width=256, depth=3, seed=0, ratio2=0.125):
        D = int(np.prod(image_shape))

        def sizes(n_in, n_out):
            return [n_in] + [width] * (depth - 1) + [n_out]

        return cls(
            second_encoder=Mlp.build(sizes(K + 2, K), seed=[seed, 10], name="enc2"),
            entropy_optimizer=Mlp.build(sizes(2 * K, K), seed=[seed, 11], name="eo"),
            second_check_encoder=Mlp.build(sizes(2 * K + 3, 2 * k), seed=[seed, 12], name="chk2"),
            second_joint_decoder=Mlp.build(
                sizes(2 * K + 2 * k + 1, D), output_activation="sigmoid", seed=[seed, 13], name="dec2"
            ),
            second_estimator=Mlp.build(
                sizes(2 * K + 2 * k + 2, 1), output_activation="sigmoid", seed=[seed, 14], name="est2"
            ),
            K=K,
            k=k,
            image_shape=tuple(image_shape),
            ratio2=ratio2,
        )

    @classmethod
    def from_config(cls, config):
        data, codec = config.data, config.codec
        return cls.build(
            codec.feature_dim, codec.check_dim, (data.channels, data.height, data.width),
            codec.hidden_width, codec.depth, seed=config.train.seed, ratio2=config.eval.ratio2,
        )

    @property
    def components(self):
        return {
            "enc2": self.second_encoder,
            "eo": self.entropy_optimizer,
            "chk2": self.second_check_encoder,
            "dec2": self.second_joint_decoder,
            "est2": self.second_estimator,
        }

    @property
    def pixel_count(self):
        return int(np.prod(self.image_shape))

    def parameters(self, names=None):
        if names is None:
            names = [n for n in COMPONENTS if n not in self.frozen]
        params = {}
        for name in names:
            params.update(self.components[name].parameters())
        return params

    def state_dict(self):
        state = {"meta.retx": np.array([self.K, self.k, *self.image_shape, self.ratio2], dtype=np.float64)}
        for net in self.components.values():
            state.update(net.state_dict())
        return state

    def load_state_dict(self, state):
        if "meta.retx" not in state:
            raise CheckpointError("Checkpoint holds no retransmission parameters.")
        stored = state["meta.retx"]
        K, k = int(stored[0]), int(stored[1])
        if (K, k) != (self.K, self.k):
            raise CheckpointError(
                f"Checkpoint has K={K}, k={k}; configuration has K={self.K}, k={self.k}."
            )
        try:
            for net in self.components.values():
                net.load_state_dict(state)
        except ConfigurationError as e:
            raise CheckpointError(f"Checkpoint does not fit the retransmission modules: {e}") from e

    def save(self, path, extra=None):
        state = self.state_dict()
        state.update(extra or {})
        save_checkpoint(state, path)

    def load(self, path):
        self.load_state_dict(load_checkpoint(path))
        logging.info(f"Loaded retransmission parameters from {path}.")
        return self


def refine_features(retx, x, R2, snr_db):
    r"""
    Round-two features :math:`x_\mathrm{sec} = f_\mathrm{eo}(f_\mathrm{en,2}(x), x)`.

    Returns
    -------
    Tensor
        Shape ``(B, K)``.
    """
    x = rows(x)
    if x.shape[1] != retx.K:
        raise DimensionError(f"Retransmission expects K={retx.K} features, got {x.shape[1]}.")
    x2 = retx.second_encoder(concat([x, condition(x.shape[0], R2, np.asarray(snr_db) / SNR_SCALE)]))
    return retx.entropy_optimizer(concat([x2, x]))


def second_check_encode(retx, x, x_sec, R2, snr_db, estimate, rng=None, training=False):
    """
    Round-two check codeword conditioned on the fed back quality estimate.
    """
    x, x_sec = rows(x), rows(x_sec)
    cond = condition(x.shape[0], R2, np.asarray(snr_db) / SNR_SCALE, estimate)
    out = retx.second_check_encoder(concat([x, x_sec, cond]))
    mu = out[:, :retx.k]
    sigma = out[:, retx.k:].softplus() + SIGMA_FLOOR
    if training:
        if rng is None:
            raise ConfigurationError("Training-mode check encoding needs an rng.")
        sample = mu + sigma * rng.standard_normal(mu.shape)
    else:
        sample = mu
    return CheckCodeword(mu, sigma, sample)


def _all_received(retx, z1, c1, z2, c2):
    parts = [rows(v) for v in (z1, c1, z2, c2)]
    widths = [p.shape[1] for p in parts]
    if widths != [retx.K, retx.k, retx.K, retx.k]:
        raise DimensionError(
            f"Joint re-decoding expects codeword lengths {[retx.K, retx.k, retx.K, retx.k]}, got {widths}."
        )
    return parts


def second_joint_decode(retx, z1, c1, z2, c2, snr_db):
    """Reconstruction from both rounds' received codewords, clipped to [0, 1]."""
    parts = _all_received(retx, z1, c1, z2, c2)
    cond = condition(parts[0].shape[0], np.asarray(snr_db) / SNR_SCALE)
    return retx.second_joint_decoder(concat(parts + [cond])).clip(0.0, 1.0)


def second_estimate(retx, z1, c1, z2, c2, snr_db, R2):
    """Quality estimate of the round-two reconstruction, shape ``(B,)``."""
    parts = _all_received(retx, z1, c1, z2, c2)
    cond = condition(parts[0].shape[0], np.asarray(snr_db) / SNR_SCALE, R2)
    return retx.second_estimator(concat(parts + [cond])).reshape(-1)
