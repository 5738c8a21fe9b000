import logging
import math

import numpy as np

from semharq.errors import DimensionError

PSNR_CAP = 99.0


def _pixels(image):
    """Flat pixel vector of an :class:`~semharq.datasets.Image` or array."""
    return np.asarray(getattr(image, "vector", image), dtype=np.float64).reshape(-1)


def _pixel_array(image):
    return np.asarray(getattr(image, "pixels", image), dtype=np.float64)


def _pixel_rows(images):
    arr = np.asarray(images, dtype=np.float64)
    return arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr.reshape(1, -1)


def psnr(p, q):
    r"""
    Peak signal-to-noise ratio for peak value 1.

    .. math::

        \mathrm{PSNR} = 10 \log_{10} \frac{1}{\mathrm{MSE}(p, q)}

    Parameters
    ----------
    p, q : Image or array_like
        Images of identical shape. A flat vector is compared with an
        image of the same size.

    Returns
    -------
    float
        PSNR in dB, capped at 99 dB (returned for identical images).
    """
    a, b = _pixel_array(p), _pixel_array(q)
    flat = a.ndim == 1 or b.ndim == 1
    if a.size != b.size or (not flat and a.shape != b.shape):
        raise DimensionError(f"PSNR needs equal shapes, got {a.shape} and {b.shape}.")
    a, b = a.reshape(-1), b.reshape(-1)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def psnr_batch(p, q):
    """Row-wise :func:`psnr` for pixel matrices of shape ``(n, D)``."""
    a, b = _pixel_rows(p), _pixel_rows(q)
    if a.shape != b.shape:
        raise DimensionError(f"PSNR needs equal shapes, got {a.shape} and {b.shape}.")
    mse = np.mean((a - b) ** 2, axis=1)
    with np.errstate(divide="ignore"):
        values = 10.0 * np.log10(1.0 / mse)
    return np.minimum(values, PSNR_CAP)


class PerceptualProjector:
    r"""
    Seeded random projection standing in for a learned perceptual metric.

    The projection matrix :math:`P \in \mathbb{R}^{F \times D}` has
    standard-normal entries drawn from ``seed`` and rows normalised to unit
    length.

    Parameters
    ----------
    seed : int
        Projection seed.
    feature_count : int
        Number of projected features :math:`F`.
    dims : tuple of int
        Image dimensions ``(c, h, w)``.
    """

    def __init__(self, seed, feature_count, dims):
        if feature_count <= 0:
            raise ValueError(f"feature_count must be positive, got {feature_count}.")
        self.seed = seed
        self.feature_count = int(feature_count)
        self.dims = tuple(int(d) for d in dims)
        size = int(np.prod(self.dims))
        raw = np.random.default_rng(seed).standard_normal((self.feature_count, size))
        self.projection = raw / np.linalg.norm(raw, axis=1, keepdims=True)

    @property
    def input_size(self):
        return self.projection.shape[1]

    def project(self, images):
        """Features of one image (shape ``(F,)``) or a batch (shape ``(n, F)``)."""
        arr = np.asarray(getattr(images, "vector", images), dtype=np.float64)
        if arr.shape[-1] != self.input_size and arr.size == self.input_size:
            arr = arr.reshape(-1)
        if arr.shape[-1] != self.input_size:
            raise DimensionError(
                f"Projector expects {self.input_size} pixels per image, got {arr.shape[-1]}."
            )
        return arr @ self.projection.T


def perceptual_score(p, q, projector):
    r"""
    Perceptual distance score in :math:`[0, 1)`, lower is better.

    .. math::

        s(p, q) = 1 - \exp\left(-\frac{\lVert P p - P q \rVert_2}{\sqrt{F}}\right)

    Parameters
    ----------
    p, q : Image or array_like
        Images of the projector's dimensions.
    projector : PerceptualProjector
        Projection used for both images.

    Returns
    -------
    float
        0 exactly when both projections coincide.
    """
    a, b = _pixels(p), _pixels(q)
    if a.shape != b.shape:
        raise DimensionError(f"Score needs equal sizes, got {a.size} and {b.size}.")
    distance = float(np.linalg.norm(projector.project(a) - projector.project(b)))
    return 1.0 - math.exp(-distance / math.sqrt(projector.feature_count))


def perceptual_score_batch(p, q, projector):
    """Row-wise :func:`perceptual_score` for pixel matrices of shape ``(n, D)``."""
    a, b = _pixel_rows(p), _pixel_rows(q)
    if a.shape != b.shape:
        raise DimensionError(f"Score needs equal shapes, got {a.shape} and {b.shape}.")
    distance = np.linalg.norm(projector.project(a - b), axis=1)
    return 1.0 - np.exp(-distance / math.sqrt(projector.feature_count))


def _order_statistic(values, fraction):
    """Ascending-sorted value at index ``ceil(fraction * N) - 1``, clamped."""
    ordered = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if ordered.size == 0:
        raise ValueError("Percentile of an empty list is undefined.")
    # rounding keeps e.g. 0.03 * 100 from landing just above 3
    idx = math.ceil(round(fraction * ordered.size, 9)) - 1
    idx = min(max(idx, 0), ordered.size - 1)
    return float(ordered[idx])


def percentile_psnr(values, q=0.97):
    r"""
    Tail PSNR exceeded by a fraction ``q`` of the samples.

    The values are sorted ascending and the entry at 0-based index
    :math:`\lceil (1 - q) N \rceil - 1` is returned (clamped to the list).

    Parameters
    ----------
    values : array_like
        Non-empty list of PSNR values.
    q : float
        Fraction in :math:`(0, 1)`.

    Returns
    -------
    float

    Examples
    --------
    >>> percentile_psnr(range(1, 101), 0.97)
    3.0
    >>> percentile_psnr([7.5], 0.97)
    7.5
    """
    if not 0.0 < q < 1.0:
        raise ValueError(f"Percentile fraction must lie in (0, 1), got {q}.")
    return _order_statistic(values, 1.0 - q)


def percentile_score(values, q=0.97):
    r"""
    Tail perceptual score not exceeded by a fraction ``q`` of the samples.

    Mirror of :func:`percentile_psnr` for lower-is-better values: the entry at
    0-based index :math:`\lceil q N \rceil - 1` of the ascending sort.

    Examples
    --------
    >>> percentile_score(range(1, 101), 0.97)
    97.0
    """
    if not 0.0 < q < 1.0:
        raise ValueError(f"Percentile fraction must lie in (0, 1), got {q}.")
    return _order_statistic(values, q)


def outage(scores, threshold):
    """
    Fraction of samples whose perceptual score exceeds ``threshold``.

    Examples
    --------
    >>> outage([0.1, 0.2, 0.5, 0.9], 0.4)
    0.5
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size == 0:
        logging.warning("Outage of an empty score list is reported as 0.")
        return 0.0
    return float(np.count_nonzero(scores > threshold)) / scores.size


def pearson(a, b):
    """Pearson correlation coefficient, 0 when either input is constant."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.std() == 0.0 or b.std() == 0.0:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])
