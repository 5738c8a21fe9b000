import hashlib
import logging
import os
from dataclasses import dataclass
from dataclasses import field

import numpy as np

from semharq.errors import DimensionError
from semharq.errors import IngestionError

ROLES = ("codec_train", "agent_train", "test")

RAW_MAGIC = "JS3C-IMGS"
RAW_VERSION = "v1"


@dataclass
class Image:
    r"""
    Source sample or reconstruction with pixel values in :math:`[0, 1]`.

    Parameters
    ----------
    channels, height, width : int
        Positive dimensions.
    pixels : numpy.ndarray
        Values of shape ``(channels, height, width)`` or flat with
        ``channels * height * width`` entries.
    """

    channels: int
    height: int
    width: int
    pixels: np.ndarray = field(repr=False)

    def __post_init__(self):
        if min(self.channels, self.height, self.width) <= 0:
            raise DimensionError(
                f"Image dimensions must be positive, got {(self.channels, self.height, self.width)}."
            )
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.size != self.size:
            raise DimensionError(
                f"Image of {self.channels}x{self.height}x{self.width} needs {self.size} pixels, got {pixels.size}."
            )
        if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
            raise ValueError("Pixel values must lie in [0, 1].")
        self.pixels = pixels.reshape(self.channels, self.height, self.width)

    @property
    def size(self):
        return self.channels * self.height * self.width

    @property
    def shape(self):
        return (self.channels, self.height, self.width)

    @property
    def vector(self):
        """Flattened channel-first, row-major pixels."""
        return self.pixels.reshape(-1)

    def digest(self):
        """SHA-1 of the raw pixel bytes, used to detect duplicates across splits."""
        return hashlib.sha1(self.pixels.tobytes()).hexdigest()


@dataclass
class DatasetSplit:
    """Ordered images sharing one role and one generator seed."""

    role: str
    images: list
    seed: int = 0

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"Unknown split role '{self.role}'. Choose one of {ROLES}.")

    def __len__(self):
        return len(self.images)

    def __getitem__(self, idx):
        return self.images[idx]

    def as_array(self):
        """Pixel matrix of shape ``(n, c*h*w)``."""
        if not self.images:
            return np.zeros((0, 0))
        return np.stack([img.vector for img in self.images])


def generate_image(seed, index, c, h, w):
    r"""
    Generate one synthetic image.

    The image is a clipped sum of 2 to 4 Gaussian blobs, one oriented 2-D
    sinusoid and low-amplitude Gaussian noise. Every draw comes from a stream
    seeded with ``(seed, index)``.

    Parameters
    ----------
    seed : int
        Dataset seed.
    index : int
        Image index inside the dataset.
    c, h, w : int
        Channels, height and width.

    Returns
    -------
    Image
        Deterministic in ``(seed, index)``.
    """
    if min(c, h, w) <= 0:
        raise DimensionError(f"Image dimensions must be positive, got {(c, h, w)}.")
    rng = np.random.default_rng([seed, index])
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, h), np.linspace(0.0, 1.0, w), indexing="ij")
    pixels = np.empty((c, h, w))
    n_blobs = int(rng.integers(2, 5))
    centers = rng.uniform(0.1, 0.9, size=(n_blobs, 2))
    widths = rng.uniform(0.08, 0.3, size=n_blobs)
    freq = rng.uniform(1.0, 4.0, size=2)
    phase = rng.uniform(0.0, 2 * np.pi)
    for ch in range(c):
        amplitudes = rng.uniform(0.3, 0.8, size=n_blobs)
        img = np.full((h, w), rng.uniform(0.05, 0.3))
        for (cy, cx), sw, amp in zip(centers, widths, amplitudes):
            img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sw ** 2))
        img += rng.uniform(0.05, 0.15) * np.sin(2 * np.pi * (freq[0] * yy + freq[1] * xx) + phase)
        img += rng.normal(0.0, 0.02, size=(h, w))
        pixels[ch] = img
    return Image(c, h, w, np.clip(pixels, 0.0, 1.0))


def generate_split(role, seed, count, c, h, w):
    """Generate ``count`` images of one role."""
    if count <= 0:
        raise ValueError(f"Split '{role}' needs a positive size, got {count}.")
    return DatasetSplit(role, [generate_image(seed, i, c, h, w) for i in range(count)], seed)


def make_splits(data_config):
    """
    Generate the three disjoint splits described by a ``[data]`` section.

    Each role gets its own generator seed derived from ``data_config.seed``.
    A hash check guarantees that no image appears in two roles. When
    ``data_config.raw_path`` is set, the test split is read from that raw
    image file instead of being generated.

    Parameters
    ----------
    data_config : semharq.config.DataConfig
        Seed, image dimensions and split sizes.

    Returns
    -------
    dict
        :class:`DatasetSplit` objects keyed by role.
    """
    sizes = {
        "codec_train": data_config.codec_train_size,
        "agent_train": data_config.agent_train_size,
        "test": data_config.test_size,
    }
    dims = (data_config.channels, data_config.height, data_config.width)
    splits = {}
    owner = {}
    raw_path = getattr(data_config, "raw_path", "")
    for role_index, role in enumerate(ROLES):
        role_seed = data_config.seed * len(ROLES) + role_index
        if role == "test" and raw_path:
            split = load_raw_images(raw_path, *dims)
        else:
            split = generate_split(role, role_seed, sizes[role], *dims)
        for img in split.images:
            key = img.digest()
            if owner.get(key, role) != role:
                raise ValueError(f"Image shared between splits '{owner[key]}' and '{role}'.")
            owner[key] = role
        splits[role] = split
        logging.info(f"Generated split '{role}' with {len(split)} images (seed {role_seed}).")
    return splits


def save_raw_images(split, path):
    """
    Write a split in the raw byte format.

    The header line is ``JS3C-IMGS v1 <count> <c> <h> <w>`` followed by one
    unsigned byte per pixel, image-major and channel-first. Pixels are
    rounded to the nearest of 256 levels.
    """
    if not len(split):
        raise ValueError("Cannot write an empty split.")
    c, h, w = split.images[0].shape
    header = f"{RAW_MAGIC} {RAW_VERSION} {len(split)} {c} {h} {w}\n".encode("ascii")
    body = np.round(split.as_array() * 255.0).astype(np.uint8).tobytes()
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header + body)
    logging.info(f"Wrote {len(split)} raw images to {path}.")


def load_raw_images(path, c, h, w, role="test"):
    r"""
    Read images stored in the raw byte format.

    Parameters
    ----------
    path : str
        File path.
    c, h, w : int
        Expected dimensions.
    role : str, optional
        Role assigned to the returned split.

    Returns
    -------
    DatasetSplit
        Pixels scaled from :math:`[0, 255]` to :math:`[0, 1]`.

    Raises
    ------
    IngestionError
        If the header is malformed or the file ends before ``count`` images;
        ``offset`` holds the byte position where data ran out.
    DimensionError
        If the header dimensions differ from ``(c, h, w)``.
    """
    with open(path, "rb") as f:
        blob = f.read()
    newline = blob.find(b"\n")
    if newline < 0:
        raise IngestionError(f"Missing header line in {path}.", offset=len(blob))
    fields = blob[:newline].decode("ascii", errors="replace").split()
    if len(fields) != 6 or fields[0] != RAW_MAGIC or fields[1] != RAW_VERSION:
        raise IngestionError(f"Malformed header in {path}: {blob[:newline]!r}.", offset=0)
    try:
        count, fc, fh, fw = (int(v) for v in fields[2:])
    except ValueError as e:
        raise IngestionError(f"Malformed header in {path}: {e}", offset=0) from e
    if (fc, fh, fw) != (c, h, w):
        raise DimensionError(
            f"File {path} holds {fc}x{fh}x{fw} images, expected {c}x{h}x{w}."
        )
    start = newline + 1
    expected = count * c * h * w
    available = len(blob) - start
    if available < expected:
        raise IngestionError(
            f"File {path} truncated: expected {expected} pixel bytes, found {available}.",
            offset=len(blob),
        )
    data = np.frombuffer(blob, dtype=np.uint8, count=expected, offset=start)
    data = data.reshape(count, c * h * w).astype(np.float64) / 255.0
    images = [Image(c, h, w, row) for row in data]
    logging.info(f"Loaded {count} raw images from {path}.")
    return DatasetSplit(role, images, seed=-1)
