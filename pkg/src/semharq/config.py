import configparser
import dataclasses
import json
import logging
import os
from dataclasses import dataclass
from dataclasses import field

from semharq import __datapath__
from semharq.errors import ConfigurationError

DEFAULTS_PATH = os.path.join(__datapath__, "defaults.cfg")


@dataclass
class DataConfig:
    seed: int
    channels: int
    height: int
    width: int
    codec_train_size: int
    agent_train_size: int
    test_size: int
    raw_path: str = ""

    @property
    def image_shape(self):
        return (self.channels, self.height, self.width)


@dataclass
class CodecConfig:
    feature_dim: int
    check_dim: int
    hidden_width: int
    depth: int
    perceptual_features: int
    gamma: float


@dataclass
class ChannelConfig:
    kind: str
    snr_db_grid: list = field(default_factory=list)


@dataclass
class TrainConfig:
    seed: int
    epochs_stage1: int
    epochs_stage2: int
    epochs_stage3: int
    epochs_stage4: int
    batch_size: int
    lr: float
    ratio_min: float
    ratio_max: float
    log_every: int
    output_dir: str

    def epochs(self, stage):
        return getattr(self, f"epochs_stage{stage}")


@dataclass
class AgentConfig:
    hidden: int
    gamma: float
    lam: float
    clip_eps: float
    ppo_epochs: int
    minibatch: int
    entropy_coef: float
    value_coef: float
    lr: float
    threshold_percentile: float


@dataclass
class EvalConfig:
    ratio: float
    ratio2: float
    seeds: list
    policies: list
    target_retx_ratio: float
    workers: int


SECTIONS = {
    "data": DataConfig,
    "codec": CodecConfig,
    "channel": ChannelConfig,
    "train": TrainConfig,
    "agent": AgentConfig,
    "eval": EvalConfig,
}

# list-valued keys and the type of their items
LIST_KEYS = {
    ("channel", "snr_db_grid"): float,
    ("eval", "seeds"): int,
    ("eval", "policies"): str,
}


def _convert(section, key, raw, target):
    try:
        if (section, key) in LIST_KEYS:
            item = LIST_KEYS[(section, key)]
            return [item(v.strip()) for v in raw.split(",") if v.strip()]
        if target is int:
            return int(raw)
        if target is float:
            return float(raw)
        return raw.strip()
    except ValueError as e:
        raise ConfigurationError(f"Invalid value for {section}.{key}: {raw!r} ({e}).") from e


def _read(parser, path):
    try:
        with open(path, encoding="utf-8") as f:
            parser.read_file(f)
    except OSError as e:
        raise ConfigurationError(f"Cannot read configuration file {path}: {e}") from e
    except configparser.Error as e:
        raise ConfigurationError(f"Malformed configuration file {path}: {e}") from e


@dataclass
class RunConfig:
    """
    Complete configuration of a run.

    Built with :meth:`default` or :meth:`from_file`; every value is validated
    on construction.

    Attributes
    ----------
    data, codec, channel, train, agent, eval : dataclass
        One dataclass per configuration section, see
        ``semharq/data/defaults.cfg`` for the keys and their defaults.
    """

    data: DataConfig
    codec: CodecConfig
    channel: ChannelConfig
    train: TrainConfig
    agent: AgentConfig
    eval: EvalConfig

    def __post_init__(self):
        self.validate()

    @classmethod
    def default(cls):
        """The reference configuration."""
        return cls.from_file(None)

    @classmethod
    def from_file(cls, path=None, overrides=None):
        """
        Read a configuration file on top of the defaults.

        Parameters
        ----------
        path : str, optional
            INI file overriding any subset of the default keys.
        overrides : dict, optional
            ``{"section.key": value}`` pairs applied last.

        Returns
        -------
        RunConfig

        Raises
        ------
        ConfigurationError
            On unknown sections or keys, unparsable values or failed
            validation.
        """
        defaults = configparser.ConfigParser(interpolation=None)
        _read(defaults, DEFAULTS_PATH)
        merged = {s: dict(defaults[s]) for s in defaults.sections()}
        if path is not None:
            user = configparser.ConfigParser(interpolation=None)
            _read(user, path)
            for section in user.sections():
                if section not in merged:
                    raise ConfigurationError(f"Unknown configuration section [{section}] in {path}.")
                for key, value in user[section].items():
                    if key not in merged[section]:
                        raise ConfigurationError(f"Unknown configuration key {section}.{key} in {path}.")
                    merged[section][key] = value
            logging.info(f"Configuration read from {path}.")
        for dotted, value in (overrides or {}).items():
            section, _, key = dotted.partition(".")
            if key not in merged.get(section, {}):
                raise ConfigurationError(f"Unknown configuration key {dotted}.")
            if isinstance(value, (list, tuple)):
                value = ", ".join(map(str, value))
            merged[section][key] = str(value)
        return cls.from_dict(merged)

    @classmethod
    def from_dict(cls, sections):
        """Build from ``{section: {key: raw string}}``."""
        parts = {}
        for name, section_class in SECTIONS.items():
            raw = sections.get(name, {})
            kwargs = {}
            for f in dataclasses.fields(section_class):
                if f.name not in raw:
                    raise ConfigurationError(f"Missing configuration key {name}.{f.name}.")
                value = raw[f.name]
                kwargs[f.name] = value if not isinstance(value, str) else _convert(name, f.name, value, f.type)
            parts[name] = section_class(**kwargs)
        return cls(**parts)

    def validate(self):
        """
        Check value ranges.

        Raises
        ------
        ConfigurationError
            On the first invalid value.
        """
        d, c, ch, t, a, e = self.data, self.codec, self.channel, self.train, self.agent, self.eval
        positive = {
            "data.channels": d.channels, "data.height": d.height, "data.width": d.width,
            "data.codec_train_size": d.codec_train_size, "data.agent_train_size": d.agent_train_size,
            "data.test_size": d.test_size, "codec.feature_dim": c.feature_dim,
            "codec.check_dim": c.check_dim, "codec.hidden_width": c.hidden_width, "codec.depth": c.depth,
            "codec.perceptual_features": c.perceptual_features, "train.batch_size": t.batch_size,
            "train.lr": t.lr, "train.log_every": t.log_every, "agent.hidden": a.hidden,
            "agent.ppo_epochs": a.ppo_epochs, "agent.minibatch": a.minibatch, "agent.lr": a.lr,
            "eval.workers": e.workers,
        }
        for stage in (1, 2, 3, 4):
            positive[f"train.epochs_stage{stage}"] = t.epochs(stage)
        for key, value in positive.items():
            if value <= 0:
                raise ConfigurationError(f"{key} must be positive, got {value}.")
        if c.gamma < 0:
            raise ConfigurationError(f"codec.gamma must not be negative, got {c.gamma}.")
        if ch.kind not in ("awgn", "rayleigh"):
            raise ConfigurationError(f"channel.kind must be 'awgn' or 'rayleigh', got '{ch.kind}'.")
        if not ch.snr_db_grid:
            raise ConfigurationError("channel.snr_db_grid must not be empty.")
        if not 0.0 < t.ratio_min <= t.ratio_max <= 1.0:
            raise ConfigurationError(
                f"Ratio range [{t.ratio_min}, {t.ratio_max}] must satisfy 0 < min <= max <= 1."
            )
        for key in ("ratio", "ratio2"):
            if not 0.0 < getattr(e, key) <= 1.0:
                raise ConfigurationError(f"eval.{key} must lie in (0, 1], got {getattr(e, key)}.")
        for key in ("gamma", "lam"):
            if not 0.0 < getattr(a, key) <= 1.0:
                raise ConfigurationError(f"agent.{key} must lie in (0, 1], got {getattr(a, key)}.")
        if not 0.0 < a.threshold_percentile < 1.0:
            raise ConfigurationError(f"agent.threshold_percentile must lie in (0, 1), got {a.threshold_percentile}.")
        if not 0.0 < a.clip_eps < 1.0:
            raise ConfigurationError(f"agent.clip_eps must lie in (0, 1), got {a.clip_eps}.")
        if not 0.0 <= e.target_retx_ratio <= 1.0:
            raise ConfigurationError(f"eval.target_retx_ratio must lie in [0, 1], got {e.target_retx_ratio}.")
        if not e.seeds or not e.policies:
            raise ConfigurationError("eval.seeds and eval.policies must not be empty.")
        return self

    @property
    def output_dir(self):
        return self.train.output_dir

    def checkpoint_path(self, stage):
        return os.path.join(self.train.output_dir, f"stage{stage}.ckpt")

    def to_dict(self):
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def export_to_json(self, output_path):
        """Write the effective configuration to a JSON file."""
        directory = os.path.dirname(os.path.abspath(output_path))
        os.makedirs(directory, exist_ok=True)
        with open(output_path, "w") as json_file:
            json.dump(self.to_dict(), json_file, indent=4)
            logging.info(f"Configuration exported to JSON file: {output_path}.")
