"""Flat ``key = value`` run configuration shared by every CLI command.

Precedence, lowest first: built-in defaults, the config file, the
``MEDUSA_SEED`` environment variable (seed only), command-line flags.
"""
import os
from dataclasses import dataclass

import numpy as np

from .attention import GlobalConfig
from .backbone import BackboneConfig
from .data import SyntheticConfig
from .tensor import ConfigError
from .training import TrainConfig

SEED_ENV = "MEDUSA_SEED"


def _int(s):
    return int(s)


def _float(s):
    return float(s)


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError("not a boolean: %r" % s)


def _ints(s):
    return tuple(int(p) for p in s.replace(" ", "").split(",") if p)


def _floats(s):
    return tuple(float(p) for p in s.replace(" ", "").split(",") if p)


def _dtype(s):
    if s not in ("float32", "float64"):
        raise ValueError("dtype must be float32 or float64")
    return s


def _text(s):
    return s


@dataclass(frozen=True)
class Key:
    parse: object
    default: str
    help: str


KEYS = {
    "seed": Key(_int, "0", "master seed for data, initialisation and shuffling"),
    "dtype": Key(_dtype, "float32", "training precision"),
    "data": Key(_text, "", "manifest.csv used by pretrain/train"),
    # synthetic data
    "image_size": Key(_int, "64", "square image extent"),
    "n_train": Key(_int, "1600", "training samples"),
    "n_val": Key(_int, "200", "validation samples"),
    "n_test": Key(_int, "200", "test samples"),
    "positive_fraction": Key(_float, "0.5", "share of positive samples per split"),
    "lesion_count": Key(_ints, "1,3", "min,max lesions per positive image"),
    "lesion_radius": Key(_floats, "2,6", "min,max lesion radius in pixels"),
    "lesion_contrast": Key(_floats, "0.08,0.25", "min,max lesion intensity"),
    "distractor_prob": Key(_float, "0.3", "chance of an out-of-mask distractor"),
    "noise_sigma": Key(_float, "0.05", "Gaussian pixel noise"),
    # model
    "stage_channels": Key(_ints, "8,16,32", "backbone channels per stage"),
    "blocks_per_stage": Key(_int, "1", "residual blocks per stage"),
    "num_classes": Key(_int, "2", "output classes"),
    "global_depth": Key(_int, "3", "encoder levels of the global module"),
    "global_base_channels": Key(_int, "4", "channels of the first global encoder level"),
    "se_reduction": Key(_int, "4", "squeeze-excitation reduction ratio"),
    # training
    "lr": Key(_float, "0.001", "Adam learning rate"),
    "batch_size": Key(_int, "16", "minibatch size"),
    "epochs": Key(_int, "10", "classification epochs"),
    "cadence": Key(_int, "1", "epochs per alternating phase"),
    "pretrain_epochs": Key(_int, "10", "segmentation pretraining epochs"),
    "pretrain_lr": Key(_float, "0.01", "Adam learning rate for segmentation pretraining"),
    "attention_enabled": Key(_bool, "true", "use attention gates while training"),
}


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Validated key/value settings; attribute access returns parsed values."""

    def __init__(self, values=None):
        self._values = {}
        for k, spec in KEYS.items():
            self._values[k] = spec.parse(spec.default)
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key, raw, origin="override"):
        if key not in KEYS:
            raise ConfigError("%s: unknown key %r" % (origin, key))
        try:
            self._values[key] = KEYS[key].parse(raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError("%s: bad value for %s: %s" % (origin, key, exc)) from None

    def __getattr__(self, key):
        try:
            return self.__dict__["_values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def as_dict(self):
        return dict(self._values)

    @classmethod
    def parse_text(cls, text, origin="<config>"):
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError("%s:%d: expected key = value" % (origin, lineno))
            key, value = (p.strip() for p in line.split("=", 1))
            cfg.set(key, value, "%s:%d" % (origin, lineno))
        return cfg

    @classmethod
    def load(cls, path=None, overrides=None, environ=None):
        """Read ``path`` (optional), apply the seed env var, then ``overrides``."""
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    text = fh.read()
            except OSError as exc:
                raise FileNotFoundError(exc.errno, "cannot read config %s: %s" % (path, exc.strerror), path) from None
            cfg = cls.parse_text(text, path)
        else:
            cfg = cls()
        env = os.environ if environ is None else environ
        if env.get(SEED_ENV, "").strip():
            cfg.set("seed", env[SEED_ENV], SEED_ENV)
        for k, v in (overrides or {}).items():
            if v is not None:
                cfg.set(k, v, "--" + k)
        cfg.validate()
        return cfg

    def resolved_text(self, command=None):
        lines = ["# effective configuration"]
        if command:
            lines.append("# command: %s" % command)
        lines += ["%s = %s" % (k, _format(self._values[k])) for k in KEYS]
        return "\n".join(lines) + "\n"

    def write_resolved(self, out_dir, command=None):
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "config.resolved")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.resolved_text(command))
        return path

    # -- module configs ---------------------------------------------------

    def validate(self):
        self.synthetic()
        self.backbone()
        self.global_config()
        self.train()

    def synthetic(self):
        return SyntheticConfig(
            image_size=self.image_size, n_train=self.n_train, n_val=self.n_val, n_test=self.n_test,
            positive_fraction=self.positive_fraction, lesion_count=_pair(self, "lesion_count"),
            lesion_radius=_pair(self, "lesion_radius"), lesion_contrast=_pair(self, "lesion_contrast"),
            distractor_prob=self.distractor_prob, noise_sigma=self.noise_sigma, seed=self.seed,
        )

    def backbone(self):
        return BackboneConfig(self.stage_channels, self.blocks_per_stage, (1, self.image_size, self.image_size), self.num_classes)

    def global_config(self):
        return GlobalConfig(self.global_depth, self.global_base_channels)

    def train(self):
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs, cadence=self.cadence,
                           seed=self.seed, attention_enabled=self.attention_enabled, pretrain_epochs=self.pretrain_epochs,
                           pretrain_lr=self.pretrain_lr)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


def _pair(cfg, key):
    v = getattr(cfg, key)
    if len(v) != 2:
        raise ConfigError("%s needs exactly two comma-separated values" % key)
    return v
