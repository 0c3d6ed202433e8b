"""Line-oriented experiment configuration.

A config file is a sequence of ``[section]`` headers and ``key = value``
lines; ``#`` starts a comment. Every key lives in :data:`REGISTRY` with a
type, a default and a one-line description. Unknown sections or keys are
rejected with the offending line number, and ``parse(render(c)) == c``.
"""

from dataclasses import dataclass

from .exceptions import ConfigError


def _bool(text):
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _blocks(text):
    blocks = []
    for part in text.split(","):
        fields = part.strip().split(":")
        if len(fields) != 3:
            raise ValueError(f"encoder block {part.strip()!r} is not channels:kernel:stride")
        blocks.append(tuple(int(f) for f in fields))
    return tuple(blocks)


def _ints(text):
    return tuple(int(v) for v in text.split(","))


def _lr(text):
    text = text.strip()
    if text == "auto":
        return "auto"
    value = float(text)
    if value <= 0:
        raise ValueError("learning rate must be positive")
    return value


def _choice(*options):
    def parse(text):
        text = text.strip()
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text

    return parse


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple) and value and isinstance(value[0], tuple):
        return ",".join(":".join(str(v) for v in block) for block in value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class Key:
    section: str
    name: str
    default: object
    parse: object
    doc: str

    @property
    def qualified(self):
        return f"{self.section}.{self.name}"


REGISTRY = [
    Key("model", "blocks", ((8, 3, 1), (16, 3, 2), (32, 3, 2), (32, 3, 2)), _blocks,
        "encoder conv blocks as channels:kernel:stride, comma separated"),
    Key("model", "image_size", 32, int, "square input image side in pixels"),
    Key("model", "expander", (256, 256, 256), _ints, "expander MLP widths"),
    Key("model", "n_tokens", 8, int, "CV-SIM tokens per feature vector"),
    Key("model", "n_heads", 2, int, "CV-SIM attention heads"),
    Key("model", "temperature", 1.0, float, "softmax temperature of the CV-SIM marginals"),
    Key("model", "alpha", 0.6, float, "weight of the transport loss"),
    Key("model", "beta", 25.0, float, "weight of the variance hinge"),
    Key("model", "eta", 1.0, float, "weight of the covariance penalty"),
    Key("model", "var_gamma", 1.0, float, "target standard deviation of the variance hinge"),
    Key("model", "var_eps", 1e-4, float, "stabilizer inside the variance square root"),
    Key("ot", "epsilon", 0.05, float, "entropic regularization strength"),
    Key("ot", "iterations", 50, int, "Sinkhorn iterations (unrolled) or cap (detached)"),
    Key("ot", "mode", "unrolled", _choice("unrolled", "detached"), "unrolled or detached Sinkhorn"),
    Key("ot", "tol", 1e-6, float, "marginal tolerance of the detached solver"),
    Key("augment", "crop_lo", 0.4, float, "smallest crop area fraction"),
    Key("augment", "crop_hi", 1.0, float, "largest crop area fraction"),
    Key("augment", "flip_prob", 0.5, float, "horizontal flip probability"),
    Key("augment", "brightness", 0.1, float, "half-width of the additive intensity jitter"),
    Key("augment", "contrast", 0.2, float, "half-width of the multiplicative intensity jitter"),
    Key("augment", "blur_prob", 0.5, float, "Gaussian blur probability"),
    Key("augment", "blur_sigma_lo", 0.1, float, "smallest blur sigma in pixels"),
    Key("augment", "blur_sigma_hi", 1.0, float, "largest blur sigma in pixels"),
    Key("augment", "enabled", True, _bool, "master switch; false disables every augmentation"),
    Key("augment", "use_crop", True, _bool, "enable random resized crop"),
    Key("augment", "use_flip", True, _bool, "enable horizontal flip"),
    Key("augment", "use_jitter", True, _bool, "enable intensity jitter"),
    Key("augment", "use_blur", True, _bool, "enable Gaussian blur"),
    Key("train", "steps", 2000, int, "optimizer steps"),
    Key("train", "batch_size", 64, int, "images per step"),
    Key("train", "optimizer", "adam", _choice("lars", "adam"), "lars or adam"),
    Key("train", "lr", "auto", _lr, "learning rate; auto picks 3e-4 for lars and 1e-3 for adam"),
    Key("train", "weight_decay", 1e-4, float, "weight decay on non-bias, non-batch-norm parameters"),
    Key("train", "momentum", 0.9, float, "LARS momentum"),
    Key("train", "trust_coeff", 1e-3, float, "LARS trust coefficient"),
    Key("train", "warmup_steps", 0, int, "linear learning-rate warmup steps"),
    Key("train", "seed", 0, int, "seed for initialization, batches and augmentation"),
    Key("train", "metrics", "metrics.csv", str, "metrics CSV path, relative to the checkpoint directory"),
    Key("train", "checkpoint_every", 0, int, "save an intermediate checkpoint every N steps; 0 disables"),
    Key("train", "record_time", True, _bool, "write wall time to the ms column; false writes 0"),
    Key("probe", "protocol", "frozen", _choice("frozen", "finetune"), "frozen or finetune"),
    Key("probe", "fraction", 1.0, float, "fraction of training labels used"),
    Key("probe", "test_fraction", 0.25, float, "held-out share when a single labeled set is given"),
    Key("probe", "iterations", 500, int, "full-batch gradient steps of the linear head"),
    Key("probe", "lr", 0.1, float, "learning rate of the linear head"),
    Key("probe", "finetune_steps", 200, int, "minibatch steps of the fine-tuning protocol"),
    Key("probe", "finetune_lr", 1e-3, float, "Adam learning rate of the fine-tuning protocol"),
    Key("probe", "seed", 0, int, "seed for subset selection and splits"),
]
KEYS = {key.qualified: key for key in REGISTRY}
SECTIONS = tuple(dict.fromkeys(key.section for key in REGISTRY))


class Config:
    """Mapping from ``section.key`` names to typed values.

    Examples
    --------
    >>> cfg = Config().with_overrides({"train.steps": "10"})
    >>> cfg["train.steps"]
    10
    >>> parse(render(cfg)) == cfg
    True
    """

    def __init__(self, values=None):
        self._values = {name: key.default for name, key in KEYS.items()}
        for name, value in (values or {}).items():
            if name not in KEYS:
                raise ConfigError(f"unknown config key {name!r}")
            self._values[name] = value

    def __getitem__(self, name):
        return self._values[name]

    def __eq__(self, other):
        return isinstance(other, Config) and self._values == other._values

    def __repr__(self):
        changed = {k: v for k, v in self._values.items() if v != KEYS[k].default}
        return f"Config({changed})"

    def items(self):
        return self._values.items()

    def section(self, name):
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self._values.items() if k.startswith(prefix)}

    def with_overrides(self, overrides):
        """Return a copy with ``{"section.key": text_or_value}`` applied."""
        values = dict(self._values)
        for name, value in overrides.items():
            if name not in KEYS:
                raise ConfigError(f"unknown config key {name!r}")
            values[name] = _coerce(KEYS[name], value)
        return Config(values)


def _coerce(key, value, line=None):
    if not isinstance(value, str):
        return value
    try:
        return key.parse(value)
    except ValueError as exc:
        raise ConfigError(f"{key.qualified}: {exc}", line=line) from None


def parse(text):
    """Parse config text; keys not mentioned keep their defaults."""
    values = {}
    section = None
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw.strip()!r}", line=number)
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]", line=number)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=number)
        name, value = (part.strip() for part in line.split("=", 1))
        if section is None:
            raise ConfigError(f"key {name!r} appears before any section", line=number)
        qualified = f"{section}.{name}"
        if qualified not in KEYS:
            raise ConfigError(f"unknown key {name!r} in [{section}]", line=number)
        if qualified in values:
            raise ConfigError(f"duplicate key {qualified!r}", line=number)
        values[qualified] = _coerce(KEYS[qualified], value, line=number)
    return Config(values)


def render(config):
    lines = []
    for section in SECTIONS:
        if lines:
            lines.append("")
        lines.append(f"[{section}]")
        for key in REGISTRY:
            if key.section == section:
                lines.append(f"{key.name} = {_fmt(config[key.qualified])}")
    return "\n".join(lines) + "\n"


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())


def describe_keys():
    """Help text listing every key with its default."""
    lines = []
    for key in REGISTRY:
        lines.append(f"  {key.qualified} = {_fmt(key.default)}  ({key.doc})")
    return "\n".join(lines)
