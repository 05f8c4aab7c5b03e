"""TrainConfig and the flat ``key = value`` config file format."""
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

ENV_PREFIX = "MULTISTEGO_"

DEFAULT_MILESTONES = ((0, 0.001), (200, 0.0003), (400, 0.00003))


class ConfigError(ValueError):
    pass


def parse_milestones(text):
    """``"0:0.001,200:0.0003"`` -> ((0, 0.001), (200, 0.0003))."""
    if not isinstance(text, str):
        return tuple((int(e), float(r)) for e, r in text)
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            e, r = part.split(":")
            out.append((int(e), float(r)))
        except ValueError as exc:
            raise ConfigError(f"bad milestone {part!r}; expected epoch:rate") from exc
    return tuple(out)


def format_milestones(milestones):
    return ",".join(f"{e}:{r:g}" for e, r in milestones)


@dataclass
class TrainConfig:
    k: int = 3
    lambda_c: float = 1.0
    lambda_s: float = 1.0
    noise_std: float = 0.01
    lr_milestones: tuple = DEFAULT_MILESTONES
    phase1_epochs: int = 750
    phase1_batch: int = 256
    phase2_epochs: int = 400
    phase2_batch: int = 32
    seed: int = 0
    data_root: str = ""
    n_images: int = 2000
    split_mode: str = "disjoint"
    out_dir: str = "runs/train"
    checkpoint_every: int = 50
    init_seed: int = field(default=None)

    def __post_init__(self):
        self.lr_milestones = parse_milestones(self.lr_milestones)
        if self.init_seed is None:
            self.init_seed = self.seed
        self.validate()

    def validate(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not (self.lambda_c > 0 and self.lambda_s > 0):
            raise ConfigError("lambda_c and lambda_s must be positive")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        epochs = [e for e, _ in self.lr_milestones]
        if not epochs or epochs[0] != 0:
            raise ConfigError("lr_milestones must start at epoch 0")
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ConfigError("lr_milestones epochs must be strictly increasing")
        if any(r <= 0 for _, r in self.lr_milestones):
            raise ConfigError("learning rates must be positive")
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.phase1_batch < 1 or self.phase2_batch < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.split_mode not in ("disjoint", "shared"):
            raise ConfigError(f"unknown split mode {self.split_mode!r}")

    @property
    def total_epochs(self):
        return self.phase1_epochs + self.phase2_epochs

    def batch_size(self, epoch):
        return self.phase1_batch if epoch < self.phase1_epochs else self.phase2_batch

    def to_dict(self):
        d = asdict(self)
        d["lr_milestones"] = format_milestones(self.lr_milestones)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**coerce(d, cls))


def coerce(values, cls=TrainConfig):
    """Convert string values to the types of the matching dataclass fields."""
    types = {f.name: f.default for f in fields(cls)}
    out = {}
    for key, value in values.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        default = types[key]
        if not isinstance(value, str) or key == "lr_milestones":
            out[key] = value
        elif isinstance(default, bool):
            out[key] = value.strip().lower() in ("1", "true", "yes", "on")
        elif isinstance(default, int) or key == "init_seed":
            out[key] = int(value)
        elif isinstance(default, float):
            out[key] = float(value)
        else:
            out[key] = value
    return out


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def write_config_file(path, values):
    lines = [f"{k} = {v}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def env_overrides(keys, environ=None):
    environ = os.environ if environ is None else environ
    out = {}
    for key in keys:
        name = ENV_PREFIX + key.upper()
        if name in environ:
            out[key] = environ[name]
    return out
