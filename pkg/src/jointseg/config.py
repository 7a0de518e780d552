"""Run configuration: dataclasses plus a flat `key = value` file format.

Unknown keys in a config file are errors; command-line flags override file
values; writing then re-reading a config reproduces it exactly.
"""

from dataclasses import asdict, dataclass, fields

from .losses import LossWeights


@dataclass
class TrainConfig:
    max_iters: int = 36000
    sod_cod_ratio: tuple = (3, 1)
    base_lr: float = 2.5e-5
    decay_step: int = 24000
    decay_rate: float = 0.1
    batch_size: int = 15
    image_size: int = 352
    similarity_interval: int = 400
    latent_dim: int = 700
    mining_m: int = 400
    lambda1: float = 0.01
    lambda2: float = 0.01
    latent_weight: float = 0.1
    seed: int = 0
    separate_tasks: bool = False
    disable_similarity: bool = False
    disable_adversarial: bool = False
    grad_clip: float = 0.5
    freeze_bn: bool = False
    flip: bool = False
    num_workers: int = 0
    checkpoint_every: int = 4000

    def __post_init__(self):
        self.sod_cod_ratio = tuple(int(v) for v in self.sod_cod_ratio)
        if len(self.sod_cod_ratio) != 2 or any(v < 1 for v in self.sod_cod_ratio):
            raise ValueError(f"sod_cod_ratio must be two values >= 1, got {self.sod_cod_ratio}")
        positive = ("base_lr", "decay_rate", "batch_size", "image_size",
                    "similarity_interval", "latent_dim")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        # checkpoint_every = 0 turns periodic checkpoints off
        for name in ("max_iters", "decay_step", "mining_m", "seed", "num_workers",
                     "grad_clip", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.image_size % 32:
            raise ValueError(f"image_size must be divisible by 32, got {self.image_size}")

    @property
    def weights(self):
        return LossWeights(self.lambda1, self.lambda2, self.latent_weight)

    @property
    def target_size(self):
        return (self.image_size, self.image_size)


@dataclass
class RunConfig(TrainConfig):
    sod_manifest: str = ""
    cod_manifest: str = ""
    connection_manifest: str = ""
    out_dir: str = "runs/joint"
    checkpoint: str = ""
    device: str = "cpu"


def _format_value(value):
    if isinstance(value, tuple):
        return ":".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _parse_value(text, annotation):
    text = text.strip()
    if annotation is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if annotation is int:
        return int(text)
    if annotation is float:
        return float(text)
    if annotation is tuple:
        return tuple(int(v) for v in text.split(":"))
    return text


def config_to_text(config):
    lines = [f"{f.name} = {_format_value(getattr(config, f.name))}" for f in fields(config)]
    return "\n".join(lines) + "\n"


def write_config(config, path):
    with open(path, "w") as fh:
        fh.write(config_to_text(config))


def parse_config_text(text, cls=RunConfig):
    known = {f.name: f.type for f in fields(cls)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in known:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        try:
            values[key] = _parse_value(value, known[key])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    return cls(**values)


def read_config(path, cls=RunConfig):
    with open(path) as fh:
        return parse_config_text(fh.read(), cls)


def apply_overrides(config, overrides):
    """Return a copy of `config` with non-None override values applied."""
    known = {f.name: f.type for f in fields(type(config))}
    data = asdict(config)
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        data[key] = value
    return type(config)(**data)


def config_from_dict(data):
    """Rebuild a Train/RunConfig from a checkpointed field dict."""
    run_only = {f.name for f in fields(RunConfig)} - {f.name for f in fields(TrainConfig)}
    cls = RunConfig if any(k in data for k in run_only) else TrainConfig
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in data.items() if k in names})
