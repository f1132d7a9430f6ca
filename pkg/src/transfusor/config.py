"""
Run configuration: flat ``key = value`` files with command-line overrides.

Every key, its default and meaning is listed in :data:`OPTIONS`. The
effective configuration is echoed as ``run_config.txt`` next to each
command's outputs.
"""

import os
from dataclasses import dataclass

from .data import read_kv, write_kv
from .errors import ConfigurationError, FormatError

OUT_ENV = "TRANSFUSOR_OUT"


def _floats(text):
    return tuple(float(v) for v in str(text).replace(",", " ").split())


def _ints(text):
    return tuple(int(v) for v in str(text).replace(",", " ").split())


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key: (parser, default, description)
OPTIONS = {
    "seed": (int, 0, "seed for initialization, shuffling and sampling"),
    "method": (str, "fixed150", "extraction: fixed150, fixed300 or dynamic"),
    "downsample": (int, 10, "keep every n-th frame of fixed150 windows"),
    "exclude_overlaps": (_bool, False, "drop maneuvers whose window overlaps the previous one"),
    "reversed_direction": (int, 2, "drivingDirection code of traffic moving along -x"),
    "dyn_threshold": (float, 0.2, "dynamic window: quiet mean |vy| in m/s"),
    "dyn_interval": (int, 25, "dynamic window: averaging interval in frames"),
    "model": (str, "transfusor", "model to train: transfusor or cvae"),
    "epochs": (int, 2500, "training epochs"),
    "batch_size": (int, 128, "training batch size"),
    "lr": (float, 1e-3, "Adam learning rate"),
    "p_uncond": (float, 0.1, "probability of replacing a label by the null token"),
    "checkpoint_every": (int, 100, "write an intermediate checkpoint every k epochs (0 = only at the end)"),
    "diffusion_steps": (int, 100, "diffusion steps K"),
    "beta_start": (float, 1e-3, "first noise variance"),
    "beta_end": (float, 0.1, "last noise variance"),
    "latent": (int, 64, "CVAE latent width"),
    "kl_weight": (float, 0.01, "CVAE KL weight"),
    "guidance": (float, 0.0, "classifier-free guidance weight w"),
    "category": (str, "all", "category for generate/viz: all, an index, or vehicle/direction/aggressiveness"),
    "n": (int, 20, "trajectories per category for generate"),
    "thresholds": (_floats, (0.5, 1.0), "ADE thresholds in meters for evaluate"),
    "n_gen": (int, 0, "samples per category for evaluate (0 = max(50, category size))"),
    "steps": (_ints, (100, 80, 60, 40, 20, 0), "diffusion steps exported by viz"),
    "viz_n": (int, 50, "reverse chains sampled by viz"),
    "figures": (_bool, True, "render PNG figures next to the delimited outputs"),
}


def _fmt(value):
    if isinstance(value, tuple):
        return ",".join(f"{v:g}" if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


@dataclass
class RunConfig:
    values: dict

    @classmethod
    def defaults(cls):
        return cls({k: default for k, (_, default, _) in OPTIONS.items()})

    @classmethod
    def load(cls, path=None, overrides=None):
        """Defaults, then the file at ``path`` (if any), then non-``None`` overrides."""
        cfg = cls.defaults()
        if path:
            try:
                with open(path) as fh:
                    text = fh.read()
            except OSError as exc:
                raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
            try:
                pairs = read_kv(text)
            except FormatError as exc:
                raise ConfigurationError(f"{path}: {exc}") from None
            cfg.update(pairs, source=path)
        cfg.update({k: v for k, v in (overrides or {}).items() if v is not None}, source="command line")
        return cfg

    def update(self, pairs, source="?"):
        for key, raw in pairs.items():
            if key not in OPTIONS:
                raise ConfigurationError(f"{source}: unknown option {key!r}")
            parse = OPTIONS[key][0]
            try:
                self.values[key] = raw if not isinstance(raw, str) else parse(raw)
            except ValueError as exc:
                raise ConfigurationError(f"{source}: bad value for {key}: {exc}") from None

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def to_text(self):
        return write_kv((k, _fmt(v)) for k, v in self.values.items())


def describe_options():
    lines = []
    for key, (_, default, doc) in OPTIONS.items():
        lines.append(f"  {key} = {_fmt(default)}\n      {doc}")
    return "\n".join(lines)


def output_root(cli_value=None):
    return cli_value or os.environ.get(OUT_ENV) or "."

