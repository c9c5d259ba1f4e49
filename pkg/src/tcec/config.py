"""Flat ``section.key = value`` experiment configuration.

One assignment per line, ``#`` starts a comment, no nesting.  Every key has a
typed default; unknown keys and unparsable values raise :class:`ConfigError`.
"""

from dataclasses import dataclass
import hashlib

from .errors import ConfigError
from .solvers import VARIANTS

# key -> (type, default)
SCHEMA = {
    "schedule.kind": (str, "linear"),
    "schedule.T": (int, 1000),
    "schedule.beta_start": (float, 1e-4),
    "schedule.beta_end": (float, 0.02),

    "latent.channels": (int, 4),
    "latent.height": (int, 8),
    "latent.width": (int, 8),

    "denoiser.kind": (str, "analytic_gaussian"),
    "denoiser.mean": (float, 0.5),
    "denoiser.scale": (float, 0.5),
    "denoiser.seed": (int, 0),
    "denoiser.width": (int, 64),
    "denoiser.depth": (int, 2),
    "denoiser.output_scale": (float, 1.0),

    "error.kind": (str, "scaled_output"),
    "error.kstar_scale": (float, 0.1),
    "error.kstar_seed": (int, 0),
    "error.sigma": (str, "auto"),
    "error.sigma_fraction": (float, 0.01),
    "error.kstar_file": (str, ""),

    "quant.wbits": (int, 8),
    "quant.abits": (int, 8),
    "quant.granularity": (str, "per_tensor"),
    "quant.group_size": (int, 16),
    "quant.symmetric": (bool, True),

    "sampler.solver": (str, "ddim"),
    "sampler.steps": (int, 50),
    "sampler.window": (int, 0),
    "sampler.weights": (str, "inverse"),
    "sampler.lambda_decay": (float, 0.0),

    "calibration.samples": (int, 64),
    "calibration.seed": (int, 1234),
    "calibration.lambda": (str, "empirical"),
    "calibration.grid": (str, "0,1e-4,1e-3,1e-2,1e-1,1,10"),
    "calibration.holdout": (float, 0.25),

    "run.variants": (str, "fp,quant,tcec"),
    "run.seeds": (str, "0..19"),
    "run.k_file": (str, ""),
    "run.seed": (int, 0),

    "output.dir": (str, "out"),
}

CHOICES = {
    "schedule.kind": ("linear",),
    "denoiser.kind": ("analytic_gaussian", "seeded_mlp"),
    "error.kind": ("zero", "gaussian", "scaled_output", "fake_quant"),
    "quant.granularity": ("per_tensor", "per_channel", "per_group"),
    "sampler.solver": ("ddim", "dpmpp2"),
    "sampler.weights": ("inverse", "recursion"),
}


def _parse_value(key, text):
    typ = SCHEMA[key][0]
    try:
        if typ is bool:
            low = text.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(text)
        return typ(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {typ.__name__}") from None


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_seed_range(text):
    """``"a..b"`` (inclusive), ``"a,b,c"`` or a single integer."""
    text = str(text).strip()
    try:
        if ".." in text:
            lo, _, hi = text.partition("..")
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise ConfigError(f"empty seed range {text!r}")
            return list(range(lo, hi + 1))
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad seed range {text!r}") from None


@dataclass(frozen=True)
class Config:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, **pairs):
        """Return a copy with ``section_key=value`` overrides (``.`` spelled ``__``)."""
        upd = dict(self.values)
        for k, v in pairs.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            upd[key] = _parse_value(key, v) if isinstance(v, str) else SCHEMA[key][0](v)
        return validate(upd)

    def to_text(self):
        return "".join(f"{k} = {_format_value(self.values[k])}\n" for k in sorted(self.values))

    def fingerprint(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    @property
    def seeds(self):
        return parse_seed_range(self.values["run.seeds"])

    @property
    def variants(self):
        return [v.strip() for v in self.values["run.variants"].split(",") if v.strip()]

    @property
    def window(self):
        m = self.values["sampler.window"]
        if m:
            return m
        return 1 if self.values["sampler.solver"] == "ddim" else 2


def validate(values):
    for key, allowed in CHOICES.items():
        if values[key] not in allowed:
            raise ConfigError(f"{key} must be one of {allowed}, got {values[key]!r}")
    for key in ("schedule.T", "sampler.steps", "calibration.samples",
                "latent.channels", "latent.height", "latent.width"):
        if values[key] < 1:
            raise ConfigError(f"{key} must be >= 1")
    if values["sampler.steps"] > values["schedule.T"]:
        raise ConfigError("sampler.steps exceeds schedule.T")
    if values["sampler.window"] < 0 or values["sampler.lambda_decay"] < 0:
        raise ConfigError("sampler.window and sampler.lambda_decay must be >= 0")
    if not 0 <= values["error.kstar_scale"] < 1:
        raise ConfigError("error.kstar_scale must be in [0, 1)")
    if values["error.sigma"] != "auto":
        try:
            sig = float(values["error.sigma"])
        except ValueError:
            raise ConfigError(f"error.sigma must be auto or a number, got {values['error.sigma']!r}") from None
        if sig < 0:
            raise ConfigError("error.sigma must be >= 0")
    lam = values["calibration.lambda"]
    if lam not in ("empirical", "grid"):
        try:
            lam_value = float(lam)
        except ValueError:
            raise ConfigError(f"calibration.lambda must be empirical, grid or a number, got {lam!r}") from None
        if lam_value < 0:
            raise ConfigError("calibration.lambda must be >= 0")
    cfg = Config(dict(values))
    for v in cfg.variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    if not cfg.seeds:
        raise ConfigError("run.seeds is empty")
    return cfg


def default_config() -> Config:
    return validate({k: d for k, (_, d) in SCHEMA.items()})


def parse_config(text: str) -> Config:
    values = {k: d for k, (_, d) in SCHEMA.items()}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        values[key] = _parse_value(key, val)
    return validate(values)


def load_config(path=None) -> Config:
    if path is None:
        return default_config()
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
