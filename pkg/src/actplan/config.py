"""Configuration types shared by every model in the package.

Model hyperparameters, the parallel layout, the recompute strategy, byte-size
conventions and the hardware description all live here, together with the
strict JSON config reader and the built-in presets.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from typing import Any

GIB = 1 << 30

#: Keys allowed in a config document, in canonical order.
CONFIG_KEYS = (
    "a", "h", "L", "s", "v",
    "t", "p", "m", "d", "b", "n_mb",
    "device_mem_bytes", "peak_flops", "devices",
)
_REQUIRED_KEYS = ("a", "h", "L", "s", "v", "t", "p", "b")

A100_PEAK_FLOPS = 312 * 10**12
A100_MEM_BYTES = 80 * GIB


class ConfigError(ValueError):
    """A config document could not be parsed or failed the schema."""

    def __init__(self, message: str, *, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class ValidationError(ValueError):
    """Raised when a computation is asked for an invalid shape/layout pair."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class ModelShape:
    """Transformer hyperparameters: heads, hidden size, layers, sequence, vocab."""

    a: int
    h: int
    L: int
    s: int
    v: int

    @property
    def head_dim(self) -> int:
        return self.h // self.a


@dataclass(frozen=True)
class ParallelLayout:
    """Tensor/pipeline/interleave/data-parallel sizes plus microbatching.

    ``n_mb`` defaults to ``p`` (the smallest count that fills the pipeline).
    """

    t: int = 1
    p: int = 1
    m: int = 1
    d: int = 1
    b: int = 1
    n_mb: int | None = None

    def __post_init__(self) -> None:
        if self.n_mb is None:
            object.__setattr__(self, "n_mb", self.p)

    @property
    def model_parallel_size(self) -> int:
        return self.t * self.p

    @property
    def batch_per_iteration(self) -> int:
        """Sequences processed per iteration across the data-parallel group."""
        return self.b * self.n_mb * self.d


class Recompute(str, enum.Enum):
    NONE = "none"
    FULL = "full"
    SELECTIVE = "selective"


@dataclass(frozen=True)
class RecomputeStrategy:
    """Which activation-storage regime is active.

    ``microbatch_level`` means some microbatches are fully stored and the rest
    use ``mode`` (full or selective); it is meaningless with ``mode=NONE``.
    """

    mode: Recompute = Recompute.NONE
    sequence_parallel: bool = False
    microbatch_level: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", Recompute(self.mode))
        if self.microbatch_level and self.mode is Recompute.NONE:
            raise ValueError("microbatch-level recomputation needs an inner full or selective strategy")

    @classmethod
    def parse(cls, text: str) -> "RecomputeStrategy":
        """Parse ``{none,full,selective}[+seq][+mblevel]``; part order is free."""
        parts = [part.strip().lower() for part in text.split("+")]
        modes = [part for part in parts if part in {r.value for r in Recompute}]
        if len(modes) != 1:
            raise ValueError(f"strategy {text!r} needs exactly one of none, full, selective")
        mode = Recompute(modes[0])
        flags = [part for part in parts if part != modes[0]]
        unknown = set(flags) - {"seq", "mblevel"}
        if unknown or len(set(flags)) != len(flags):
            raise ValueError(f"bad strategy modifiers in {text!r}")
        return cls(mode, "seq" in flags, "mblevel" in flags)

    @property
    def label(self) -> str:
        out = self.mode.value
        if self.sequence_parallel:
            out += "+seq"
        if self.microbatch_level:
            out += "+mblevel"
        return out

    @property
    def inner(self) -> "RecomputeStrategy":
        """The per-microbatch checkpointing regime, without windowing."""
        return replace(self, microbatch_level=False)

    @property
    def fully_stored(self) -> "RecomputeStrategy":
        """Same parallel flags, everything stored."""
        return RecomputeStrategy(Recompute.NONE, self.sequence_parallel)

    def __str__(self) -> str:
        return self.label


#: Every distinct strategy, ordered like the rows of the per-layer memory table.
ALL_STRATEGIES = tuple(
    RecomputeStrategy.parse(s)
    for s in (
        "none", "none+seq", "selective", "selective+seq", "full",
        "full+seq", "selective+mblevel", "selective+seq+mblevel",
        "full+mblevel", "full+seq+mblevel",
    )
)


@dataclass(frozen=True)
class ByteConvention:
    """Bytes per stored element.

    ``weight_elem`` and ``optimizer_bytes_per_param`` size the parameter and
    optimizer-state footprint (fp16 weights; fp16 grads, fp32 master copy and
    two fp32 Adam moments by default).
    """

    activation_elem: int = 2
    mask_elem: int = 1
    logits_elem: int = 4
    weight_elem: int = 2
    optimizer_bytes_per_param: int = 14

    def __post_init__(self) -> None:
        for name in ("activation_elem", "mask_elem", "logits_elem", "weight_elem"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.optimizer_bytes_per_param < 0:
            raise ValueError("optimizer_bytes_per_param must be >= 0")


@dataclass(frozen=True)
class Hardware:
    device_mem: int = A100_MEM_BYTES
    peak_flops_per_device: int = A100_PEAK_FLOPS
    devices: int = 1


@dataclass(frozen=True)
class Config:
    shape: ModelShape
    layout: ParallelLayout
    hardware: Hardware
    bytes: ByteConvention = field(default_factory=ByteConvention)

    def __iter__(self):
        return iter((self.shape, self.layout, self.hardware, self.bytes))


def validate(shape: ModelShape, layout: ParallelLayout) -> list[str]:
    """Return every violated invariant; an empty list means the pair is usable."""
    out = []
    for name in ("a", "h", "L", "s", "v"):
        if getattr(shape, name) < 1:
            out.append(f"{name} must be >= 1")
    for name in ("t", "p", "m", "d", "b", "n_mb"):
        if getattr(layout, name) < 1:
            out.append(f"{name} must be >= 1")
    if out:
        # divisibility checks are meaningless with zero/negative sizes
        return out
    if shape.h % shape.a:
        out.append("h not divisible by a")
    if shape.h % layout.t:
        out.append("h not divisible by t")
    if shape.s % layout.t:
        out.append("s not divisible by t")
    if shape.a % layout.t:
        out.append("a not divisible by t")
    if shape.L % (layout.p * layout.m):
        out.append("L not divisible by p·m")
    if layout.n_mb < layout.p:
        out.append("n_mb < p (pipeline cannot be filled)")
    return out


def check_hardware(layout: ParallelLayout, hw: Hardware) -> list[str]:
    out = []
    if hw.devices != layout.t * layout.p * layout.d:
        out.append(f"devices ({hw.devices}) != t·p·d ({layout.t * layout.p * layout.d})")
    if hw.device_mem < 1:
        out.append("device_mem_bytes must be >= 1")
    if hw.peak_flops_per_device < 1:
        out.append("peak_flops must be >= 1")
    return out


def require_valid(shape: ModelShape, layout: ParallelLayout) -> None:
    problems = validate(shape, layout)
    if problems:
        raise ValidationError(problems)


# -- config documents -------------------------------------------------------


def _reject_duplicates(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
    seen: dict[str, Any] = {}
    for key, value in pairs:
        if key in seen:
            raise ConfigError("duplicate key", field=key)
        seen[key] = value
    return seen


def _line_of(text: str, key: str) -> int | None:
    needle = json.dumps(key)
    for lineno, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return lineno
    return None


def parse_config(text: str) -> Config:
    """Parse a strict JSON config document.

    Unknown keys, duplicates, missing required keys and non-integer values
    are all errors. ``m``, ``d`` default to 1, ``n_mb`` to ``p``; hardware
    defaults to an 80 GiB, 312 TFLOP/s device and ``devices = t·p·d``.
    """
    if not text.strip():
        raise ConfigError("missing required field a", field="a")
    try:
        doc = json.loads(text, object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc.msg}", line=exc.lineno) from None
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object", line=1)

    for key in doc:
        if key not in CONFIG_KEYS:
            raise ConfigError("unknown key", line=_line_of(text, key), field=key)
    for key in _REQUIRED_KEYS:
        if key not in doc:
            raise ConfigError(f"missing required field {key}", field=key)
    for key, value in doc.items():
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError("value must be an integer", line=_line_of(text, key), field=key)

    shape = ModelShape(*(doc[k] for k in ("a", "h", "L", "s", "v")))
    layout = ParallelLayout(
        t=doc["t"], p=doc["p"], m=doc.get("m", 1), d=doc.get("d", 1),
        b=doc["b"], n_mb=doc.get("n_mb"),
    )
    hw = Hardware(
        device_mem=doc.get("device_mem_bytes", A100_MEM_BYTES),
        peak_flops_per_device=doc.get("peak_flops", A100_PEAK_FLOPS),
        devices=doc.get("devices", layout.t * layout.p * layout.d),
    )
    return Config(shape, layout, hw)


def config_to_dict(cfg: Config) -> dict[str, int]:
    shape, layout, hw = cfg.shape, cfg.layout, cfg.hardware
    return {
        "a": shape.a, "h": shape.h, "L": shape.L, "s": shape.s, "v": shape.v,
        "t": layout.t, "p": layout.p, "m": layout.m, "d": layout.d,
        "b": layout.b, "n_mb": layout.n_mb,
        "device_mem_bytes": hw.device_mem,
        "peak_flops": hw.peak_flops_per_device,
        "devices": hw.devices,
    }


def serialize_config(cfg: Config) -> str:
    return json.dumps(config_to_dict(cfg), indent=2) + "\n"


def load_config(path: str) -> Config:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


# -- presets ------------------------------------------------------------------


def _preset(a, h, L, t, p, m, gpus, global_batch, micro_batch) -> Config:
    layout = ParallelLayout(t=t, p=p, m=m, d=1, b=micro_batch, n_mb=global_batch // micro_batch)
    assert t * p == gpus
    return Config(ModelShape(a=a, h=h, L=L, s=2048, v=51200), layout, Hardware(devices=gpus))


#: The four evaluation models (no data parallelism, s=2048, v=51200).
PRESETS: dict[str, Config] = {
    "22b": _preset(64, 6144, 48, 8, 1, 1, 8, 4, 4),
    "175b": _preset(96, 12288, 96, 8, 8, 3, 64, 64, 1),
    "530b": _preset(128, 20480, 105, 8, 35, 3, 280, 280, 1),
    "1t": _preset(160, 25600, 128, 8, 64, 1, 512, 512, 1),
}


def preset(name: str) -> Config:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None


def with_data_parallel(cfg: Config, d: int) -> Config:
    """Scale a config to ``d`` model replicas, keeping batch per replica fixed."""
    layout = replace(cfg.layout, d=d)
    hw = replace(cfg.hardware, devices=layout.t * layout.p * d)
    return replace(cfg, layout=layout, hardware=hw)
