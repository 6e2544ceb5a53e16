"""Model configuration and the key=value config file format."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    """Invalid model configuration or command-line input."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters plus memory-window settings.

    ``hidden`` must split evenly into ``heads`` query heads, and every
    kv head must serve the same number of query heads, so grouped-query
    attention can be sharded without splitting a group across devices.
    ``window`` is the maximum number of weight blocks resident at once
    under the sliding-window scheduler; ``gamma`` scales parameter bytes
    into a peak-memory estimate.
    """

    layers: int
    hidden: int
    vocab: int
    heads: int
    kv_heads: int
    ffn_size: int
    window: int = 4
    gamma: float = 1.0
    rope_theta: float = 10000.0
    norm_eps: float = 1e-5
    eos_id: int | None = None

    def __post_init__(self) -> None:
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.vocab < 1:
            raise ConfigError("vocab must be >= 1")
        if self.ffn_size < 1:
            raise ConfigError("ffn_size must be >= 1")
        if self.heads < 1 or self.kv_heads < 1:
            raise ConfigError("heads and kv_heads must be >= 1")
        if self.hidden % self.heads:
            raise ConfigError(
                f"hidden ({self.hidden}) must be divisible by heads ({self.heads})"
            )
        if self.heads % self.kv_heads:
            raise ConfigError(
                f"heads ({self.heads}) must be divisible by kv_heads ({self.kv_heads})"
            )
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if self.gamma < 1.0:
            raise ConfigError("gamma must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def heads_per_kv(self) -> int:
        return self.heads // self.kv_heads

    def canonical_text(self) -> str:
        """Stable key=value rendering used for files and the config digest."""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()

    def digest_bytes(self) -> bytes:
        return hashlib.sha256(self.canonical_text().encode()).digest()

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "ModelConfig":
        kwargs: dict[str, object] = {}
        known = {f.name: f for f in fields(cls)}
        for key, raw in mapping.items():
            if key not in known:
                raise ConfigError(f"unknown config key: {key}")
            if key in ("gamma", "rope_theta", "norm_eps"):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = int(raw)
        try:
            return cls(**kwargs)  # type: ignore[arg-type]
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_file(cls, path: str | Path) -> "ModelConfig":
        return cls.from_mapping(parse_kv_file(path))

    def to_file(self, path: str | Path) -> None:
        Path(path).write_text(self.canonical_text())


def parse_kv_file(path: str | Path) -> dict[str, str]:
    """Parse a ``key=value`` text file, ignoring blanks and '#' comments."""
    mapping: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        mapping[key.strip()] = value.strip()
    return mapping
