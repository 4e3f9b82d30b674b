"""Run configuration: every tunable of the pipeline in one place.

Config files are flat `key = value` text; command-line flags override
file values. Defaults follow the evaluation setup the engine was built
around (patch side and stride 5, 16 weighting centroids with alpha 10,
100 candidates, 25 m recall radius).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ConfigError
from .finetune import FinetuneConfig
from .retrieval import IndexConfig


@dataclass
class RunConfig:
    # patch geometry
    d_p: int = 5
    s_p: int = 5
    # descriptor pipeline
    vlad_clusters: int = 64
    d_pca: int = 512
    # patch weighting
    k: int = 16
    alpha: int = 10
    # triplet mining / fine-tuning
    k_p: int = 3
    k_n: int = 3
    margin: float = 0.1
    learning_rate: float = 1e-4
    momentum: float = 0.9
    epochs: int = 10
    ratio_threshold: float = 0.8
    ransac_iters: int = 1000
    ransac_tol: float = 3.0
    positive_radius_m: float = 10.0
    negative_radius_m: float = 25.0
    # retrieval / evaluation
    k_candidates: int = 100
    radius_m: float = 25.0
    seed: int = 0

    def __post_init__(self):
        if self.d_p < 1 or self.s_p < 1:
            raise ConfigError("d_p and s_p must be >= 1")
        if self.vlad_clusters < 1 or self.d_pca < 1:
            raise ConfigError("vlad_clusters and d_pca must be >= 1")
        if self.k < 1 or not 1 <= self.alpha <= self.k:
            raise ConfigError("need k >= 1 and 1 <= alpha <= k")
        if self.k_p < 1 or self.k_n < 1:
            raise ConfigError("k_p and k_n must be >= 1")
        if self.margin <= 0:
            raise ConfigError("margin must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.epochs < 1 or self.ransac_iters < 1:
            raise ConfigError("epochs and ransac_iters must be >= 1")
        if not 0.0 < self.ratio_threshold <= 1.0:
            raise ConfigError("ratio_threshold must lie in (0, 1]")
        if self.ransac_tol <= 0 or self.radius_m <= 0:
            raise ConfigError("ransac_tol and radius_m must be positive")
        if self.positive_radius_m <= 0 or self.negative_radius_m <= 0:
            raise ConfigError("GPS radii must be positive")
        if self.k_candidates < 1:
            raise ConfigError("k_candidates must be >= 1")

    def finetune_config(self) -> FinetuneConfig:
        return FinetuneConfig(
            margin=self.margin,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            epochs=self.epochs,
            k_p=self.k_p,
            k_n=self.k_n,
            ratio_threshold=self.ratio_threshold,
            ransac_iters=self.ransac_iters,
            ransac_tol=self.ransac_tol,
            seed=self.seed,
        )

    def index_config(self) -> IndexConfig:
        return IndexConfig(
            d_p=self.d_p,
            s_p=self.s_p,
            k=self.k,
            alpha=self.alpha,
            d_pca=self.d_pca,
            seed=self.seed,
        )

    def replace(self, **kwargs) -> "RunConfig":
        return dataclasses.replace(self, **kwargs)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _parse_value(name: str, raw: str):
    if name not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {name!r}")
    kind = _FIELD_TYPES[name]
    try:
        return int(raw) if kind == "int" else float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    """Parse a flat key=value file on top of defaults (or a given base)."""
    values = dataclasses.asdict(base) if base is not None else {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            name, raw = (part.strip() for part in line.split("=", 1))
            values[name] = _parse_value(name, raw)
    return RunConfig(**values)
