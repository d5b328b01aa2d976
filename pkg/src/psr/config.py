from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field


@dataclass
class RunConfig:
    # defaults follow the published hyper-parameter setting
    dim: int = 300
    depth: int = 2
    tau: float = 1.0
    epsilon: float = 0.05
    batch_size: int = 512
    dropout: float = 0.3
    learning_rate: float = 0.005
    patience: int = 3
    max_epochs: int = 100
    max_iterations: int = 20
    rng_seed: int = 0
    mode: str = "basic"  # basic | semi | lit
    rho: float = 0.9
    rms_eps: float = 1e-8
    train_ratio: float = 0.27
    dev_ratio: float = 0.03
    stop_gradient: bool = True
    data_dir: str | None = None
    literal_emb: str | None = None
    out_dir: str | None = None
    ks: tuple = field(default=(1, 10))
    block_size: int = 1024

    def __post_init__(self):
        if self.mode not in ("basic", "semi", "lit"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.depth < 1 or self.dim < 1:
            raise ValueError("dim and depth must be positive")
        if not 0 <= self.dropout <= 1:
            raise ValueError("dropout must be in [0, 1]")
        self.ks = tuple(int(k) for k in self.ks)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)
