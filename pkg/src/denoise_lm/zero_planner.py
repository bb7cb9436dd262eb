"""Per-GPU memory of model states under ZeRO partitioning stages 0-3.

Mixed-precision Adam keeps, per parameter, fp16 weights (2 B), fp16
gradients (2 B) and 16 B of optimizer state: fp32 master weights, fp32
gradient accumulator, and the two fp32 Adam moments. Stage 1 shards the
optimizer state across GPUs, stage 2 also the gradients, stage 3 also the
weights. Activations and communication buffers are not modeled.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class ModelPreset:
    name: str
    params_main: int
    params_aux: int
    hidden: int
    ffn: int
    depth_main: int
    depth_aux: int
    heads: int

    @property
    def total_params(self) -> int:
        return self.params_main + self.params_aux


PRESETS = {
    p.name: p
    for p in (
        ModelPreset("Base", 184_000_000, 29_000_000, 768, 3072, 12, 4, 12),
        ModelPreset("Large", 434_000_000, 116_000_000, 1024, 4096, 24, 6, 16),
        ModelPreset("XL", 1_600_000_000, 300_000_000, 1536, 6144, 48, 8, 24),
        ModelPreset("XXL", 5_400_000_000, 600_000_000, 2560, 10240, 64, 8, 40),
    )
}


def preset_params(name: str) -> int:
    """Main + auxiliary parameter count of a named preset."""
    try:
        return PRESETS[name].total_params
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; known presets: {', '.join(PRESETS)}") from None


@dataclass(frozen=True)
class BytesConfig:
    param_bytes: float = 2.0
    grad_bytes: float = 2.0
    optimizer_bytes: float = 16.0


@dataclass(frozen=True)
class MemoryPlan:
    params_bytes: float
    grads_bytes: float
    optimizer_bytes: float
    total_bytes: float
    total_params: int
    n_gpus: int
    stage: int

    def to_dict(self, binary: bool = False) -> dict:
        unit, scale = ("GiB", 2**30) if binary else ("GB", 1e9)
        d = asdict(self)
        d["unit"] = unit
        for key in ("params", "grads", "optimizer", "total"):
            d[f"{key}_{unit}"] = getattr(self, f"{key}_bytes") / scale
        return d


def plan(total_params: int, n_gpus: int, stage: int, bytes_cfg: BytesConfig = BytesConfig()) -> MemoryPlan:
    if total_params <= 0:
        raise ValueError("total_params must be positive")
    if n_gpus < 1:
        raise ValueError("n_gpus must be >= 1")
    if stage not in (0, 1, 2, 3):
        raise ValueError(f"ZeRO stage must be 0-3, got {stage}")
    params = total_params * bytes_cfg.param_bytes
    grads = total_params * bytes_cfg.grad_bytes
    optim = total_params * bytes_cfg.optimizer_bytes
    if stage >= 1:
        optim /= n_gpus
    if stage >= 2:
        grads /= n_gpus
    if stage >= 3:
        params /= n_gpus
    return MemoryPlan(params, grads, optim, params + grads + optim, total_params, n_gpus, stage)


# Reference per-GPU figures (rounded) for the XXL preset on 256 GPUs, in bytes.
REFERENCE_XXL_256 = {
    0: (12e9, 12e9, 96e9, 120e9),
    1: (12e9, 12e9, 400e6, 24.4e9),
    2: (12e9, 50e6, 400e6, 12.5e9),
    3: (50e6, 50e6, 400e6, 500e6),
}


def format_bytes(n: float, binary: bool = False) -> str:
    base = 1024.0 if binary else 1000.0
    units = ["B", "KiB", "MiB", "GiB", "TiB"] if binary else ["B", "KB", "MB", "GB", "TB"]
    i = 0
    while n >= base and i < len(units) - 1:
        n /= base
        i += 1
    return f"{n:.3g} {units[i]}"
