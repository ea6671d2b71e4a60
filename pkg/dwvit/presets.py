"""
Named model presets, bypass variants and training schedules.
"""

from typing import Any, Dict

from dwvit.config import BypassSpec, ModelConfig, TrainConfig
from dwvit.errors import ConfigurationError

vit = {
    "image_size": 224,
    "patch_size": 16,
    "in_channels": 3,
    "depth": 12,
    "mlp_ratio": 4.0,
    "num_classes": 10,
}
models = {
    "vit-tiny": {
        **vit,
        "dim": 192,
        "heads": 3,
    },
    "vit-small": {
        **vit,
        "dim": 384,
        "heads": 6,
    },
    # native 32x32 inputs, no resize to 224
    "desk": {
        "image_size": 32,
        "patch_size": 4,
        "dim": 64,
        "depth": 4,
        "heads": 2,
        "mlp_ratio": 4.0,
        "num_classes": 10,
    },
    "gradcheck": {
        "image_size": 4,
        "patch_size": 2,
        "dim": 8,
        "depth": 2,
        "heads": 2,
        "mlp_ratio": 2.0,
        "num_classes": 3,
    },
}

variants = {
    "vanilla": {"kind": "none"},
    "shortcut": {"kind": "identity"},
    "kernel3": {"kind": "dwconv", "kernel_sizes": [3]},
    "kernel5": {"kind": "dwconv", "kernel_sizes": [5]},
    "kernel7": {"kind": "dwconv", "kernel_sizes": [7]},
    "kernel3+5": {"kind": "dwconv", "kernel_sizes": [3, 5]},
    "kernel3+5+7": {"kind": "dwconv", "kernel_sizes": [3, 5, 7]},
    "group2": {"kind": "dwconv", "kernel_sizes": [3], "group_size": 2},
    "group3": {"kind": "dwconv", "kernel_sizes": [3], "group_size": 3},
    "group4": {"kind": "dwconv", "kernel_sizes": [3], "group_size": 4},
    "group6": {"kind": "dwconv", "kernel_sizes": [3], "group_size": 6},
}

schedules = {
    "full": {
        "epochs": 300,
        "warmup_epochs": 20,
        "batch_size": 128,
    },
    # scaled down from 300/20/128
    "desk": {
        "epochs": 15,
        "warmup_epochs": 2,
        "batch_size": 64,
    },
}


def _lookup(table: Dict[str, Dict[str, Any]], name: str, what: str) -> Dict[str, Any]:
    if name not in table:
        raise ConfigurationError(f"Unknown {what}: {name}\n    Available: {sorted(table)}")
    return dict(table[name])


def model_preset(name: str, variant: str = "kernel3", **overrides: Any) -> ModelConfig:
    fields = _lookup(models, name, "model preset")
    fields["bypass"] = BypassSpec(**_lookup(variants, variant, "bypass variant"))
    fields.update(overrides)
    return ModelConfig(**fields)


def train_preset(name: str, **overrides: Any) -> TrainConfig:
    fields = _lookup(schedules, name, "schedule")
    fields.update(overrides)
    return TrainConfig(**fields)
