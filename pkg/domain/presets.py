# acrkn/domain/presets.py
"""
Architecture presets.

The robot presets fix the architecture used for each arm (latent observation
dimension m, latent state dimension n = 2m, K basis matrices, bandwidth,
layer widths, learning rate, lambda). `desk` and `tiny` are
small configurations for the synthetic systems and for gradient checks.

Bandwidth b keeps |i - j| <= b - 1 inside each m x m block.
"""

from typing import Any, Dict

from domain.errors import ConfigError

PRESETS: Dict[str, Dict[str, Any]] = {
    "pam": {
        "m": 60, "num_basis": 15, "bandwidth": 3, "lr": 3.1e-3, "optimizer": "adam",
        "encoder_hidden": [120], "decoder_hidden": [120], "var_decoder_hidden": [120],
        "control_hidden": [120, 120, 120], "action_decoder_hidden": [120],
    },
    "brokk": {
        "m": 30, "num_basis": 32, "bandwidth": 3, "lr": 5e-4, "optimizer": "adam",
        "encoder_hidden": [30], "decoder_hidden": [30], "var_decoder_hidden": [30],
        "control_hidden": [120], "action_decoder_hidden": [30],
        "protocol": "prefix", "prefix_len": 300,
    },
    "panda-fwd": {
        "m": 45, "num_basis": 15, "bandwidth": 3, "lr": 3.1e-3, "optimizer": "adam",
        "encoder_hidden": [120], "decoder_hidden": [240], "var_decoder_hidden": [240],
        "control_hidden": [30, 30, 30], "action_decoder_hidden": [240],
    },
    "panda-inv": {
        "mode": "inverse", "m": 15, "num_basis": 15, "bandwidth": 3, "lr": 7.62e-3, "optimizer": "adam",
        "encoder_hidden": [120], "decoder_hidden": [240], "var_decoder_hidden": [240],
        "control_hidden": [45], "action_decoder_hidden": [512], "lam": 0.158,
    },
    "panda-inv-nofb": {
        "mode": "inverse", "m": 30, "num_basis": 15, "bandwidth": 3, "lr": 3.5e-3, "optimizer": "adam",
        "encoder_hidden": [120], "decoder_hidden": [240], "var_decoder_hidden": [240],
        "control_hidden": [45], "action_decoder_hidden": [512], "lam": 0.179,
        "action_feedback": False,
    },
    "barrett-inv": {
        "mode": "inverse", "m": 15, "num_basis": 15, "bandwidth": 3, "lr": 7.7e-3, "optimizer": "adam",
        "encoder_hidden": [120], "decoder_hidden": [240], "var_decoder_hidden": [240],
        "control_hidden": [45], "action_decoder_hidden": [256, 256], "lam": 0.176,
    },
    "barrett-inv-nofb": {
        "mode": "inverse", "m": 30, "num_basis": 15, "bandwidth": 3, "lr": 1.7e-3, "optimizer": "adam",
        "encoder_hidden": [120], "decoder_hidden": [240], "var_decoder_hidden": [240],
        "control_hidden": [45], "action_decoder_hidden": [512], "lam": 0.0,
        "action_feedback": False,
    },
    "desk": {
        "m": 8, "num_basis": 4, "bandwidth": 2, "lr": 3e-3, "optimizer": "adam",
        "encoder_hidden": [32], "decoder_hidden": [32], "var_decoder_hidden": [32],
        "control_hidden": [32, 32], "action_decoder_hidden": [64],
        "epochs": 100, "batch_size": 16,
        "protocol": "random", "drop_fraction": 0.75, "prefix_len": 60,
    },
    "tiny": {
        "m": 3, "num_basis": 2, "bandwidth": 2, "lr": 1e-2, "optimizer": "adam",
        "encoder_hidden": [8], "decoder_hidden": [8], "var_decoder_hidden": [8],
        "control_hidden": [8], "action_decoder_hidden": [8],
        "epochs": 5, "batch_size": 4,
    },
}


def get_preset(name: str) -> Dict[str, Any]:
    if name not in PRESETS:
        raise ConfigError(f"Unknown preset: {name}. Known presets: {sorted(PRESETS)}")
    return {k: (list(v) if isinstance(v, list) else v) for k, v in PRESETS[name].items()}
