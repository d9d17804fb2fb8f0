from cpdm.denoiser.net import (
    ConvResNet,
    DenoiserParams,
    NetConfig,
    backprop,
    denoise,
    init_params,
    load_checkpoint,
    save_checkpoint,
    segmenter_config,
)
from cpdm.denoiser.optim import (
    AdamState,
    EmaConfig,
    PlateauScheduler,
    adam_step,
    ema_update,
    plateau_scheduler,
)

__all__ = [
    "AdamState",
    "ConvResNet",
    "DenoiserParams",
    "EmaConfig",
    "NetConfig",
    "PlateauScheduler",
    "adam_step",
    "backprop",
    "denoise",
    "ema_update",
    "init_params",
    "load_checkpoint",
    "plateau_scheduler",
    "save_checkpoint",
    "segmenter_config",
]
