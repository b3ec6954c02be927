"""Transfer attacks with optimised motion-blur and saturation augmentation."""

from ._core import (
    AugParams,
    Model,
    Error,
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    attack,
    attack_ids,
    blur_kernel,
    gradcheck,
    identity_params,
    image_mse,
    load_dataset,
    load_model,
    optimize_augmentation,
    psnr,
    render_report,
    run_experiment,
    ssim,
    synthetic,
    train_model,
    transform,
)

__all__ = [
    "AugParams",
    "Model",
    "Error",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "FormatError",
    "attack",
    "attack_ids",
    "blur_kernel",
    "gradcheck",
    "identity_params",
    "image_mse",
    "load_dataset",
    "load_model",
    "optimize_augmentation",
    "psnr",
    "render_report",
    "run_experiment",
    "ssim",
    "synthetic",
    "train_model",
    "transform",
]
