"""Differentiable tunable ISP and edit-aware losses for RAW reconstruction."""

from .datasynth import DatasetManifest, SceneConfig, build_dataset, gen_scene
from .evalkit import EditPreset, EvalReport, builtin_presets, delta_e, evaluate_model, psnr, ssim
from .imagecore import ImageMeta, load_rawp, save_rawp
from .isp import EditISP, EditParams
from .losses import l_ft_masked, l_raw, l_srgb, l_srgb_ft_downsampled, l_total
from .lutfit import Lut1D, Lut3D, LutMLPRegressor, fit_mlp_to_lut3d, fit_mlp_to_tonecurve
from .mlp import MlpWeights
from .reconnet import RawReconstructor, finetune, train
from .sampling import EditSampler, IlluminantDictionary, SamplerConfig
from .unet import ModelConfig, UNet

__version__ = "0.1.0"

__all__ = [
    "DatasetManifest", "EditISP", "EditParams", "EditPreset", "EditSampler", "EvalReport",
    "IlluminantDictionary", "ImageMeta", "Lut1D", "Lut3D", "LutMLPRegressor", "MlpWeights",
    "ModelConfig", "RawReconstructor", "SamplerConfig", "SceneConfig", "UNet", "build_dataset",
    "builtin_presets", "delta_e", "evaluate_model", "finetune", "fit_mlp_to_lut3d",
    "fit_mlp_to_tonecurve", "gen_scene", "l_ft_masked", "l_raw", "l_srgb", "l_srgb_ft_downsampled",
    "l_total", "load_rawp", "psnr", "save_rawp", "ssim", "train",
]
