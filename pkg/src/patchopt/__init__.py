"""Lesion-volume statistics, transformer patch-size selection, and a
desk-scale 3D ViT encoder with exact gradients.

The pipeline: read label volumes (volume_io), measure lesions
(lesion_stats), derive the patch size that best matches the mean lesion
volume (patch_select), tokenize (tokenizer), and validate the encoder and
loss numerically (vit_core, loss, gradcheck). synth generates phantoms with
analytically known volumes as the independent oracle.
"""

from .config import PipelineConfig, load_config
from .lesion_stats import (
    DatasetStats,
    LesionStats,
    connected_components,
    dataset_stats,
    lesion_stats,
)
from .loss import dice_ce_grad, dice_ce_loss, dsc_metric
from .patch_select import (
    PatchDecision,
    TransferPlan,
    select_patch,
    target_edge,
    token_geometry,
    transfer_plan,
)
from .synth import Ellipsoid, PhantomSpec, random_spec, rasterize, write_fixture
from .tokenizer import EmbeddingParams, TokenSequence, detokenize, embed, extract_patches
from .vit_core import BASE, TINY, ViTConfig, ViTParams, backward, forward, param_count
from .volume_io import LabelVolume, read_nifti, write_nifti

__version__ = "0.1.0"

__all__ = [
    "PipelineConfig", "load_config",
    "DatasetStats", "LesionStats", "connected_components", "dataset_stats", "lesion_stats",
    "dice_ce_grad", "dice_ce_loss", "dsc_metric",
    "PatchDecision", "TransferPlan", "select_patch", "target_edge",
    "token_geometry", "transfer_plan",
    "Ellipsoid", "PhantomSpec", "random_spec", "rasterize", "write_fixture",
    "EmbeddingParams", "TokenSequence", "detokenize", "embed", "extract_patches",
    "BASE", "TINY", "ViTConfig", "ViTParams", "backward", "forward", "param_count",
    "LabelVolume", "read_nifti", "write_nifti",
    "__version__",
]
