"""Human-aware motion deblurring: supervised attention, three-branch decoding, multi-scale training."""

from .attention import AttentionNet, attention_loss, gate_features
from .config import TrainConfig
from .data import AnnotatedSample, BoundingBox, load_dataset, rasterize_mask, synthesize_blur
from .losses import bg_loss, fg_loss, primary_loss, total_loss
from .metrics import psnr, region_metrics, ssim
from .network import DeblurNet, NetworkConfig, build_model

__version__ = "0.1.0"
