"""Single-image reflection removal with context encoding and an alignment-invariant loss."""

from .backbone import Backbone, BackboneInitError, get_backbone
from .imaging import SynthesisParams, TrainingSample, load_image, random_misalign, save_image, synthesize_pair
from .losses import LossWeights, aligned_total, invariant_loss, unaligned_total
from .metrics import MetricReport, lmse, ncc, psnr, ssim
from .network import Discriminator, DiscriminatorConfig, Generator, GeneratorConfig
from .training import TrainConfig, Trainer, finetune_unaligned, lr_at, train

__version__ = "0.1.0"
