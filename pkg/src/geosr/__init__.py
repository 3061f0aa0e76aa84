"""Location-conditioned super-resolution of satellite imagery."""
from .discriminators import (
    ImageDiscriminator,
    ImageDiscriminatorConfig,
    LocDiscriminatorConfig,
    LocationDiscriminator,
)
from .errors import ConfigError, GeoSRError, InputError, NonFiniteLossError, ParseError
from .geodata import GeoWorldParams, SynthConfig, TileRecord, assign_utm_zone, split_manifest
from .generator import Generator, GeneratorConfig, generate
from .location import LocationEmbedding, encode_location_sinusoidal, sample_false_location
from .losses import LossWeights, total_loss
from .metrics import hue_error, psnr, ssim
from .tiling import infer_direct, infer_tiled, partition, seam_artifact_index
from .training import TrainConfig, init_state, load_checkpoint, run_training, save_checkpoint, train_step

__version__ = "0.1.0"
