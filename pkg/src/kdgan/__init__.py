"""Teacher-student knowledge distillation for conditional image-to-image GANs."""
from .config import ExperimentConfig, load_config, save_config
from .data import DatasetSpec, PairedDataset, generate_dataset, load_dataset, save_dataset
from .errors import (ComparabilityError, ConfigError, DataError, DivergenceError, KDGANError,
                     MissingArtifactError, NumericError, SegmenterGateError, ShapeError)
from .evaluation import (MetricsRecord, compare_runs, confusion_matrix, evaluate_generator, sample_bound,
                         train_reference_segmenter)
from .losses import LossWeights, student_total_objective
from .models import (DiscriminatorSpec, GeneratorSpec, build_patch_discriminator, build_unet_generator,
                     count_flops, count_params, forward_features)
from .trainer import SampleBoundWarning, distill, train_student_scratch, train_teacher

__version__ = "0.1.0"
