"""Multi-label transcription-factor binding-site learning with causal
temporal convolutions, plus the attribution tooling to explain what the
trained models picked up."""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, finite_difference_check, no_grad
from .data import (DataError, EncodedDataset, GenomicInterval, LabeledRegion,
                   SyntheticSpec, dinucleotide_shuffle, generate_synthetic,
                   intersect_peaks, load_dataset, one_hot, parse_bed,
                   parse_fasta, save_dataset, split_dataset)
from .metrics import (MetricsReport, average_precision, metrics_report,
                      roc_auc)
from .model import ModelConfig, TcnModel, conv1d_causal, receptive_field
from .training import (AdamState, ModelCheckpoint, TrainConfig,
                       TrainingDiverged, adam_step, bce_multilabel_loss,
                       load_checkpoint, lr_schedule, save_checkpoint, train)
from .attribution import (AttributionMap, Pwm, Seqlet, integrated_gradients,
                          pwm_similarity)

__all__ = [name for name in dir() if not name.startswith("_")]
