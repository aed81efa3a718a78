"""Session recommendation with tensor-train compressed item embeddings and
self-supervised distillation from a dense teacher, on a small numpy autograd."""

from .tt_compress import (CoreSet, FactorizedShape, Mode, compression_report, init_cores,
                          materialize_table, sttd_lookup, stp, tt_lookup)
from .model import ModelConfig, SessionRecModel, rec_loss
from .distill import KDConfig, distill, joint_loss
from .data import DatasetBundle, ingest, preprocess, split, synth_generate
from .metrics import evaluate, latency_benchmark, long_tail_report
from .training import train_supervised

__version__ = "0.1.0"
