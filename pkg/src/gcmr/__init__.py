"""Co-memory regularized few-shot class-incremental learning, desk scale.

A numpy-only implementation of a two-phase learner: base-session finetuning
that blends masked feature reconstruction with classification, and
incremental sessions that train only the classifier head under
representation-memory and weight-memory regularization. Includes a
synthetic-data protocol runner, bit-reproducible serialization, evaluation
reports, and a CLI (``gcmr``).
"""

from .classifier import (ClassifierGrads, ClassifierParams, backward,
                         expand_with_imprinting, forward, init_classifier,
                         project)
from .data_io import (ProtocolSpec, SessionData, SyntheticSpec, TokenDataset,
                      fscil_split, generate_synthetic, load_checkpoint,
                      load_features, materialize_sessions, save_checkpoint,
                      save_dataset)
from .encoder import (DecoderParams, EncoderParams, MaskPlan, encode,
                      init_decoder, init_encoder, mask_features,
                      normalized_features, pool_normalize, reconstruct)
from .eval_report import SessionReport, aggregate, evaluate_session, write_report
from .losses import (DistanceDictionary, LossConfig, alpha_schedule,
                     base_loss, base_loss_backward, build_distance_dictionary,
                     distance_vector, incremental_loss)
from .memory import (RepresentationMemory, WeightMemory, build_weight_memory,
                     init_representation_memory, memory_budget_bytes,
                     update_representation_memory)
from .nn_core import (NumericalError, OptimizerState, cosine_lr,
                      cross_entropy, l2_normalize, layer_normalize, softmax,
                      sgd_momentum_step)
from .trainer import (SessionState, TrainConfig, run_protocol, train_base,
                      train_incremental)

__all__ = [name for name in dir() if not name.startswith("_")]
