"""c-VEP decoding harness: a frozen encoder with a trainable task head, evaluated
calibration-free, with limited calibration and within-subject, plus a CCA baseline."""

from .codebook import BitSequence, CodeBook, build_codebook, circular_shift, generate_golay_pair, generate_m_sequence
from .dataset import Dataset, SubjectRecord, load_dataset, write_dataset
from .dsp import TrialSet, design_bandpass, fit_length, synthesize_shifted
from .encoder import FeatureTensor, ReferenceEncoderParams, SpatialFilter, load_features, reference_encode
from .head import Model, TaskHead, TrainConfig, load_checkpoint, save_checkpoint, train
from .protocols import (ExperimentResult, ProtocolConfig, aggregate, calibration_seconds, prepare_dataset,
                        run_calibration_free, run_limited, run_within)
from .synth import CohortSpec, generate_cohort

__version__ = "0.1.0"
