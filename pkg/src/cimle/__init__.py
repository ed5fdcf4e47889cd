"""Conditional implicit maximum likelihood estimation on desk-scale tasks."""

from .distance import DistanceSpec, FeatureExtractor, Term, calibrate_weights, distance, masked_distance
from .generators import ConditionalGenerator, build_generator, encode_noise, generate, set_upsample_mode
from .matching import MatchAssignment, ProjectionIndex, SampleBank, build_index, match_bruteforce, match_indexed
from .tasks import Dataset, SyntheticTask, make_synth
from .trainer import NumericalAbort, TrainConfig, TrainReport, pretrain_zero_noise, train, train_regression_baseline

__version__ = "0.1.0"
