"""Gaussian encoder/decoder, loss variants and the training loop."""

from .losses import *  # noqa: F401,F403
from .networks import EncoderDecoder, LatentDistribution, encode, observations_to_tensor  # noqa: F401
from .training import *  # noqa: F401,F403
