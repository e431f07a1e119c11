"""Latent generation-order inference over permutation matrices.

Trains an encoder to place a distribution over the order in which an
insertion decoder emits target tokens, using score-function gradients
of an entropy-regularized objective.  Includes exact and Bethe matrix
permanents, Gumbel-Sinkhorn sampling with Hungarian rounding, planted
order corpora, order-distance metrics, and a CLI.
"""

from .corpus import Corpus, Episode, Vocab, gen_data, load_corpus, save_corpus
from .decoder import DecoderParams, decode, init_decoder, joint_log_prob
from .distributions import GumbelMatchingOrder, PlackettLuceOrder
from .encoder import EncoderParams, encoder_matrix, init_encoder, modal_order
from .metrics import OrderPair
from .permanent import bethe_permanent, exact_permanent, grad_log_q, log_q_density
from .permutations import InsertionCode, Permutation, PermutationMatrix
from .trainer import (RecoveryResult, StepReport, TrainConfig,
                      recover_order_experiment, train_step)

__version__ = "0.1.0"

__all__ = [
    "Corpus", "DecoderParams", "EncoderParams", "Episode",
    "GumbelMatchingOrder", "InsertionCode", "OrderPair", "Permutation",
    "PermutationMatrix", "PlackettLuceOrder", "RecoveryResult",
    "StepReport", "TrainConfig", "Vocab", "bethe_permanent", "decode",
    "encoder_matrix", "exact_permanent", "gen_data", "grad_log_q",
    "init_decoder", "init_encoder", "joint_log_prob", "load_corpus",
    "log_q_density", "modal_order", "recover_order_experiment",
    "save_corpus", "train_step", "__version__",
]
