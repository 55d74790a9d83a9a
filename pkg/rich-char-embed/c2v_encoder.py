"""
Convolutional character encoder and the combined RCE + c2v encoder.
"""

from dataclasses import asdict, dataclass

import numpy as np

from alphabet_tokenizer import batch_token_ids, default_alphabet
from rce_encoder import WordEncoder, check_same_alphabet
from tensor_autodiff import (
    Conv1d, Linear, Tensor, concat, embedding_lookup, get_rng, masked_fill,
    max_pool1d, parameter, relu, reshape,
)
from utils import ConfigError, ConfigManager


@dataclass
class C2vConfig:
    char_embed_dim: int = 32
    kernel_widths: tuple = (2, 3, 4)
    filters: int = 32
    output_dim: int = 64
    max_word_len: int = 32

    def __post_init__(self):
        self.kernel_widths = tuple(int(k) for k in self.kernel_widths)
        if not self.kernel_widths or min(self.kernel_widths) < 1:
            raise ConfigError(f"c2v.kernel_widths must be positive, got {self.kernel_widths}")
        if self.filters < 1 or self.char_embed_dim < 1 or self.output_dim < 1:
            raise ConfigError("c2v sizes must be positive")

    @classmethod
    def from_config(cls):
        section = ConfigManager.get_config_section('c2v')
        return cls(
            char_embed_dim=section.get('char_embed_dim', cls.char_embed_dim),
            kernel_widths=tuple(section.get('kernel_widths', cls.kernel_widths)),
            filters=section.get('filters', cls.filters),
            output_dim=section.get('output_dim', cls.output_dim),
            max_word_len=ConfigManager.get_config_value('tokenizer', 'max_word_len') or cls.max_word_len,
        )

    @classmethod
    def from_description(cls, values):
        return cls(**values)


class C2vModel(WordEncoder):
    """
    Character embedding -> 1-d convolutions -> max over positions -> linear.

    Windows may start at any content position; they read zero vectors past
    [END], and windows starting in the padding are excluded from pooling, so
    the vector does not depend on how far the word was padded.
    """

    kind = 'c2v'

    def __init__(self, config=None, alphabet=None, rng=None):
        self.config = config or C2vConfig()
        self.alphabet = alphabet or default_alphabet()
        self.max_word_len = self.config.max_word_len
        rng = rng or get_rng()
        cfg = self.config
        self.char_embedding = parameter(rng.normal(0.0, 1.0 / np.sqrt(cfg.char_embed_dim),
                                                   (self.alphabet.size, cfg.char_embed_dim)))
        self.convolutions = [Conv1d(cfg.char_embed_dim, cfg.filters, k, rng) for k in cfg.kernel_widths]
        self.output = Linear(cfg.filters * len(cfg.kernel_widths), cfg.output_dim, rng)

    @property
    def output_dim(self):
        return self.config.output_dim

    def encode(self, seqs):
        self._check_lengths(seqs)
        ids, lengths = batch_token_ids(seqs, self.alphabet)
        batch, width = ids.shape
        content = np.arange(width)[None, :] < lengths[:, None]

        chars = embedding_lookup(self.char_embedding, ids) * content[:, :, None]
        tail = max(self.config.kernel_widths) - 1
        if tail:
            chars = concat([chars, Tensor(np.zeros((batch, tail, self.config.char_embed_dim)))], axis=1)

        pooled = []
        for conv in self.convolutions:
            features = relu(conv(chars))[:, :width, :]
            features = masked_fill(features, ~content[:, :, None])
            pooled.append(reshape(max_pool1d(features, width), (batch, self.config.filters)))
        return self.output(concat(pooled, axis=1))

    def describe(self):
        return {'kind': self.kind, 'config': asdict(self.config)}


class CombinedEncoder(WordEncoder):
    """Concatenation [RCE | c2v]; both parts are trained through the same heads."""

    kind = 'combined'

    def __init__(self, rce, c2v):
        check_same_alphabet(rce, c2v)
        self.rce = rce
        self.c2v = c2v
        self.alphabet = rce.alphabet
        self.max_word_len = min(rce.max_word_len, c2v.max_word_len)

    @property
    def output_dim(self):
        return self.rce.output_dim + self.c2v.output_dim

    def encode(self, seqs):
        return concat([self.rce.encode(seqs), self.c2v.encode(seqs)], axis=1)

    def describe(self):
        return {'kind': self.kind, 'rce': self.rce.describe(), 'c2v': self.c2v.describe()}


def embed_word_conv(model, seq):
    return model.embed_word(seq)


def embed_word_combined(rce, c2v, seq):
    """Concatenated vector of one word; the alphabets of both encoders must match."""
    return CombinedEncoder(rce, c2v).embed_word(seq)
