"""
Rich Character Embedding encoder.

A word is read as its one-hot character matrix, projected to the model
dimension, given sinusoidal positions and passed through a transformer
encoder; the output at the [BEG] position is the word vector.
"""

import os
from dataclasses import asdict, dataclass

import numpy as np

from alphabet_tokenizer import (
    Alphabet, WordTooLong, batch_token_ids, default_alphabet, encode_token,
)
from tensor_autodiff import (
    Module, Linear, TransformerEncoder, dropout, embedding_lookup, evaluating,
    get_rng, load_parameters, matmul, save_parameters, sinusoidal_table,
)
from utils import ConfigError, ConfigManager

ALPHABET_SUFFIX = '.alphabet'


class AlphabetMismatch(ValueError):
    """Two components, or a checkpoint and its alphabet, disagree on the alphabet."""


@dataclass
class RceConfig:
    embed_dim: int = 64
    layers: int = 3
    heads: int = 2
    ff_dim: int = 256
    max_word_len: int = 32
    dropout: float = 0.1

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"rce.layers must be at least 1, got {self.layers}")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigError(f"rce.embed_dim {self.embed_dim} is not divisible by rce.heads {self.heads}")
        if self.max_word_len < 3:
            raise ConfigError(f"tokenizer.max_word_len must be at least 3, got {self.max_word_len}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"rce.dropout must be in [0, 1), got {self.dropout}")

    @classmethod
    def from_config(cls):
        section = ConfigManager.get_config_section('rce')
        return cls(
            embed_dim=section.get('embed_dim', cls.embed_dim),
            layers=section.get('layers', cls.layers),
            heads=section.get('heads', cls.heads),
            ff_dim=section.get('ff_dim', cls.ff_dim),
            max_word_len=ConfigManager.get_config_value('tokenizer', 'max_word_len') or cls.max_word_len,
            dropout=section.get('dropout', cls.dropout),
        )


class WordEncoder(Module):
    """Shared surface of every model that maps a CharTokenSeq to one vector."""

    kind = None
    truncate = True

    @property
    def output_dim(self):
        raise NotImplementedError

    def encode(self, seqs):
        """Differentiable batch encoding -> Tensor [B x output_dim]."""
        raise NotImplementedError

    def describe(self):
        """JSON-serializable description used to rebuild the encoder from a checkpoint."""
        raise NotImplementedError

    def tokenize(self, words):
        return [encode_token(w, pad_to=self.max_word_len, alphabet=self.alphabet, truncate=self.truncate)
                for w in words]

    def embed_batch(self, seqs, chunk=256):
        """Eval-mode vectors of many sequences as a numpy matrix [n x output_dim]."""
        if not seqs:
            return np.zeros((0, self.output_dim))
        rows = []
        with evaluating(self):
            for start in range(0, len(seqs), chunk):
                rows.append(self.encode(seqs[start:start + chunk]).data)
        return np.concatenate(rows, axis=0)

    def embed_word(self, seq):
        return self.embed_batch([seq])[0]

    def embed_words(self, words):
        return self.embed_batch(self.tokenize(words))

    def _check_lengths(self, seqs):
        for seq in seqs:
            if seq.content_len > self.max_word_len:
                raise WordTooLong(
                    f"{seq.source!r} has {seq.content_len} tokens, the model accepts {self.max_word_len}")


class RceModel(WordEncoder):
    kind = 'rce'

    def __init__(self, config=None, alphabet=None, rng=None):
        self.config = config or RceConfig()
        self.alphabet = alphabet or default_alphabet()
        self.max_word_len = self.config.max_word_len
        rng = rng or get_rng()
        cfg = self.config
        self.input_projection = Linear(self.alphabet.size, cfg.embed_dim, rng)
        self.positions = sinusoidal_table(cfg.max_word_len, cfg.embed_dim)
        self.encoder = TransformerEncoder(cfg.layers, cfg.embed_dim, cfg.heads, cfg.ff_dim, cfg.dropout, rng)

    @property
    def output_dim(self):
        return self.config.embed_dim

    def project_one_hot(self, one_hot):
        """Input projection of a OneHotWord, [|C| x d]."""
        return matmul(one_hot.matrix.T, self.input_projection.weight) + self.input_projection.bias

    def encode_sequence(self, seqs):
        """Per-position encoder output [B x L x d] and the key mask [B x L]."""
        self._check_lengths(seqs)
        ids, lengths = batch_token_ids(seqs, self.alphabet)
        width = ids.shape[1]
        # row lookup of the projection weight equals one-hot @ W
        x = embedding_lookup(self.input_projection.weight, ids) + self.input_projection.bias
        x = x + self.positions[:width]
        x = dropout(x, self.config.dropout, self.training)
        key_mask = np.arange(width)[None, :] < lengths[:, None]
        return self.encoder(x, key_mask=key_mask), key_mask

    def encode(self, seqs):
        hidden, _ = self.encode_sequence(seqs)
        return hidden[:, 0, :]

    def describe(self):
        return {'kind': self.kind, 'config': asdict(self.config)}


def embed_word(model, seq):
    """Word vector of one sequence (the [BEG] output), eval mode."""
    return model.embed_word(seq)


def embed_batch(model, seqs):
    """Row i equals embed_word(model, seqs[i])."""
    return model.embed_batch(seqs)


def check_same_alphabet(*models):
    fingerprints = {m.alphabet.fingerprint() for m in models}
    if len(fingerprints) > 1:
        raise AlphabetMismatch(f"models use different alphabets: {sorted(fingerprints)}")


def build_encoder(description, alphabet):
    """Instantiate an untrained encoder from describe() output."""
    kind = description.get('kind')
    if kind == 'rce':
        return RceModel(RceConfig(**description['config']), alphabet)
    # loaded lazily to avoid a circular import
    from c2v_encoder import C2vConfig, C2vModel, CombinedEncoder
    if kind == 'c2v':
        return C2vModel(C2vConfig.from_description(description['config']), alphabet)
    if kind == 'combined':
        return CombinedEncoder(build_encoder(description['rce'], alphabet),
                               build_encoder(description['c2v'], alphabet))
    raise ValueError(f"unknown encoder kind {kind!r}")


def save_model(path, modules, alphabet, meta=None):
    """
    Save named modules into one parameter file plus an alphabet sidecar.

    :param modules: mapping of prefix -> Module; parameters are stored as '<prefix>.<name>'
    """
    arrays = {}
    for prefix, module in modules.items():
        for name, value in module.state_dict().items():
            arrays[f'{prefix}.{name}'] = value
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    save_parameters(path, arrays, alphabet.fingerprint(), meta)
    alphabet.save(path + ALPHABET_SUFFIX)
    ConfigManager.log_io_debug(f"Saved {len(arrays)} tensors and alphabet to {path}")


def load_bundle(path):
    """-> (arrays, alphabet, meta); the alphabet sidecar must match the stored hash."""
    arrays, alphabet_hash, meta = load_parameters(path)
    alphabet_path = path + ALPHABET_SUFFIX
    if os.path.isfile(alphabet_path):
        alphabet = Alphabet.load(alphabet_path)
    else:
        ConfigManager.log_warning(f"No alphabet file next to {path}; assuming the default alphabet")
        alphabet = default_alphabet()
    if alphabet.fingerprint() != alphabet_hash:
        raise AlphabetMismatch(
            f"{path} was saved with alphabet {alphabet_hash}, found {alphabet.fingerprint()}")
    return arrays, alphabet, meta


def save_encoder(model, path, extra=None):
    meta = {'encoder': model.describe()}
    meta.update(extra or {})
    save_model(path, {'encoder': model}, model.alphabet, meta)


def load_encoder(path):
    arrays, alphabet, meta = load_bundle(path)
    if 'encoder' not in meta:
        raise ValueError(f"{path} does not contain a word encoder")
    model = build_encoder(meta['encoder'], alphabet)
    model.load_state_dict(arrays, prefix='encoder.')
    model.eval()
    ConfigManager.log_status(f"Loaded {meta['encoder']['kind']} encoder from {path}")
    return model
