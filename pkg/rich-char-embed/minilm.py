"""
Small BERT-like language model with a pluggable word embedding layer.

The lookup variant reads word ids from a vocabulary table; the RCE variant
builds every word vector from its characters, so no word is out of
vocabulary. Both are pretrained with masked word prediction plus next
sentence prediction and evaluated on a four-way continuation choice.
"""

import sys
from dataclasses import asdict, dataclass, field

import numpy as np
from tqdm import tqdm

from alphabet_tokenizer import default_alphabet, encode_token
from corpus_io import CorpusFormatError, build_dictionary
from rce_encoder import RceConfig, RceModel, load_bundle, save_model
from tensor_autodiff import (
    Adam, Linear, Module, Tensor, TransformerEncoder, cross_entropy, embedding_lookup,
    evaluating, get_rng, lr_schedule, parameter, reshape, sinusoidal_table, tanh,
)
from training_heads import CharDecoder, target_ids
from utils import ConfigError, ConfigManager

CLS = '[CLS]'
SEP = '[SEP]'
MASK = '[MASK]'
PAD_WORD = '[PAD]'
UNK_WORD = '[UNK]'
SPECIAL_WORDS = (PAD_WORD, UNK_WORD, CLS, SEP, MASK)

IS_NEXT = 1
NOT_NEXT = 0


class SequenceTooLong(ValueError):
    """A framed sentence pair exceeds the maximum sequence length."""


@dataclass
class LmConfig:
    variant: str = 'rce'
    dim: int = 128
    heads: int = 4
    layers: int = 4
    ff_dim: int = 128
    batch_pairs: int = 12
    mask_rate: float = 0.15
    dropout: float = 0.1
    max_seq_len: int = 64
    char_layers: int = 2
    char_heads: int = 2
    max_word_len: int = 32
    vocab_size: int = 10000
    warmup_steps: int = 5000
    total_steps: int = 300000
    max_lr: float = 0.001

    def __post_init__(self):
        if self.variant not in ('rce', 'lookup'):
            raise ConfigError(f"language_model.variant must be rce or lookup, got {self.variant!r}")
        if self.dim % self.heads or self.dim % self.char_heads:
            raise ConfigError(f"language_model.dim {self.dim} must be divisible by the head counts")
        if self.max_seq_len < 3:
            raise ConfigError("language_model.max_seq_len must leave room for [CLS] and two [SEP]")
        if not 0.0 < self.mask_rate < 1.0:
            raise ConfigError(f"language_model.mask_rate must be in (0, 1), got {self.mask_rate}")

    @classmethod
    def from_config(cls, **extra):
        section = ConfigManager.get_config_section('language_model')
        values = {name: section[name] for name in (
            'variant', 'dim', 'heads', 'layers', 'ff_dim', 'batch_pairs', 'mask_rate', 'max_seq_len',
            'char_layers', 'char_heads', 'vocab_size', 'warmup_steps', 'total_steps', 'max_lr',
        ) if name in section}
        dropout = ConfigManager.get_config_value('rce', 'dropout')
        values['dropout'] = cls.dropout if dropout is None else dropout
        values['max_word_len'] = ConfigManager.get_config_value('tokenizer', 'max_word_len') or cls.max_word_len
        values.update(extra)
        return cls(**values)


class EmbeddingLayer(Module):
    """Maps words to model vectors and scores masked words."""

    variant = None

    def embed(self, words):
        """Tensor [len(words) x dim]."""
        raise NotImplementedError

    def masked_word_loss(self, hidden, words):
        """Cross-entropy of recovering words from their hidden states [m x dim]."""
        raise NotImplementedError

    def describe(self):
        raise NotImplementedError


class LookupEmbedding(EmbeddingLayer):
    """Whole-word table; words outside the vocabulary share the [UNK] row."""

    variant = 'lookup'

    def __init__(self, vocabulary, dim, rng=None):
        rng = rng or get_rng()
        words = list(SPECIAL_WORDS) + [w for w in vocabulary if w not in SPECIAL_WORDS]
        self.vocabulary = tuple(words)
        self.index_of = {w: i for i, w in enumerate(self.vocabulary)}
        self.unknown_id = self.index_of[UNK_WORD]
        self.table = parameter(rng.normal(0.0, 0.02, (len(self.vocabulary), dim)))
        self.output = Linear(dim, len(self.vocabulary), rng)

    @classmethod
    def from_corpus(cls, corpus, config, rng=None):
        return cls(build_dictionary(corpus, config.vocab_size).tokens, config.dim, rng)

    def ids(self, words):
        return np.array([self.index_of.get(w, self.unknown_id) for w in words], dtype=np.int64)

    def embed(self, words):
        return embedding_lookup(self.table, self.ids(words))

    def masked_word_loss(self, hidden, words):
        return cross_entropy(self.output(hidden), self.ids(words))

    def describe(self):
        return {'variant': self.variant, 'vocabulary': list(self.vocabulary)}


class RceEmbedding(EmbeddingLayer):
    """Character encoder for inputs and a character decoder for masked words."""

    variant = 'rce'

    def __init__(self, config, alphabet=None, rng=None):
        rng = rng or get_rng()
        self.alphabet = alphabet or default_alphabet()
        self.encoder = RceModel(RceConfig(embed_dim=config.dim, layers=config.char_layers,
                                          heads=config.char_heads, ff_dim=config.ff_dim,
                                          max_word_len=config.max_word_len, dropout=config.dropout),
                                self.alphabet, rng)
        self.decoder = CharDecoder(config.dim, self.alphabet.size, config.max_word_len,
                                   config.char_layers, config.char_heads, config.ff_dim,
                                   config.dropout, rng)
        self._seqs = {}

    def seqs(self, words):
        for word in words:
            if word not in self._seqs:
                self._seqs[word] = encode_token(word, pad_to=self.encoder.max_word_len, alphabet=self.alphabet)
        return [self._seqs[w] for w in words]

    def embed(self, words):
        # each distinct word is encoded once per call
        unique = list(dict.fromkeys(words))
        position = {w: i for i, w in enumerate(unique)}
        vectors = self.encoder.encode(self.seqs(unique))
        return embedding_lookup(vectors, np.array([position[w] for w in words], dtype=np.int64))

    def masked_word_loss(self, hidden, words):
        return cross_entropy(self.decoder(hidden), target_ids(self.seqs(words), self.decoder.max_word_len))

    def describe(self):
        return {'variant': self.variant}


@dataclass(frozen=True)
class SentencePair:
    first: tuple
    second: tuple
    is_next: int = None


@dataclass
class FramedPair:
    words: list
    segments: list
    is_next: int = None


@dataclass
class LmOutput:
    hidden: Tensor
    nsp_logits: Tensor
    key_mask: np.ndarray
    words: list


def frame_pair(pair, max_len=64, truncate=True):
    """[CLS] first [SEP] second [SEP]; with truncate, words are cut from the right."""
    first, second = list(pair.first), list(pair.second)
    budget = max_len - 3
    if len(first) + len(second) > budget:
        if not truncate:
            raise SequenceTooLong(
                f"pair of {len(first) + len(second) + 3} words exceeds the maximum of {max_len}")
        first = first[:budget]
        second = second[:budget - len(first)]
    words = [CLS] + first + [SEP] + second + [SEP]
    segments = [0] * (len(first) + 2) + [1] * (len(second) + 1)
    return FramedPair(words, segments, pair.is_next)


class MiniLM(Module):
    def __init__(self, config, embedding, rng=None):
        rng = rng or get_rng()
        if embedding.variant != config.variant:
            raise ConfigError(f"embedding layer {embedding.variant!r} does not match variant {config.variant!r}")
        self.config = config
        self.embedding = embedding
        self.positions = sinusoidal_table(config.max_seq_len, config.dim)
        self.segments = parameter(rng.normal(0.0, 0.02, (2, config.dim)))
        self.encoder = TransformerEncoder(config.layers, config.dim, config.heads, config.ff_dim,
                                          config.dropout, rng)
        self.pooler = Linear(config.dim, config.dim, rng)
        self.nsp_head = Linear(config.dim, 2, rng)

    @property
    def alphabet(self):
        return getattr(self.embedding, 'alphabet', default_alphabet())


def build_lm(config, corpus=None, rng=None):
    if config.variant == 'lookup':
        if corpus is None:
            raise ValueError("the lookup variant builds its vocabulary from a corpus")
        embedding = LookupEmbedding.from_corpus(corpus, config, rng)
    else:
        embedding = RceEmbedding(config, rng=rng)
    return MiniLM(config, embedding, rng)


def lm_forward(model, pairs, train=False, pad_to=None):
    """
    Encoder pass over a batch of sentence pairs.

    :param pairs: SentencePair or FramedPair items; [PAD] words fill up to pad_to
        (default: the longest pair) and are masked out of attention
    :return: LmOutput with hidden states [B x S x dim] and NSP logits [B x 2] read at [CLS]
    """
    config = model.config
    framed = [p if isinstance(p, FramedPair) else frame_pair(p, config.max_seq_len, truncate=False)
              for p in pairs]
    longest = max(len(f.words) for f in framed)
    width = pad_to or longest
    if width > config.max_seq_len or longest > width:
        raise SequenceTooLong(f"sequence length {max(width, longest)} exceeds {config.max_seq_len}")
    words, segments = [], []
    key_mask = np.zeros((len(framed), width), dtype=bool)
    for row, f in enumerate(framed):
        pad = width - len(f.words)
        words.extend(f.words + [PAD_WORD] * pad)
        segments.append(f.segments + [0] * pad)
        key_mask[row, :len(f.words)] = True

    previous = model.training
    model.train(train)
    try:
        vectors = reshape(model.embedding.embed(words), (len(framed), width, config.dim))
        x = vectors + embedding_lookup(model.segments, np.array(segments, dtype=np.int64)) + model.positions[:width]
        hidden = model.encoder(x, key_mask=key_mask)
        pooled = tanh(model.pooler(hidden[:, 0, :]))
    finally:
        model.train(previous)
    return LmOutput(hidden, model.nsp_head(pooled), key_mask, words)


def nsp_log_odds(output):
    """log p(is_next) - log p(not_next) per pair."""
    return output.nsp_logits[:, IS_NEXT] - output.nsp_logits[:, NOT_NEXT]


def make_nsp_pairs(corpus, count, rng):
    """Half true continuations, half random second sentences."""
    sentences = corpus.sentences
    if len(sentences) < 3:
        raise CorpusFormatError("next sentence pairs need a corpus of at least 3 sentences")
    pairs = []
    for _ in range(count):
        i = int(rng.integers(len(sentences) - 1))
        if rng.random() < 0.5:
            pairs.append(SentencePair(sentences[i], sentences[i + 1], IS_NEXT))
        else:
            j = int(rng.integers(len(sentences)))
            while j == i + 1:
                j = int(rng.integers(len(sentences)))
            pairs.append(SentencePair(sentences[i], sentences[j], NOT_NEXT))
    return pairs


def mask_pair(framed, rate, rng):
    """
    Replace a share of the non-special words by [MASK].

    :return: (masked FramedPair, masked positions, original words)
    """
    candidates = [i for i, w in enumerate(framed.words) if w not in (CLS, SEP)]
    if not candidates:
        return framed, [], []
    count = max(1, int(round(rate * len(candidates))))
    positions = sorted(int(p) for p in rng.choice(candidates, size=min(count, len(candidates)), replace=False))
    words = list(framed.words)
    originals = [words[p] for p in positions]
    for p in positions:
        words[p] = MASK
    return FramedPair(words, framed.segments, framed.is_next), positions, originals


@dataclass
class PretrainResult:
    model: MiniLM
    history: list = field(default_factory=list)


def pretrain_step(model, batch, rng, optimizer, lr):
    """Masked word + next sentence loss on one batch of SentencePairs; returns (mlm, nsp)."""
    config = model.config
    framed, rows, positions, targets = [], [], [], []
    for row, pair in enumerate(batch):
        masked, where, originals = mask_pair(frame_pair(pair, config.max_seq_len), config.mask_rate, rng)
        framed.append(masked)
        rows.extend([row] * len(where))
        positions.extend(where)
        targets.extend(originals)

    output = lm_forward(model, framed, train=True)
    nsp_loss = cross_entropy(output.nsp_logits, np.array([p.is_next for p in batch], dtype=np.int64))
    loss = nsp_loss
    mlm_value = 0.0
    if targets:
        masked_hidden = output.hidden[np.array(rows), np.array(positions)]
        mlm_loss = model.embedding.masked_word_loss(masked_hidden, targets)
        loss = loss + mlm_loss
        mlm_value = mlm_loss.item()
    optimizer.zero_grad()
    loss.backward()
    optimizer.step(lr)
    return mlm_value, nsp_loss.item()


def pretrain(model, corpus, steps, seed=0, log_every=100):
    """Masked word + next sentence pretraining under warmup and cosine decay."""
    config = model.config
    rng = np.random.default_rng(seed)
    optimizer = Adam(model.parameters())
    total = max(config.total_steps, steps)
    warmup = min(config.warmup_steps, total)
    ConfigManager.log_status(f"Pretraining {config.variant} language model: "
                             f"{model.parameter_count()} parameters, {steps} steps")
    result = PretrainResult(model)
    model.train()
    for step in tqdm(range(steps), desc='pretrain', file=sys.stderr,
                     disable=not ConfigManager.progress_enabled()):
        batch = make_nsp_pairs(corpus, config.batch_pairs, rng)
        lr = lr_schedule(step, warmup, total, config.max_lr)
        mlm, nsp = pretrain_step(model, batch, rng, optimizer, lr)
        ConfigManager.log_training_debug(f"lm step {step + 1} lr {lr:.6g} mlm={mlm:.4f} nsp={nsp:.4f}")
        if (step + 1) % max(log_every, 1) == 0 or step + 1 == steps:
            result.history.append((step + 1, lr, mlm, nsp))
    model.eval()
    return result


def nsp_scores(model, pairs, chunk=64):
    scores = []
    with evaluating(model):
        for start in range(0, len(pairs), chunk):
            framed = [frame_pair(p, model.config.max_seq_len) for p in pairs[start:start + chunk]]
            scores.append(nsp_log_odds(lm_forward(model, framed)).data)
    return np.concatenate(scores) if scores else np.zeros(0)


def nsp_accuracy(model, pairs):
    """Share of labelled SentencePairs whose next-sentence decision is right."""
    if not pairs:
        return 0.0
    predicted = (nsp_scores(model, pairs) > 0).astype(np.int64)
    return float(np.mean(predicted == np.array([p.is_next for p in pairs])))


@dataclass(frozen=True)
class SwagItem:
    context: tuple
    candidates: tuple
    gold: int

    def __post_init__(self):
        if len(self.candidates) != 4:
            raise CorpusFormatError(f"a continuation item needs 4 candidates, got {len(self.candidates)}")
        if not 0 <= self.gold < 4:
            raise CorpusFormatError(f"gold index must be 0..3, got {self.gold}")

    def pairs(self):
        return [SentencePair(self.context, candidate) for candidate in self.candidates]


def build_swag_items(corpus, count, seed=0):
    """(sentence, true next sentence + 3 distinct random sentences) items with a shuffled gold position."""
    sentences = corpus.sentences
    distinct = list(dict.fromkeys(sentences))
    if len(sentences) < 2 or len(distinct) < 4:
        raise CorpusFormatError("continuation items need at least 4 distinct sentences")
    rng = np.random.default_rng(seed)
    items = []
    for _ in range(count):
        i = int(rng.integers(len(sentences) - 1))
        true_next = sentences[i + 1]
        pool = [s for s in distinct if s != true_next]
        if len(pool) < 3:
            raise CorpusFormatError("not enough distinct sentences for three distractors")
        distractors = [pool[k] for k in rng.choice(len(pool), size=3, replace=False)]
        gold = int(rng.integers(4))
        candidates = distractors[:gold] + [true_next] + distractors[gold:]
        items.append(SwagItem(sentences[i], tuple(candidates), gold))
    return items


def save_swag_items(items, path):
    with open(path, 'w', encoding='utf-8', newline='\n') as file:
        for item in items:
            fields = [' '.join(item.context)] + [' '.join(c) for c in item.candidates] + [str(item.gold)]
            file.write('\t'.join(fields) + '\n')


def load_swag_items(path):
    items = []
    with open(path, 'r', encoding='utf-8') as file:
        for number, line in enumerate(file.read().splitlines(), start=1):
            if not line.strip() or line.startswith('#'):
                continue
            fields = line.split('\t')
            if len(fields) != 6 or not fields[5].strip().isdigit():
                raise CorpusFormatError(f"{path}:{number}: expected context, 4 candidates and a gold index")
            items.append(SwagItem(tuple(fields[0].split()), tuple(tuple(f.split()) for f in fields[1:5]),
                                  int(fields[5])))
    return items


def swag_eval(model, items):
    """Accuracy of picking the candidate with the highest next-sentence score."""
    if not items:
        return 0.0
    scores = nsp_scores(model, [p for item in items for p in item.pairs()]).reshape(len(items), 4)
    choices = scores.argmax(axis=1)
    return float(np.mean(choices == np.array([item.gold for item in items])))


def finetune_swag(model, items, steps, lr=1e-4, batch_items=None, seed=0):
    """Train on continuation items with a softmax over the four candidates' next-sentence scores."""
    if not items:
        raise ValueError("no continuation items to train on")
    rng = np.random.default_rng(seed)
    batch_items = batch_items or max(1, model.config.batch_pairs // 4)
    optimizer = Adam(model.parameters())
    losses = []
    model.train()
    for step in tqdm(range(steps), desc='finetune', file=sys.stderr,
                     disable=not ConfigManager.progress_enabled()):
        chosen = [items[i] for i in rng.choice(len(items), size=min(batch_items, len(items)), replace=False)]
        framed = [frame_pair(p, model.config.max_seq_len) for item in chosen for p in item.pairs()]
        logits = reshape(nsp_log_odds(lm_forward(model, framed, train=True)), (len(chosen), 4))
        loss = cross_entropy(logits, np.array([item.gold for item in chosen], dtype=np.int64))
        optimizer.zero_grad()
        loss.backward()
        optimizer.step(lr_schedule(step, steps // 10, steps, lr))
        losses.append(loss.item())
        ConfigManager.log_training_debug(f"finetune step {step + 1} loss={losses[-1]:.4f}")
    model.eval()
    return losses


def save_lm(model, path):
    meta = {'language_model': asdict(model.config), 'embedding': model.embedding.describe()}
    save_model(path, {'lm': model}, model.alphabet, meta)


def load_lm(path):
    arrays, alphabet, meta = load_bundle(path)
    if 'language_model' not in meta:
        raise ValueError(f"{path} is not a language model checkpoint")
    config = LmConfig(**meta['language_model'])
    if config.variant == 'lookup':
        embedding = LookupEmbedding(meta['embedding']['vocabulary'], config.dim)
    else:
        embedding = RceEmbedding(config, alphabet)
    model = MiniLM(config, embedding)
    model.load_state_dict(arrays, prefix='lm.')
    model.eval()
    return model
