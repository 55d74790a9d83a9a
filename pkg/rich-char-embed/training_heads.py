"""
Training objectives for word encoders and the training loop.

Three heads read the center word's vector: a character decoder that spells
the neighbouring words, a second character decoder that spells the word
itself, and a softmax over the most frequent corpus tokens that predicts the
neighbours' dictionary ids.
"""

import queue
import sys
import threading
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from alphabet_tokenizer import (
    BEG, END, CharTokenSeq, MalformedSequence, decode_word, encode_token,
)
from corpus_io import TokenDictionary, build_dictionary
from rce_encoder import build_encoder, load_bundle, save_model
from tensor_autodiff import (
    IGNORE_INDEX, Adam, Linear, Module, NonFiniteValue, Tensor, TransformerEncoder,
    as_tensor, cross_entropy, embedding_lookup, evaluating, get_rng, lr_schedule, reshape,
    sinusoidal_table,
)
from utils import ConfigError, ConfigManager


class NoDictNeighbor(ValueError):
    """No neighbour of the sample has a dictionary id."""


@dataclass(frozen=True)
class ContextSample:
    center: CharTokenSeq
    neighbors: tuple = ()
    dict_ids: tuple = ()
    window: int = None

    def __post_init__(self):
        for offset, _ in self.neighbors:
            if offset == 0:
                raise ValueError("neighbour offsets must be nonzero")
            if self.window is not None and abs(offset) > self.window:
                raise ValueError(f"neighbour offset {offset} lies outside the window of {self.window}")
        if self.dict_ids and len(self.dict_ids) != len(self.neighbors):
            raise ValueError("dict_ids must have one entry per neighbour")


@dataclass(frozen=True)
class HeadWeights:
    w_context: float = 1.0
    w_identity: float = 1.0
    w_dict: float = 1.0

    def __post_init__(self):
        weights = (self.w_context, self.w_identity, self.w_dict)
        if any(w < 0 for w in weights):
            raise ConfigError(f"head weights must be nonnegative, got {weights}")
        if not any(w > 0 for w in weights):
            raise ConfigError("at least one head weight must be positive")

    @classmethod
    def from_config(cls):
        section = ConfigManager.get_config_section('training')
        return cls(section.get('w_context', 1.0), section.get('w_identity', 1.0), section.get('w_dict', 1.0))


class CharDecoder(Module):
    """Spells a word from one vector: replicate, add positions, encode, classify."""

    def __init__(self, dim, alphabet_size, max_word_len, layers=2, heads=2, ff_dim=256,
                 dropout_rate=0.1, rng=None):
        rng = rng or get_rng()
        self.dim = dim
        self.max_word_len = max_word_len
        self.positions = sinusoidal_table(max_word_len, dim)
        self.encoder = TransformerEncoder(layers, dim, heads, ff_dim, dropout_rate, rng)
        self.output = Linear(dim, alphabet_size, rng)

    def __call__(self, e):
        """:param e: [B x d] -> logits [B x max_word_len x |A|]"""
        e = as_tensor(e)
        batch = e.shape[0]
        replicated = reshape(e, (batch, 1, self.dim)) + self.positions
        return self.output(self.encoder(replicated))


def predict_chars(decoder, e):
    """Per-position logits for one vector [max_word_len x |A|] or a batch [B x max_word_len x |A|]."""
    e = as_tensor(e)
    if e.ndim == 1:
        return reshape(decoder(reshape(e, (1, e.shape[0]))), (decoder.max_word_len, -1))
    return decoder(e)


def target_ids(seqs, length):
    """Token ids cut or padded to length; positions after [END] hold IGNORE_INDEX."""
    targets = np.full((len(seqs), length), IGNORE_INDEX, dtype=np.int64)
    for row, seq in enumerate(seqs):
        n = min(seq.content_len, length)
        targets[row, :n] = seq.tokens[:n]
    return targets


def _neighbor_rows(samples):
    rows, seqs, dict_ids = [], [], []
    for i, sample in enumerate(samples):
        for j, (_, seq) in enumerate(sample.neighbors):
            rows.append(i)
            seqs.append(seq)
            dict_ids.append(sample.dict_ids[j] if sample.dict_ids else None)
    return np.array(rows, dtype=np.int64), seqs, dict_ids


def context_loss_from_embeddings(decoder, embeddings, samples):
    rows, seqs, _ = _neighbor_rows(samples)
    if not seqs:
        return Tensor(0.0)
    logits = decoder(embedding_lookup(embeddings, rows))
    return cross_entropy(logits, target_ids(seqs, decoder.max_word_len))


def identity_loss_from_embeddings(decoder, embeddings, seqs):
    return cross_entropy(decoder(embeddings), target_ids(seqs, decoder.max_word_len))


def dict_loss_from_embeddings(dict_head, embeddings, samples):
    rows, _, dict_ids = _neighbor_rows(samples)
    keep = [k for k, d in enumerate(dict_ids) if d is not None]
    if not keep:
        raise NoDictNeighbor("no neighbour has a dictionary id")
    logits = dict_head(embedding_lookup(embeddings, rows[keep]))
    return cross_entropy(logits, np.array([dict_ids[k] for k in keep], dtype=np.int64))


def context_char_loss(model, decoder, sample):
    """Mean cross-entropy over the characters of every neighbour, up to and including [END]."""
    return context_loss_from_embeddings(decoder, model.encode([sample.center]), [sample])


def identity_loss(model, decoder, seq):
    return identity_loss_from_embeddings(decoder, model.encode([seq]), [seq])


def dict_context_loss(model, dict_head, sample):
    """Cross-entropy over in-dictionary neighbours only."""
    return dict_loss_from_embeddings(dict_head, model.encode([sample.center]), [sample])


class TrainingHeads(Module):
    """The decoders and dictionary head attached to one encoder."""

    def __init__(self, dim, alphabet_size, max_word_len, weights, dictionary_size=0,
                 layers=2, heads=2, ff_dim=256, dropout_rate=0.1, rng=None):
        rng = rng or get_rng()
        self.weights = weights
        self.settings = {'dim': dim, 'alphabet_size': alphabet_size, 'max_word_len': max_word_len,
                         'dictionary_size': dictionary_size, 'layers': layers, 'heads': heads,
                         'ff_dim': ff_dim, 'dropout_rate': dropout_rate}
        self.context_decoder = None
        self.identity_decoder = None
        self.dict_head = None
        if weights.w_context > 0:
            self.context_decoder = CharDecoder(dim, alphabet_size, max_word_len, layers, heads,
                                               ff_dim, dropout_rate, rng)
        if weights.w_identity > 0:
            self.identity_decoder = CharDecoder(dim, alphabet_size, max_word_len, layers, heads,
                                                ff_dim, dropout_rate, rng)
        if weights.w_dict > 0:
            if dictionary_size < 1:
                raise ConfigError("the dictionary head needs a non-empty dictionary")
            self.dict_head = Linear(dim, dictionary_size, rng)

    def describe(self):
        return {'weights': [self.weights.w_context, self.weights.w_identity, self.weights.w_dict],
                'settings': self.settings}

    @classmethod
    def from_description(cls, description):
        weights = HeadWeights(*description['weights'])
        return cls(weights=weights, **description['settings'])

    def losses(self, embeddings, samples):
        """Per-head losses for one batch; heads with zero weight are not computed."""
        terms = {}
        if self.context_decoder is not None:
            terms['context'] = context_loss_from_embeddings(self.context_decoder, embeddings, samples)
        if self.identity_decoder is not None:
            terms['identity'] = identity_loss_from_embeddings(
                self.identity_decoder, embeddings, [s.center for s in samples])
        if self.dict_head is not None:
            try:
                terms['dict'] = dict_loss_from_embeddings(self.dict_head, embeddings, samples)
            except NoDictNeighbor:
                ConfigManager.log_training_debug("Batch without in-dictionary neighbours; dict loss is 0")
                terms['dict'] = Tensor(0.0)
        return terms

    def total(self, terms):
        scale = {'context': self.weights.w_context, 'identity': self.weights.w_identity,
                 'dict': self.weights.w_dict}
        total = None
        for name, loss in terms.items():
            weighted = loss * scale[name]
            total = weighted if total is None else total + weighted
        return total


def build_samples(corpus, window=2, dictionary=None, alphabet=None, max_word_len=32):
    """One ContextSample per token occurrence; neighbours stay inside the sentence."""
    cache = {}

    def seq_of(token):
        if token not in cache:
            cache[token] = encode_token(token, pad_to=max_word_len, alphabet=alphabet)
        return cache[token]

    samples = []
    for sentence in corpus.sentences:
        for i, token in enumerate(sentence):
            neighbors, dict_ids = [], []
            for offset in range(-window, window + 1):
                j = i + offset
                if offset == 0 or j < 0 or j >= len(sentence):
                    continue
                neighbors.append((offset, seq_of(sentence[j])))
                dict_ids.append(dictionary.id(sentence[j]) if dictionary is not None else None)
            samples.append(ContextSample(seq_of(token), tuple(neighbors),
                                         tuple(dict_ids) if dictionary is not None else (), window))
    ConfigManager.log_training_debug(f"Built {len(samples)} samples from {len(cache)} distinct tokens")
    return samples


@dataclass
class TrainOptions:
    steps: int = 100000
    batch_size: int = 512
    lr: float = 0.001
    warmup_steps: int = None
    window: int = 2
    dict_size: int = 10000
    decoder_layers: int = 2
    decoder_heads: int = 2
    decoder_ff_dim: int = 256
    log_every: int = 100
    checkpoint_every: int = 0
    checkpoint_path: str = None
    metrics_path: str = None
    prefetch: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("training.steps and training.batch_size must be positive")
        if self.window < 1:
            raise ConfigError(f"training.window must be at least 1, got {self.window}")
        if self.warmup_steps is None:
            self.warmup_steps = self.steps // 20

    @classmethod
    def from_config(cls, **extra):
        section = ConfigManager.get_config_section('training')
        names = ('steps', 'batch_size', 'lr', 'warmup_steps', 'window', 'dict_size', 'decoder_layers',
                 'decoder_heads', 'decoder_ff_dim', 'log_every', 'checkpoint_every', 'prefetch')
        values = {name: section[name] for name in names if name in section}
        values['seed'] = ConfigManager.get_config_value('misc', 'seed') or 0
        values.update(extra)
        return cls(**values)


@dataclass
class MetricsRow:
    step: int
    lr: float
    total: float
    context: float = None
    identity: float = None
    dict: float = None

    HEADER = 'step\tlr\ttotal\tcontext\tidentity\tdict'

    def to_line(self):
        def fmt(value):
            return '-' if value is None else '%.6f' % value
        return '\t'.join([str(self.step), '%.8g' % self.lr, fmt(self.total),
                          fmt(self.context), fmt(self.identity), fmt(self.dict)])


@dataclass
class TrainResult:
    model: object
    heads: TrainingHeads
    dictionary: TokenDictionary = None
    metrics: list = field(default_factory=list)


class BatchProducer(threading.Thread):
    """Prepares batch indices ahead of the optimizer in one ordered producer thread."""

    def __init__(self, sample_count, batch_size, steps, seed, depth):
        super().__init__(daemon=True)
        self.sampler = _BatchSampler(sample_count, batch_size, seed)
        self.steps = steps
        self.queue = queue.Queue(maxsize=depth)
        self.stop_event = threading.Event()

    def run(self):
        for _ in range(self.steps):
            if self.stop_event.is_set():
                return
            self.queue.put(self.sampler.next())

    def next(self):
        return self.queue.get()

    def stop(self):
        self.stop_event.set()
        # unblock a producer waiting on a full queue
        while not self.queue.empty():
            self.queue.get_nowait()


class _BatchSampler:
    def __init__(self, sample_count, batch_size, seed):
        self.rng = np.random.default_rng(seed)
        self.sample_count = sample_count
        self.batch_size = min(batch_size, sample_count)

    def next(self):
        return self.rng.choice(self.sample_count, size=self.batch_size, replace=False)


def _write_metrics_line(path, line, mode='a'):
    with open(path, mode, encoding='utf-8', newline='\n') as file:
        file.write(line + '\n')


def train(model, corpus, heads=None, opts=None, dictionary=None, samples=None):
    """
    Train an encoder with the weighted sum of the active heads.

    :param model: a WordEncoder (RCE, c2v or combined)
    :param heads: HeadWeights
    :return: TrainResult with the trained encoder, heads, dictionary and metrics rows
    """
    heads = heads or HeadWeights()
    opts = opts or TrainOptions()
    if heads.w_dict > 0 and dictionary is None:
        dictionary = build_dictionary(corpus, opts.dict_size)
    if samples is None:
        samples = build_samples(corpus, opts.window, dictionary if heads.w_dict > 0 else None,
                                model.alphabet, model.max_word_len)
    if not samples:
        raise ValueError("the corpus yields no training samples")

    head_module = TrainingHeads(
        model.output_dim, model.alphabet.size, model.max_word_len, heads,
        dictionary_size=len(dictionary) if heads.w_dict > 0 else 0,
        layers=opts.decoder_layers, heads=opts.decoder_heads, ff_dim=opts.decoder_ff_dim)
    optimizer = Adam(model.parameters() + head_module.parameters())
    ConfigManager.log_status(
        f"Training {model.kind} encoder: {model.parameter_count()} encoder parameters, "
        f"{head_module.parameter_count()} head parameters, {len(samples)} samples, {opts.steps} steps")

    if opts.metrics_path:
        _write_metrics_line(opts.metrics_path, MetricsRow.HEADER, mode='w')

    producer = None
    if opts.prefetch > 0:
        producer = BatchProducer(len(samples), opts.batch_size, opts.steps, opts.seed, opts.prefetch)
        producer.start()
    else:
        sampler = _BatchSampler(len(samples), opts.batch_size, opts.seed)

    result = TrainResult(model=model, heads=head_module, dictionary=dictionary)
    model.train()
    head_module.train()
    try:
        for step in tqdm(range(opts.steps), desc='train', file=sys.stderr,
                         disable=not ConfigManager.progress_enabled()):
            indices = producer.next() if producer else sampler.next()
            batch = [samples[i] for i in indices]
            lr = lr_schedule(step, opts.warmup_steps, opts.steps, opts.lr)

            embeddings = model.encode([s.center for s in batch])
            terms = head_module.losses(embeddings, batch)
            total = head_module.total(terms)
            if not np.isfinite(total.data):
                raise NonFiniteValue(f"training loss became {total.item()} at step {step + 1}")

            optimizer.zero_grad()
            if total.requires_grad:
                total.backward()
                optimizer.step(lr)

            ConfigManager.log_training_debug(
                f"step {step + 1} lr {lr:.6g} " + ' '.join(f"{k}={v.item():.4f}" for k, v in terms.items()))
            if (step + 1) % max(opts.log_every, 1) == 0 or step + 1 == opts.steps:
                row = MetricsRow(step + 1, lr, total.item(),
                                 **{name: loss.item() for name, loss in terms.items()})
                result.metrics.append(row)
                if opts.metrics_path:
                    _write_metrics_line(opts.metrics_path, row.to_line())
            if opts.checkpoint_every and opts.checkpoint_path and (step + 1) % opts.checkpoint_every == 0:
                save_training_checkpoint(opts.checkpoint_path, model, head_module, dictionary)
                ConfigManager.log_training_debug(f"Checkpoint written at step {step + 1}")
    finally:
        if producer:
            producer.stop()

    model.eval()
    head_module.eval()
    if result.metrics:
        ConfigManager.log_success(f"Training finished, final loss {result.metrics[-1].total:.4f}")
    return result


def reconstruct_words(model, decoder, seqs):
    """
    Spell each word back from its vector by per-position argmax.

    :return: decoded strings; None where the prediction is not a well-formed word
    """
    embeddings = model.embed_batch(seqs)
    with evaluating(decoder):
        predicted = decoder(embeddings).data.argmax(axis=-1)
    alphabet = model.alphabet
    beg, end = alphabet.id(BEG), alphabet.id(END)
    words = []
    for row in predicted:
        hits = np.flatnonzero(row == end)
        if row[0] != beg or not len(hits):
            words.append(None)
            continue
        length = int(hits[0]) + 1
        try:
            words.append(decode_word(CharTokenSeq(tuple(int(t) for t in row[:length]), length, ''), alphabet))
        except MalformedSequence:
            words.append(None)
    return words


def save_training_checkpoint(path, model, heads, dictionary=None):
    meta = {'encoder': model.describe(), 'heads': heads.describe(),
            'dictionary': list(dictionary.tokens) if dictionary is not None else None,
            'dictionary_counts': list(dictionary.counts) if dictionary is not None else None}
    save_model(path, {'encoder': model, 'heads': heads}, model.alphabet, meta)


def load_training_checkpoint(path):
    """-> (encoder, TrainingHeads, TokenDictionary or None)"""
    arrays, alphabet, meta = load_bundle(path)
    if 'heads' not in meta:
        raise ValueError(f"{path} is not a training checkpoint")
    model = build_encoder(meta['encoder'], alphabet)
    model.load_state_dict(arrays, prefix='encoder.')
    heads = TrainingHeads.from_description(meta['heads'])
    heads.load_state_dict(arrays, prefix='heads.')
    dictionary = None
    if meta.get('dictionary') is not None:
        dictionary = TokenDictionary(tuple(meta['dictionary']), tuple(meta['dictionary_counts']))
    model.eval()
    heads.eval()
    return model, heads, dictionary
