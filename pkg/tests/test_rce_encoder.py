import random

import numpy as np
import pytest

from alphabet_tokenizer import Alphabet, CharTokenSeq, WordTooLong, encode_word, to_one_hot
from rce_encoder import (
    ALPHABET_SUFFIX, AlphabetMismatch, RceConfig, RceModel, embed_batch, embed_word,
    load_encoder, save_encoder,
)
from tensor_autodiff import manual_seed, sum_
from utils import ConfigError, ConfigManager

WORDS = ['Token', 'Liberté', 'a', 'Straße', 'cat', 'dogs', 'Æther', 'ok']


def random_words(count, seed):
    rng = random.Random(seed)
    letters = 'abcdefghijklmnopqrstuvwxyzé'
    return [''.join(rng.choice(letters) for _ in range(rng.randint(1, 5))) for _ in range(count)]


def test_config_validation():
    with pytest.raises(ConfigError):
        RceConfig(embed_dim=10, heads=3)
    with pytest.raises(ConfigError):
        RceConfig(layers=0)
    assert RceConfig().ff_dim == 256


def test_config_from_config_manager(tmp_path):
    ConfigManager.initialize(config_path=str(tmp_path / 'none.yaml'))
    ConfigManager.set_config_value(2, 'rce', 'layers')
    ConfigManager.set_config_value(20, 'tokenizer', 'max_word_len')
    config = RceConfig.from_config()
    assert config.layers == 2
    assert config.max_word_len == 20
    assert config.embed_dim == 64


def test_padding_does_not_change_the_vector(tiny_rce_config):
    model = RceModel(tiny_rce_config)
    for word in random_words(100, seed=0):
        short = embed_word(model, encode_word(word, 12))
        long = embed_word(model, encode_word(word, 30))
        assert np.max(np.abs(short - long)) < 1e-12


def test_batch_matches_single_words(tiny_rce_config):
    model = RceModel(tiny_rce_config)
    seqs = [encode_word(w, 12) for w in WORDS]
    batch = embed_batch(model, seqs)
    singles = np.array([embed_word(model, s) for s in seqs])
    assert batch.shape == (len(WORDS), 8)
    assert np.max(np.abs(batch - singles)) < 1e-12
    order = list(reversed(range(len(seqs))))
    assert np.max(np.abs(embed_batch(model, [seqs[i] for i in order]) - batch[order])) < 1e-12


def test_content_after_end_is_ignored(tiny_rce_config, alphabet):
    model = RceModel(tiny_rce_config)
    seq = encode_word('cat', 12)
    garbage = CharTokenSeq(seq.tokens[:seq.content_len] + (alphabet.id('z'),) * 7, seq.content_len, 'cat')
    assert np.array_equal(embed_word(model, seq), embed_word(model, garbage))


def test_reproducible_under_seed(tiny_rce_config):
    manual_seed(7)
    first = RceModel(tiny_rce_config).embed_words(['Token'])
    manual_seed(7)
    second = RceModel(tiny_rce_config).embed_words(['Token'])
    assert np.array_equal(first, second)


def test_distinct_words_get_distinct_vectors(tiny_rce_config):
    model = RceModel(tiny_rce_config)
    words = list(dict.fromkeys(random_words(200, seed=1)))[:100]
    vectors = model.embed_words(words)
    for i in range(0, len(words) - 1, 2):
        assert not np.allclose(vectors[i], vectors[i + 1])


def test_word_longer_than_model_raises(tiny_rce_config):
    model = RceModel(tiny_rce_config)
    with pytest.raises(WordTooLong):
        model.embed_word(encode_word('abcdefghijklmno', 20))


def test_row_lookup_equals_one_hot_projection(tiny_rce_config):
    model = RceModel(tiny_rce_config)
    seq = encode_word('Liberté', 12)
    projected = model.project_one_hot(to_one_hot(seq)).data
    expected = model.input_projection.weight.data[list(seq.tokens)] + model.input_projection.bias.data
    np.testing.assert_allclose(projected, expected, atol=1e-12)


def test_every_parameter_receives_gradient(tiny_rce_config):
    model = RceModel(tiny_rce_config)
    out = model.encode([encode_word(w, 12) for w in WORDS])
    sum_(out * np.random.default_rng(0).normal(size=out.shape)).backward()
    for name, param in model.named_parameters():
        assert param.grad is not None, name
        # a key bias shifts every score of a query equally, so softmax cancels it
        if not name.endswith('k_proj.bias'):
            assert np.any(param.grad != 0.0), name


def test_eval_forward_is_pure(tiny_rce_config):
    model = RceModel(RceConfig(embed_dim=8, layers=1, heads=2, ff_dim=16, max_word_len=12, dropout=0.5))
    seq = encode_word('cat', 12)
    assert np.array_equal(model.embed_word(seq), model.embed_word(seq))
    assert model.training


def test_save_and_load(tmp_path, tiny_rce_config):
    model = RceModel(tiny_rce_config)
    path = str(tmp_path / 'rce.bin')
    save_encoder(model, path)
    loaded = load_encoder(path)
    assert isinstance(loaded, RceModel)
    assert loaded.config == tiny_rce_config
    np.testing.assert_array_equal(loaded.embed_words(WORDS), model.embed_words(WORDS))


def test_load_rejects_foreign_alphabet(tmp_path, tiny_rce_config, alphabet):
    path = str(tmp_path / 'rce.bin')
    save_encoder(RceModel(tiny_rce_config), path)
    Alphabet(tuple(reversed(alphabet.entries))).save(path + ALPHABET_SUFFIX)
    with pytest.raises(AlphabetMismatch):
        load_encoder(path)
