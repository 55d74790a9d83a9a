import random
import unicodedata

import numpy as np
import pytest

from alphabet_tokenizer import (
    BEG, END, PAD, UNK, UP, Alphabet, CharTokenSeq, EmptyWord, MalformedSequence, UnknownSpecial,
    WordTooLong, batch_token_ids, decode_word, display_tokens, encode_special, encode_token,
    encode_word, from_one_hot, to_one_hot,
)

FUZZ_CHARS = (
    'abcdefghijklmnopqrstuvwxyz'
    'ABCDEFGHIJKLMNOPQRSTUVWXYZ'
    '0123456789'
    'éèēñäöüÉÄÖÜáàāãąơǖ'
    'ßẞæœÆŒøØþÞðÐłŁŋ'
    '!?.,;:-\'"§$€«»'
)


def fuzz_words(count, seed=0):
    rng = random.Random(seed)
    return [''.join(rng.choice(FUZZ_CHARS) for _ in range(rng.randint(1, 8))) for _ in range(count)]


def test_token_example(alphabet):
    seq = encode_word('Token', 12)
    assert display_tokens(seq) == '[BEG] [UP] [t] [o] [k] [e] [n] [END] [PAD] [PAD] [PAD] [PAD]'
    assert seq.content_len == 8
    assert seq.source == 'Token'


def test_liberte_example():
    seq = encode_word('Liberté', 12)
    assert display_tokens(seq) == '[BEG] [UP] [l] [i] [b] [e] [r] [t] [´] [e] [END] [PAD]'


def test_single_character_and_sharp_s(alphabet):
    seq = encode_word('a', 4)
    assert seq.tokens == (alphabet.id(BEG), alphabet.id('a'), alphabet.id(END), alphabet.id(PAD))
    assert display_tokens(encode_word('ß', 6)) == '[BEG] [ß] [s] [END] [PAD] [PAD]'


def test_uppercase_diacritic_puts_modifier_before_up():
    assert display_tokens(encode_word('É', 5)) == '[BEG] [´] [UP] [e] [END]'


def test_precomposed_and_decomposed_input_agree():
    assert encode_word('\u00e9', 6).tokens == encode_word('e\u0301', 6).tokens


def test_unknown_characters_map_to_unk(alphabet):
    seq = encode_word('жa', 6)
    assert seq.tokens[1] == alphabet.id(UNK)
    assert decode_word(seq) == '\ufffda'


def test_errors():
    with pytest.raises(EmptyWord):
        encode_word('   ', 8)
    with pytest.raises(WordTooLong):
        encode_word('abcdefgh', 8)


def test_truncation_never_leaves_a_dangling_modifier(capsys):
    seq = encode_word('abcdé', 7, truncate=True)
    assert decode_word(seq) == 'abcd'
    assert '[WARNING]' in capsys.readouterr().err


def test_special_words(alphabet):
    assert display_tokens(encode_special('[CLS]')) == '[BEG] [CLS] [END]'
    assert display_tokens(encode_special('[MASK]')) == '[BEG] [MASK] [END]'
    assert decode_word(encode_special('[PAD]', pad_to=5)) == '[PAD]'
    assert encode_token('[SEP]', pad_to=6).content_len == 3
    with pytest.raises(UnknownSpecial):
        encode_special('xyz')


def test_decode_rejects_malformed(alphabet):
    acute = alphabet.id('[ACUTE]')
    with pytest.raises(MalformedSequence):
        decode_word(CharTokenSeq((alphabet.id(BEG), acute, alphabet.id(END)), 3, ''))
    with pytest.raises(MalformedSequence):
        decode_word(CharTokenSeq((alphabet.id(BEG), alphabet.id('a'), alphabet.id(PAD)), 3, ''))
    with pytest.raises(MalformedSequence):
        decode_word(CharTokenSeq((alphabet.id(BEG), alphabet.id(UP), alphabet.id(END)), 3, ''))


def test_roundtrip_fuzz():
    for word in fuzz_words(10000):
        seq = encode_word(word, 40)
        assert decode_word(seq) == unicodedata.normalize('NFC', word)


def test_injective_and_padding_neutral():
    words = list(dict.fromkeys(fuzz_words(2000, seed=1)))
    contents = {encode_word(w, 40).content for w in words}
    assert len(contents) == len(words)
    for word in words[:200]:
        short, long = encode_word(word, 40), encode_word(word, 60)
        assert short.tokens[:short.content_len] == long.tokens[:long.content_len]


def test_modifier_runs_end_in_one_base(alphabet):
    modifiers = {alphabet.id(t) for t in ('[ACUTE]', '[GRAVE]', '[MACRON]', '[TILDE]', '[HORN]',
                                          '[OGONEK]', '[DIAERESIS]', '[LIG]', '[UP]', '[SZ]')}
    for word in fuzz_words(500, seed=2):
        seq = encode_word(word, 40)
        assert seq.tokens[seq.content_len - 2] not in modifiers


def test_one_hot(alphabet):
    one_hot = to_one_hot(encode_word('a', 4))
    assert one_hot.matrix.shape == (alphabet.size, 4)
    assert one_hot.matrix[alphabet.id('a'), 1] == 1.0
    np.testing.assert_array_equal(one_hot.matrix.sum(axis=0), np.ones(4))
    for word in fuzz_words(1000, seed=3):
        seq = encode_word(word, 40)
        assert from_one_hot(to_one_hot(seq)) == seq.tokens


def test_alphabet_is_canonical(tmp_path, alphabet):
    assert alphabet.entries[:3] == ('a', 'b', 'c')
    assert sorted(alphabet.index_of.values()) == list(range(alphabet.size))
    path = tmp_path / 'alphabet.txt'
    alphabet.save(str(path))
    loaded = Alphabet.load(str(path))
    assert loaded == alphabet
    assert loaded.fingerprint() == alphabet.fingerprint()
    assert Alphabet.default().fingerprint() == alphabet.fingerprint()


def test_alphabet_load_rejects_other_files(tmp_path):
    path = tmp_path / 'other.txt'
    path.write_text('a\nb\n', encoding='utf-8')
    with pytest.raises(ValueError):
        Alphabet.load(str(path))


def test_batch_token_ids_cuts_to_longest_content(alphabet):
    ids, lengths = batch_token_ids([encode_word('ab', 12), encode_word('abcd', 20)])
    assert ids.shape == (2, 6)
    assert lengths.tolist() == [4, 6]
    assert ids[0, 4] == alphabet.id(PAD)
