"""
Character alphabet and word tokenizer.

Words are decomposed into character tokens framed by [BEG] and [END]. Capital
letters, diacritics, ligatures and the sharp s are expressed with modifier tokens
placed in front of a lowercase base character, so "Liberté" becomes
[BEG] [UP] [l] [i] [b] [e] [r] [t] [´] [e] [END].
"""

import hashlib
import string
import unicodedata
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from utils import ConfigManager

ALPHABET_FORMAT = 'rce-alphabet 1'

BEG = '[BEG]'
END = '[END]'
UNK = '[UNK]'
PAD = '[PAD]'

UP = '[UP]'
LIGATURE = '[LIG]'
SHARP_S = '[SZ]'

BASE_CHARACTERS = tuple(string.ascii_lowercase)
DIGITS = tuple(string.digits)

_LEGIBLE_SYMBOLS = ('ø', 'þ', 'ð', 'ł', 'ŋ', '°', '^', '!', '"', '§', '$')
_EXTRA_SYMBOLS = ('€', '£', '¡', '¿', '«', '»', '–', '—', '…', '‘', '’', '‚', '“', '”', '„')
SPECIAL_SYMBOLS = _LEGIBLE_SYMBOLS + tuple(
    c for c in string.punctuation if c not in _LEGIBLE_SYMBOLS) + _EXTRA_SYMBOLS

# Framing, unknown character and padding tokens used inside every sequence.
WORD_LEVEL_TOKENS = (BEG, END, UNK, PAD)

# Tokens that stand for a whole word, encoded as one-character words.
SPECIAL_WORDS = {
    '[CLS]': '[CLS]',
    '[SEP]': '[SEP]',
    '[MASK]': '[MASK]',
    '[PAD]': '[PAD-WORD]',
    '[UNK]': '[UNK-WORD]',
}
SPECIAL_WORD_TOKENS = ('[CLS]', '[SEP]', '[MASK]', '[PAD-WORD]', '[UNK-WORD]')

COMBINING_MODIFIERS = {
    '\u0301': '[ACUTE]',
    '\u0300': '[GRAVE]',
    '\u0304': '[MACRON]',
    '\u0303': '[TILDE]',
    '\u031b': '[HORN]',
    '\u0328': '[OGONEK]',
    '\u0308': '[DIAERESIS]',
}
MARK_OF_MODIFIER = {modifier: mark for mark, modifier in COMBINING_MODIFIERS.items()}

MODIFIERS = tuple(COMBINING_MODIFIERS.values()) + (LIGATURE, UP, SHARP_S)

LIGATURES = {'æ': ('a', 'e'), 'œ': ('o', 'e')}
LIGATURE_OF_PAIR = {pair: lig for lig, pair in LIGATURES.items()}

_DISPLAY = {
    '[ACUTE]': '[´]',
    '[GRAVE]': '[`]',
    '[MACRON]': '[¯]',
    '[TILDE]': '[~]',
    '[HORN]': '[\u031b]',
    '[OGONEK]': '[˛]',
    '[DIAERESIS]': '[¨]',
    SHARP_S: '[ß]',
}

UNKNOWN_CHAR = '\ufffd'

CATEGORIES = (
    ('base', BASE_CHARACTERS),
    ('digit', DIGITS),
    ('symbol', SPECIAL_SYMBOLS),
    ('word', WORD_LEVEL_TOKENS),
    ('special_word', SPECIAL_WORD_TOKENS),
    ('modifier', MODIFIERS),
)


class WordTooLong(ValueError):
    """The decomposed word does not fit into the requested length."""


class EmptyWord(ValueError):
    """The word is empty after trimming whitespace."""


class MalformedSequence(ValueError):
    """A token sequence violates the framing or modifier rules."""


class UnknownSpecial(ValueError):
    """The symbol is not a registered special word."""


@dataclass(frozen=True)
class CharTokenSeq:
    """A word as a framed, padded sequence of alphabet indices."""
    tokens: tuple
    content_len: int
    source: str

    def __len__(self):
        return len(self.tokens)

    @property
    def content(self):
        return self.tokens[:self.content_len]


@dataclass(frozen=True)
class OneHotWord:
    """|A| x |C| matrix; column j is the one-hot vector of token j."""
    matrix: np.ndarray


class Alphabet:
    """
    Ordered, closed set of character tokens.

    Indices follow the category order base, digit, symbol, word-level, special
    word, modifier; the order is canonical and persisted with every model.
    """

    def __init__(self, entries):
        entries = tuple(entries)
        if len(set(entries)) != len(entries):
            raise ValueError("Alphabet entries must be unique")
        missing = [t for t in WORD_LEVEL_TOKENS + MODIFIERS if t not in entries]
        if missing:
            raise ValueError(f"Alphabet is missing required tokens: {missing}")
        self.entries = entries
        self.index_of = {token: i for i, token in enumerate(entries)}
        self._characters = frozenset(t for t in entries if len(t) == 1)

    @classmethod
    def default(cls):
        entries = []
        for _, tokens in CATEGORIES:
            entries.extend(tokens)
        return cls(entries)

    @property
    def size(self):
        return len(self.entries)

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        return isinstance(other, Alphabet) and self.entries == other.entries

    def __hash__(self):
        return hash(self.entries)

    def is_character(self, char):
        return char in self._characters

    def id(self, token):
        return self.index_of[token]

    def display(self, index):
        token = self.entries[index]
        if token in _DISPLAY:
            return _DISPLAY[token]
        if len(token) == 1:
            return f'[{token}]'
        return token

    def serialize(self):
        return '\n'.join((f'# {ALPHABET_FORMAT}',) + self.entries) + '\n'

    def fingerprint(self):
        return hashlib.sha256(self.serialize().encode('utf-8')).hexdigest()[:16]

    def save(self, path):
        with open(path, 'w', encoding='utf-8', newline='\n') as file:
            file.write(self.serialize())

    @classmethod
    def load(cls, path):
        with open(path, 'r', encoding='utf-8', newline='\n') as file:
            lines = file.read().split('\n')
        if not lines or lines[0] != f'# {ALPHABET_FORMAT}':
            raise ValueError(f"{path}: not an alphabet file (expected header '# {ALPHABET_FORMAT}')")
        if lines[-1] == '':
            lines = lines[:-1]
        return cls(lines[1:])


@lru_cache(maxsize=1)
def default_alphabet():
    return Alphabet.default()


def _decompose_char(alphabet, char):
    """Token identifiers for one (NFC) character."""
    if char == 'ß':
        return [SHARP_S, 's']
    if char == 'ẞ':
        return [SHARP_S, UP, 's']

    upper = char.isupper()
    lowered = char.lower() if upper else char

    if lowered in LIGATURES:
        first, second = LIGATURES[lowered]
        return ([UP] if upper else []) + [first, LIGATURE, second]

    decomposed = unicodedata.normalize('NFD', lowered)
    base, marks = decomposed[0], decomposed[1:]
    if not alphabet.is_character(base):
        return [UNK]
    modifiers = [COMBINING_MODIFIERS.get(mark, UNK) for mark in marks]
    return modifiers + ([UP] if upper else []) + [base]


def decompose(word, alphabet=None):
    """Word -> list of token identifiers without framing."""
    alphabet = alphabet or default_alphabet()
    tokens = []
    for char in unicodedata.normalize('NFC', word):
        tokens.extend(_decompose_char(alphabet, char))
    return tokens


def _is_modifier(token):
    return token in MODIFIERS


def _frame(alphabet, body, pad_to, source):
    ids = [alphabet.id(BEG)] + [alphabet.id(t) for t in body] + [alphabet.id(END)]
    content_len = len(ids)
    ids.extend([alphabet.id(PAD)] * (pad_to - content_len))
    return CharTokenSeq(tokens=tuple(ids), content_len=content_len, source=source)


def encode_word(word, pad_to=32, alphabet=None, truncate=False):
    """
    Decompose a word into a framed and padded CharTokenSeq.

    :param pad_to: total sequence length including [BEG], [END] and padding
    :param truncate: cut the word before [END] instead of raising WordTooLong
    """
    alphabet = alphabet or default_alphabet()
    trimmed = word.strip()
    if not trimmed:
        raise EmptyWord(f"cannot encode empty word {word!r}")

    body = decompose(trimmed, alphabet)
    if len(body) + 2 > pad_to:
        if not truncate:
            raise WordTooLong(
                f"{trimmed!r} decomposes into {len(body) + 2} tokens, more than {pad_to}")
        body = body[:max(pad_to - 2, 0)]
        # a cut right after a modifier would leave it without its base character
        while body and _is_modifier(body[-1]):
            body.pop()
        if not body:
            raise WordTooLong(f"pad_to={pad_to} leaves no room for {trimmed!r}")
        ConfigManager.log_warning(f"Truncated {trimmed!r} to {pad_to} character tokens")

    return _frame(alphabet, body, pad_to, trimmed)


def encode_special(symbol, pad_to=3, alphabet=None):
    """Encode a registered special word such as [CLS] as a one-character word."""
    alphabet = alphabet or default_alphabet()
    if symbol not in SPECIAL_WORDS:
        raise UnknownSpecial(f"{symbol!r} is not a special word; known: {sorted(SPECIAL_WORDS)}")
    if pad_to < 3:
        raise WordTooLong(f"special words need 3 positions, got pad_to={pad_to}")
    return _frame(alphabet, [SPECIAL_WORDS[symbol]], pad_to, symbol)


def encode_token(word, pad_to=32, alphabet=None, truncate=True):
    """Encode a corpus token, routing special words through encode_special."""
    if word in SPECIAL_WORDS:
        return encode_special(word, pad_to=pad_to, alphabet=alphabet)
    return encode_word(word, pad_to=pad_to, alphabet=alphabet, truncate=truncate)


def _compose(base, marks, upper):
    char = base.upper() if upper else base
    return unicodedata.normalize('NFC', char + ''.join(marks))


def decode_word(seq, alphabet=None):
    """
    Invert encode_word. The result is NFC-normalized.

    Special words decode to their symbol, unknown characters to U+FFFD.
    """
    alphabet = alphabet or default_alphabet()
    if seq.content_len < 2 or seq.content_len > len(seq.tokens):
        raise MalformedSequence(f"invalid content length {seq.content_len}")
    try:
        tokens = [alphabet.entries[i] for i in seq.tokens[:seq.content_len]]
    except IndexError as exc:
        raise MalformedSequence(f"token index out of range: {exc}") from exc
    if tokens[0] != BEG:
        raise MalformedSequence("sequence does not start with [BEG]")
    if tokens[-1] != END:
        raise MalformedSequence("missing [END]")

    body = tokens[1:-1]
    if len(body) == 1 and body[0] in SPECIAL_WORD_TOKENS:
        return next(sym for sym, tok in SPECIAL_WORDS.items() if tok == body[0])

    chars = []
    marks, upper, sharp, ligature = [], False, False, False
    for token in body:
        if token in MARK_OF_MODIFIER:
            marks.append(MARK_OF_MODIFIER[token])
        elif token == UP:
            upper = True
        elif token == SHARP_S:
            sharp = True
        elif token == LIGATURE:
            ligature = True
        elif token in (BEG, END, PAD) or token in SPECIAL_WORD_TOKENS:
            raise MalformedSequence(f"{token} inside the word body")
        else:
            if sharp:
                if token != 's' or marks or ligature:
                    raise MalformedSequence("[SZ] must be followed by [s]")
                chars.append('ẞ' if upper else 'ß')
            elif ligature:
                previous = chars[-1] if chars else None
                pair = (previous.lower(), token) if previous else None
                if pair not in LIGATURE_OF_PAIR or marks or upper:
                    raise MalformedSequence(f"[LIG] cannot join {previous!r} and {token!r}")
                joined = LIGATURE_OF_PAIR[pair]
                chars[-1] = joined.upper() if previous.isupper() else joined
            else:
                base = UNKNOWN_CHAR if token == UNK else token
                chars.append(_compose(base, marks, upper))
            marks, upper, sharp, ligature = [], False, False, False

    if marks or upper or sharp or ligature:
        raise MalformedSequence("modifier without a base character")
    return ''.join(chars)


def to_one_hot(seq, alphabet=None):
    """|A| x |C| one-hot matrix of a sequence."""
    alphabet = alphabet or default_alphabet()
    matrix = np.zeros((alphabet.size, len(seq.tokens)))
    matrix[list(seq.tokens), np.arange(len(seq.tokens))] = 1.0
    return OneHotWord(matrix=matrix)


def from_one_hot(one_hot):
    """Per-column argmax, the inverse of to_one_hot on the token level."""
    return tuple(int(i) for i in np.argmax(one_hot.matrix, axis=0))


def display_tokens(seq, alphabet=None):
    alphabet = alphabet or default_alphabet()
    return ' '.join(alphabet.display(i) for i in seq.tokens)


def batch_token_ids(seqs, alphabet=None, length=None):
    """
    Stack sequences into an id matrix cut to the longest content in the batch.

    :return: (ids [B x L] int array, content lengths [B] int array)
    """
    alphabet = alphabet or default_alphabet()
    lengths = np.array([s.content_len for s in seqs], dtype=np.int64)
    width = int(lengths.max()) if length is None else length
    ids = np.full((len(seqs), width), alphabet.id(PAD), dtype=np.int64)
    for row, seq in enumerate(seqs):
        n = min(seq.content_len, width)
        ids[row, :n] = seq.tokens[:n]
    return ids, lengths
