"""
Corpus files, the frequency dictionary, evaluation datasets and the
word-vector text format.
"""

import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from utils import ConfigManager

FILE_FORMATS = """\
File formats:
  corpus         UTF-8 text, one sentence per line, tokens separated by whitespace
  categories     TSV: category<TAB>word
  declension     TSV: nominative<TAB>genitive<TAB>class
  casus          TSV: form<TAB>case+number label
  metaphor       TSV: adjective<TAB>noun<TAB>label (1 metaphorical, 0 literal)
  word pairs     TSV: adjective<TAB>noun (pairs to score)
  chiasmus       TSV: w1<TAB>w2<TAB>w3<TAB>w4<TAB>label (1 chiasmus, 0 not)
  embeddings     first line "count dim", then "word v1 ... vd" per line
  swag items     TSV: context<TAB>cand1<TAB>cand2<TAB>cand3<TAB>cand4<TAB>gold_index
Empty lines and lines starting with '#' are ignored in TSV files."""


class CorpusFormatError(ValueError):
    """An input file does not follow its documented format."""


@dataclass
class Corpus:
    sentences: list = field(default_factory=list)

    @property
    def token_count(self):
        return sum(len(s) for s in self.sentences)

    def tokens(self):
        for sentence in self.sentences:
            yield from sentence

    def vocabulary(self):
        """Unique tokens in first-occurrence order."""
        return list(dict.fromkeys(self.tokens()))

    def __len__(self):
        return len(self.sentences)


@dataclass
class TokenDictionary:
    tokens: tuple
    counts: tuple

    def __post_init__(self):
        self.index_of = {token: i for i, token in enumerate(self.tokens)}

    def id(self, token):
        """Dense id of a token, or None when the token is not in the dictionary."""
        return self.index_of.get(token)

    def __contains__(self, token):
        return token in self.index_of

    def __len__(self):
        return len(self.tokens)


@dataclass
class CategoryDataset:
    categories: dict

    def words(self):
        """(word, category) entries in file order."""
        return [(word, name) for name, members in self.categories.items() for word in members]

    def unique_words(self):
        return list(dict.fromkeys(word for word, _ in self.words()))

    def __len__(self):
        return sum(len(members) for members in self.categories.values())


def _read_lines(path):
    with open(path, 'r', encoding='utf-8', newline=None) as file:
        return file.read().splitlines()


def parse_corpus(lines):
    sentences = [tuple(line.split()) for line in lines]
    return Corpus([s for s in sentences if s])


def load_corpus(path):
    """One sentence per line; CRLF is normalized and empty lines are skipped."""
    corpus = parse_corpus(_read_lines(path))
    ConfigManager.log_io_debug(f"Read {len(corpus)} sentences, {corpus.token_count} tokens from {path}")
    return corpus


def build_dictionary(corpus, n):
    """Top-n tokens by descending frequency; ties are broken lexicographically."""
    if n < 1:
        raise ValueError(f"dictionary size must be at least 1, got {n}")
    counts = Counter(corpus.tokens())
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))[:n]
    return TokenDictionary(tokens=tuple(t for t, _ in ranked), counts=tuple(c for _, c in ranked))


def _read_tsv(path, columns):
    rows = []
    for number, line in enumerate(_read_lines(path), start=1):
        if not line.strip() or line.startswith('#'):
            continue
        parts = [p.strip() for p in line.split('\t')]
        if len(parts) != columns or not all(parts):
            raise CorpusFormatError(f"{path}:{number}: expected {columns} tab-separated fields, got {line!r}")
        rows.append((number, parts))
    return rows


def load_categories(path):
    categories = {}
    for number, (name, word) in _read_tsv(path, 2):
        members = categories.setdefault(name, [])
        if word in members:
            raise CorpusFormatError(f"{path}:{number}: duplicate member {word!r} in category {name!r}")
        members.append(word)
    if len(categories) < 2:
        raise CorpusFormatError(f"{path}: needs at least 2 categories, found {len(categories)}")
    dataset = CategoryDataset({name: tuple(members) for name, members in categories.items()})
    ConfigManager.log_io_debug(f"Read {len(categories)} categories, {len(dataset)} words from {path}")
    return dataset


def _binary_label(path, number, value):
    if value not in ('0', '1'):
        raise CorpusFormatError(f"{path}:{number}: label must be 0 or 1, got {value!r}")
    return int(value)


def load_declension_triples(path):
    return [tuple(parts) for _, parts in _read_tsv(path, 3)]


def load_casus_pairs(path):
    return [tuple(parts) for _, parts in _read_tsv(path, 2)]


def load_metaphor_pairs(path):
    return [(adj, noun, _binary_label(path, number, label))
            for number, (adj, noun, label) in _read_tsv(path, 3)]


def load_word_pairs(path):
    """Unlabelled adjective<TAB>noun pairs to be scored."""
    return [tuple(parts) for _, parts in _read_tsv(path, 2)]


def load_chiasmus_rows(path):
    return [tuple(parts[:4]) + (_binary_label(path, number, parts[4]),)
            for number, parts in _read_tsv(path, 5)]


def write_embeddings(words, vectors, path):
    vectors = np.asarray(vectors)
    if vectors.ndim != 2 or len(words) != vectors.shape[0]:
        raise ValueError(f"{len(words)} words do not match a matrix of shape {vectors.shape}")
    with open(path, 'w', encoding='utf-8', newline='\n') as file:
        file.write(f"{len(words)} {vectors.shape[1]}\n")
        for word, row in zip(words, vectors):
            file.write(word + ' ' + ' '.join('%.12g' % v for v in row) + '\n')
    ConfigManager.log_io_debug(f"Wrote {len(words)} vectors of dimension {vectors.shape[1]} to {path}")


def export_embeddings(model, words, path):
    """Embed words with a trained encoder and write them in the word-vector text format."""
    words = list(dict.fromkeys(words))
    write_embeddings(words, model.embed_words(words), path)
    return words


def import_embeddings(path):
    """-> (words, matrix [count x dim])."""
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    lines = [line for line in _read_lines(path) if line.strip()]
    if not lines:
        raise CorpusFormatError(f"{path}: empty embedding file")
    try:
        count, dim = (int(v) for v in lines[0].split())
    except ValueError as exc:
        raise CorpusFormatError(f"{path}:1: expected header 'count dim', got {lines[0]!r}") from exc
    if len(lines) - 1 != count:
        raise CorpusFormatError(f"{path}: header announces {count} vectors, found {len(lines) - 1}")
    words, rows = [], []
    for number, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) != dim + 1:
            raise CorpusFormatError(
                f"{path}:{number}: expected {dim} values, found {len(parts) - 1}")
        words.append(parts[0])
        rows.append([float(v) for v in parts[1:]])
    return words, np.array(rows, dtype=np.float64).reshape(count, dim)
