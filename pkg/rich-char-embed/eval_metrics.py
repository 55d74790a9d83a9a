"""
Intrinsic metrics (TopK, Odd-One-Out) and downstream probes on word vectors.
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.spatial.distance import cdist, pdist
from tqdm import tqdm

from corpus_io import import_embeddings
from tensor_autodiff import (
    Adam, Linear, Module, Tensor, binary_cross_entropy_with_logits, cross_entropy,
    evaluating, matmul, parameter, relu, sqrt, sum_,
)
from utils import ConfigManager


class MissingWord(KeyError):
    """A dataset word has no vector in the embedding table."""


class InsufficientCategory(ValueError):
    """No category is large enough for the requested metric."""


class DegenerateTraining(ValueError):
    """Training data holds a single label."""


class EmbeddingTable:
    """word -> vector, all of one dimension, in insertion order."""

    def __init__(self, words, vectors):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(words):
            raise ValueError(f"{len(words)} words do not match vectors of shape {vectors.shape}")
        self.words = list(words)
        self.vectors = vectors
        self.index_of = {}
        for i, word in enumerate(self.words):
            self.index_of.setdefault(word, i)

    @classmethod
    def from_dict(cls, mapping):
        words = list(mapping)
        return cls(words, np.array([np.asarray(mapping[w], dtype=np.float64) for w in words]))

    @classmethod
    def load(cls, path):
        return cls(*import_embeddings(path))

    @classmethod
    def from_model(cls, model, words):
        words = list(dict.fromkeys(words))
        return cls(words, model.embed_words(words))

    @property
    def dim(self):
        return self.vectors.shape[1]

    def __contains__(self, word):
        return word in self.index_of

    def __len__(self):
        return len(self.words)

    def index(self, word):
        try:
            return self.index_of[word]
        except KeyError:
            raise MissingWord(word) from None

    def vector(self, word):
        return self.vectors[self.index(word)]

    def matrix(self, words):
        return self.vectors[[self.index(w) for w in words]]


def topk_score(table, dataset, k=3):
    """
    Mean share of each word's k nearest neighbours that belong to its category.

    The query word is excluded from its own neighbours, including a copy of it
    listed under another category. k shrinks to the category size minus one
    for small categories, and distance ties go to the word that comes first in
    the table.
    """
    entries = sorted(dataset.words(), key=lambda entry: table.index(entry[0]))
    vectors = table.matrix([word for word, _ in entries])
    labels = np.array([category for _, category in entries])
    sizes = {name: len(members) for name, members in dataset.categories.items()}

    distances = cdist(vectors, vectors, metric='sqeuclidean')
    # a word listed under several categories is never its own neighbour
    names = np.array([word for word, _ in entries])
    distances[names[:, None] == names[None, :]] = np.inf
    order = np.argsort(distances, axis=1, kind='stable')

    scores = []
    for i, (word, category) in enumerate(entries):
        k_eff = min(k, sizes[category] - 1)
        if k_eff < 1:
            continue
        hits = float(np.mean(labels[order[i, :k_eff]] == category))
        scores.append(hits)
        ConfigManager.log_eval_debug(f"topk {word} ({category}): {hits:.3f}")
    if not scores:
        raise InsufficientCategory("every category has a single member")
    return float(np.mean(scores))


def _ooo_pools(dataset, in_size):
    eligible = []
    for name, members in dataset.categories.items():
        own = set(members)
        outliers = [w for other, words in dataset.categories.items() if other != name
                    for w in words if w not in own]
        if len(members) >= in_size and outliers:
            eligible.append((name, list(members), list(dict.fromkeys(outliers))))
    if not eligible:
        raise InsufficientCategory(f"no category has {in_size} members and an outlier pool")
    return eligible


def ooo_trial(table, pools, in_size, rng):
    """
    One Odd-One-Out set.

    :return: (hit, words) where words lists the in-category members then the outlier
    """
    name, members, outliers = pools[rng.integers(len(pools))]
    chosen = list(rng.choice(members, size=in_size, replace=False))
    outlier = outliers[rng.integers(len(outliers))]
    words = chosen + [outlier]
    vectors = table.matrix(words)
    distances = np.linalg.norm(vectors - vectors.mean(axis=0), axis=1)
    return int(np.argmax(distances)) == in_size, words


def ooo_score(table, dataset, set_count=1000, in_size=10, seed=0, threads=1):
    """
    Share of random sets where the word furthest from the set mean is the outlier.

    Trial t draws from its own generator seeded with seed + t, so the score is
    identical for any thread count.
    """
    pools = _ooo_pools(dataset, in_size)

    def run(trial):
        hit, words = ooo_trial(table, pools, in_size, np.random.default_rng(seed + trial))
        ConfigManager.log_eval_debug(f"ooo trial {trial}: {'hit' if hit else 'miss'} {words}")
        return hit

    progress = dict(total=set_count, desc='odd-one-out', disable=not ConfigManager.progress_enabled())
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            hits = list(tqdm(pool.map(run, range(set_count)), **progress))
    else:
        hits = [run(t) for t in tqdm(range(set_count), **progress)]
    return float(np.mean(hits)) if hits else 0.0


def kfold_indices(n, folds, seed=0):
    """Seeded partition of range(n) into disjoint folds."""
    if folds < 2:
        raise ValueError(f"need at least 2 folds, got {folds}")
    if n < folds:
        raise ValueError(f"{n} samples cannot be split into {folds} folds")
    permutation = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(permutation, folds)]


class MlpProbe(Module):
    """One hidden layer classifier trained full-batch on z-scored inputs."""

    def __init__(self, in_dim, hidden, classes, rng):
        self.hidden = Linear(in_dim, hidden, rng)
        self.output = Linear(hidden, classes, rng)
        self.mean = None
        self.std = None

    def __call__(self, x):
        return self.output(relu(self.hidden(x)))

    def fit(self, features, labels, epochs=300, lr=0.01):
        self.mean = features.mean(axis=0)
        self.std = features.std(axis=0) + 1e-8
        x = Tensor((features - self.mean) / self.std)
        optimizer = Adam(self.parameters())
        self.train()
        for _ in range(epochs):
            optimizer.zero_grad()
            loss = cross_entropy(self(x), labels)
            loss.backward()
            optimizer.step(lr)
        self.eval()
        return self

    def predict(self, features):
        with evaluating(self):
            return self((features - self.mean) / self.std).data.argmax(axis=1)


class LogisticProbe(MlpProbe):
    """Linear logistic classifier for 0/1 labels."""

    def __init__(self, in_dim, rng):
        self.linear = Linear(in_dim, 1, rng)
        self.mean = None
        self.std = None

    def __call__(self, x):
        return self.linear(x)

    def fit(self, features, labels, epochs=300, lr=0.01):
        self.mean = features.mean(axis=0)
        self.std = features.std(axis=0) + 1e-8
        x = Tensor((features - self.mean) / self.std)
        targets = np.asarray(labels, dtype=np.float64)[:, None]
        optimizer = Adam(self.parameters())
        for _ in range(epochs):
            optimizer.zero_grad()
            binary_cross_entropy_with_logits(self(x), targets).backward()
            optimizer.step(lr)
        return self

    def predict(self, features):
        with evaluating(self):
            return (self((features - self.mean) / self.std).data[:, 0] > 0).astype(np.int64)


def _encode_labels(labels):
    classes = sorted(set(labels))
    index = {label: i for i, label in enumerate(classes)}
    return np.array([index[label] for label in labels], dtype=np.int64), classes


def cross_validate(features, targets, make_probe, folds=5, seed=0, epochs=300, lr=0.01):
    """Mean held-out accuracy over seeded folds; each fold trains a fresh probe."""
    accuracies = []
    for number, test in enumerate(kfold_indices(len(targets), folds, seed)):
        train = np.setdiff1d(np.arange(len(targets)), test)
        probe = make_probe(np.random.default_rng(seed + number))
        probe.fit(features[train], targets[train], epochs=epochs, lr=lr)
        accuracy = float(np.mean(probe.predict(features[test]) == targets[test]))
        ConfigManager.log_eval_debug(f"fold {number + 1}/{folds}: accuracy {accuracy:.4f}")
        accuracies.append(accuracy)
    return float(np.mean(accuracies))


def _probe_settings(hidden, epochs, lr):
    section = ConfigManager.get_config_section('evaluation') if ConfigManager.is_initialized() else {}
    return (hidden or section.get('probe_hidden', 64),
            epochs or section.get('probe_epochs', 300),
            lr or section.get('probe_lr', 0.01))


def declension_probe(table, triples, folds=5, seed=0, hidden=None, epochs=None, lr=None):
    """Cross-validated accuracy of predicting the declension class from [v_nom | v_gen]."""
    hidden, epochs, lr = _probe_settings(hidden, epochs, lr)
    features = np.hstack([table.matrix([t[0] for t in triples]), table.matrix([t[1] for t in triples])])
    targets, classes = _encode_labels([t[2] for t in triples])
    return cross_validate(features, targets,
                          lambda rng: MlpProbe(features.shape[1], hidden, len(classes), rng),
                          folds, seed, epochs, lr)


def casus_numerus_probe(table, pairs, folds=5, seed=0, hidden=None, epochs=None, lr=None):
    """Cross-validated accuracy of predicting case and number from a single form."""
    hidden, epochs, lr = _probe_settings(hidden, epochs, lr)
    features = table.matrix([form for form, _ in pairs])
    targets, classes = _encode_labels([label for _, label in pairs])
    return cross_validate(features, targets,
                          lambda rng: MlpProbe(features.shape[1], hidden, len(classes), rng),
                          folds, seed, epochs, lr)


def chiasmus_features(table, w1, w2, w3, w4):
    """Cosine distances between the four words in the order 12, 13, 14, 23, 24, 34."""
    return pdist(table.matrix([w1, w2, w3, w4]), metric='cosine')


def chiasmus_probe(table, rows, folds=5, seed=0, epochs=None, lr=None):
    """Cross-validated accuracy of a logistic classifier on the six distance features."""
    _, epochs, lr = _probe_settings(None, epochs, lr)
    features = np.array([chiasmus_features(table, *row[:4]) for row in rows])
    targets = np.array([row[4] for row in rows], dtype=np.int64)
    if len(set(targets.tolist())) < 2:
        raise DegenerateTraining("chiasmus rows carry a single label")
    return cross_validate(features, targets, lambda rng: LogisticProbe(features.shape[1], rng),
                          folds, seed, epochs, lr)


class MetaphorModel(Module):
    """
    Shared linear map into a space where adjective/noun cosine distance
    measures metaphoricity; a scale and bias calibrate it into a probability.
    """

    def __init__(self, dim):
        self.transform = parameter(np.eye(dim))
        self.scale = parameter(np.array([1.0]))
        self.bias = parameter(np.array([0.0]))

    def distance(self, adjectives, nouns):
        a = matmul(adjectives, self.transform)
        n = matmul(nouns, self.transform)
        dot = sum_(a * n, axis=1)
        norms = sqrt(sum_(a * a, axis=1) + 1e-12) * sqrt(sum_(n * n, axis=1) + 1e-12)
        return 1.0 - dot / norms

    def __call__(self, adjectives, nouns):
        return self.distance(adjectives, nouns) * self.scale + self.bias

    def fit(self, adjectives, nouns, labels, epochs=300, lr=0.01):
        labels = np.asarray(labels, dtype=np.float64)
        if len(set(labels.tolist())) < 2:
            raise DegenerateTraining("metaphor training pairs carry a single label")
        optimizer = Adam(self.parameters())
        for _ in range(epochs):
            optimizer.zero_grad()
            binary_cross_entropy_with_logits(self(adjectives, nouns), labels).backward()
            optimizer.step(lr)
        return self

    def score(self, adjectives, nouns):
        """Metaphoricity probability in [0, 1] per pair."""
        with evaluating(self):
            logits = self(np.atleast_2d(adjectives), np.atleast_2d(nouns)).data
        return 0.5 * (1.0 + np.tanh(0.5 * logits))

    def predict(self, adjectives, nouns):
        return (self.score(adjectives, nouns) >= 0.5).astype(np.int64)


def _metaphor_arrays(table, pairs):
    return (table.matrix([p[0] for p in pairs]), table.matrix([p[1] for p in pairs]),
            np.array([p[2] for p in pairs], dtype=np.int64))


def metaphoricity_model(table, pairs, epochs=None, lr=None):
    """Fit the shared transform on (adjective, noun, label) pairs."""
    _, epochs, lr = _probe_settings(None, epochs, lr)
    adjectives, nouns, labels = _metaphor_arrays(table, pairs)
    return MetaphorModel(table.dim).fit(adjectives, nouns, labels, epochs, lr)


def metaphor_probe(table, pairs, folds=10, seed=0, epochs=None, lr=None):
    _, epochs, lr = _probe_settings(None, epochs, lr)
    adjectives, nouns, labels = _metaphor_arrays(table, pairs)
    if len(set(labels.tolist())) < 2:
        raise DegenerateTraining("metaphor pairs carry a single label")
    accuracies = []
    for number, test in enumerate(kfold_indices(len(labels), folds, seed)):
        train = np.setdiff1d(np.arange(len(labels)), test)
        if len(set(labels[train].tolist())) < 2:
            continue
        model = MetaphorModel(table.dim).fit(adjectives[train], nouns[train], labels[train], epochs, lr)
        accuracy = float(np.mean(model.predict(adjectives[test], nouns[test]) == labels[test]))
        ConfigManager.log_eval_debug(f"metaphor fold {number + 1}/{folds}: accuracy {accuracy:.4f}")
        accuracies.append(accuracy)
    if not accuracies:
        raise DegenerateTraining("every training split carries a single label")
    return float(np.mean(accuracies))


def format_report(rows):
    """Aligned two-column table of (metric, value) rows."""
    width = max([len('metric')] + [len(name) for name, _ in rows])
    lines = [f"{'metric'.ljust(width)}  value", f"{'-' * width}  -----"]
    for name, value in rows:
        shown = f"{value:.3f}" if isinstance(value, float) else str(value)
        lines.append(f"{name.ljust(width)}  {shown}")
    return '\n'.join(lines)


def write_report(rows, path):
    with open(path, 'w', encoding='utf-8', newline='\n') as file:
        file.write('metric\tvalue\n')
        for name, value in rows:
            file.write(f"{name}\t{value:.6f}\n" if isinstance(value, float) else f"{name}\t{value}\n")
