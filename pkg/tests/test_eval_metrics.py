import numpy as np
import pytest

from corpus_io import CategoryDataset, write_embeddings
from eval_metrics import (
    DegenerateTraining, EmbeddingTable, InsufficientCategory, MetaphorModel, MissingWord,
    casus_numerus_probe, chiasmus_features, chiasmus_probe, declension_probe, format_report,
    kfold_indices, metaphor_probe, metaphoricity_model, ooo_score, ooo_trial, topk_score, write_report,
)
from eval_metrics import _ooo_pools
from rce_encoder import RceModel


def clustered_table(categories=3, members=6, dim=5, spread=0.1, seed=0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=10.0, size=(categories, dim))
    words, vectors, groups = [], [], {}
    for c in range(categories):
        name = f'cat{c}'
        groups[name] = tuple(f'{name}_w{m}' for m in range(members))
        for word in groups[name]:
            words.append(word)
            vectors.append(centers[c] + rng.normal(scale=spread, size=dim))
    return EmbeddingTable(words, np.array(vectors)), CategoryDataset(groups)


def random_table(categories=3, members=8, dim=6, seed=1):
    rng = np.random.default_rng(seed)
    groups = {f'g{c}': tuple(f'g{c}_{m}' for m in range(members)) for c in range(categories)}
    words = [w for members_ in groups.values() for w in members_]
    return EmbeddingTable(words, rng.normal(size=(len(words), dim))), CategoryDataset(groups)


def brute_force_topk(table, dataset, k):
    entries = sorted(dataset.words(), key=lambda e: table.index(e[0]))
    scores = []
    for word, category in entries:
        size = len(dataset.categories[category])
        k_eff = min(k, size - 1)
        if k_eff < 1:
            continue
        others = [(float(np.sum((table.vector(word) - table.vector(o)) ** 2)), table.index(o), c)
                  for o, c in entries if o != word]
        others.sort(key=lambda item: (item[0], item[1]))
        scores.append(sum(c == category for _, _, c in others[:k_eff]) / k_eff)
    return float(np.mean(scores))


def test_table_lookup():
    table = EmbeddingTable(['a', 'b', 'a'], np.arange(6.0).reshape(3, 2))
    assert table.index('a') == 0
    assert table.dim == 2
    np.testing.assert_array_equal(table.matrix(['b', 'a']), [[2.0, 3.0], [0.0, 1.0]])
    with pytest.raises(MissingWord):
        table.vector('zzz')


def test_table_from_file_and_model(tmp_path, tiny_rce_config):
    path = str(tmp_path / 'vectors.txt')
    write_embeddings(['x', 'y'], np.eye(2), path)
    table = EmbeddingTable.load(path)
    np.testing.assert_allclose(table.vector('y'), [0.0, 1.0])
    model = RceModel(tiny_rce_config)
    from_model = EmbeddingTable.from_model(model, ['cat', 'dog', 'cat'])
    assert from_model.words == ['cat', 'dog']
    assert from_model.dim == 8


def test_topk_perfect_clusters():
    table, dataset = clustered_table()
    assert topk_score(table, dataset, k=3) == 1.0


def test_topk_matches_brute_force_on_seven_points():
    rng = np.random.default_rng(5)
    words = [f'w{i}' for i in range(7)]
    table = EmbeddingTable(words, rng.normal(size=(7, 3)))
    dataset = CategoryDataset({'x': ('w3', 'w0', 'w5', 'w1'), 'y': ('w2', 'w6', 'w4')})
    for k in (1, 2, 3, 5):
        assert topk_score(table, dataset, k) == pytest.approx(brute_force_topk(table, dataset, k))


def test_topk_small_categories_shrink_k():
    table = EmbeddingTable(['a', 'b', 'c', 'd', 'e'], np.array([[0.0], [0.1], [5.0], [5.1], [5.2]]))
    dataset = CategoryDataset({'pair': ('a', 'b'), 'triple': ('c', 'd', 'e')})
    assert topk_score(table, dataset, k=5) == 1.0


def test_topk_ties_go_to_earlier_table_entries():
    dataset = CategoryDataset({'a': ('q', 'near1'), 'b': ('near2', 'other')})
    table = EmbeddingTable(['q', 'near1', 'near2', 'other'], np.array([[0.0], [1.0], [-1.0], [9.0]]))
    # q sees near1 and near2 at equal distance; near1 comes first in the table
    assert topk_score(table, dataset, k=1) == pytest.approx((1.0 + 1.0 + 0.0 + 0.0) / 4)


def test_topk_word_in_two_categories_is_not_its_own_neighbour():
    table = EmbeddingTable(['cat', 'dog', 'bat', 'hammer', 'saw'],
                           np.array([[0.0], [0.1], [5.0], [10.0], [10.1]]))
    dataset = CategoryDataset({'animal': ('cat', 'dog', 'bat'), 'tool': ('hammer', 'saw', 'bat')})
    # both bat entries look past each other: dog is nearest, a hit for animal and a miss for tool
    assert topk_score(table, dataset, k=1) == pytest.approx(5 / 6)
    assert topk_score(table, dataset, k=2) == pytest.approx(brute_force_topk(table, dataset, 2))


def test_topk_requires_a_category_with_two_members():
    table = EmbeddingTable(['a', 'b'], np.eye(2))
    with pytest.raises(InsufficientCategory):
        topk_score(table, CategoryDataset({'x': ('a',), 'y': ('b',)}))


def test_topk_missing_word():
    table = EmbeddingTable(['a', 'b'], np.eye(2))
    with pytest.raises(MissingWord):
        topk_score(table, CategoryDataset({'x': ('a', 'c'), 'y': ('b', 'd')}))


def test_orthogonal_and_affine_invariance():
    table, dataset = random_table()
    rng = np.random.default_rng(9)
    rotation, _ = np.linalg.qr(rng.normal(size=(table.dim, table.dim)))
    transformed = [
        EmbeddingTable(table.words, table.vectors @ rotation),
        EmbeddingTable(table.words, 3.0 * table.vectors + rng.normal(size=table.dim)),
    ]
    topk = topk_score(table, dataset, 3)
    ooo = ooo_score(table, dataset, set_count=200, in_size=4, seed=2)
    for other in transformed:
        assert topk_score(other, dataset, 3) == pytest.approx(topk)
        assert ooo_score(other, dataset, set_count=200, in_size=4, seed=2) == pytest.approx(ooo)


def _ooo_dataset(outlier_vector):
    table = EmbeddingTable(['n', 'e', 's', 'w', 'odd'],
                           np.array([[0.0, 1.0], [1.0, 0.0], [0.0, -1.0], [-1.0, 0.0], outlier_vector]))
    return table, CategoryDataset({'compass': ('n', 'e', 's', 'w'), 'rest': ('odd',)})


def test_ooo_far_outlier_is_always_found():
    table, dataset = _ooo_dataset([100.0, 0.0])
    assert ooo_score(table, dataset, set_count=50, in_size=4) == 1.0


def test_ooo_outlier_at_the_centroid_is_never_found():
    table, dataset = _ooo_dataset([0.0, 0.0])
    assert ooo_score(table, dataset, set_count=50, in_size=4) == 0.0


def test_ooo_thread_count_does_not_change_the_score():
    table, dataset = random_table(seed=4)
    single = ooo_score(table, dataset, set_count=300, in_size=5, seed=7, threads=1)
    pooled = ooo_score(table, dataset, set_count=300, in_size=5, seed=7, threads=4)
    assert single == pooled


def test_ooo_trial_agrees_with_direct_computation():
    table, dataset = random_table(seed=6)
    pools = _ooo_pools(dataset, 5)
    for t in range(50):
        hit, words = ooo_trial(table, pools, 5, np.random.default_rng(t))
        assert len(set(words)) == 6
        group = next(name for name, members in dataset.categories.items() if words[0] in members)
        assert all(w in dataset.categories[group] for w in words[:5])
        assert words[5] not in dataset.categories[group]
        vectors = np.array([table.vector(w) for w in words])
        distances = [np.sqrt(np.sum((v - vectors.mean(axis=0)) ** 2)) for v in vectors]
        assert hit == (int(np.argmax(distances)) == 5)


def test_ooo_needs_a_large_enough_category():
    table, dataset = random_table(members=3)
    with pytest.raises(InsufficientCategory):
        ooo_score(table, dataset, set_count=10, in_size=4)


def test_kfold_indices_partition():
    parts = kfold_indices(23, 5, seed=3)
    assert len(parts) == 5
    joined = np.concatenate(parts)
    assert sorted(joined.tolist()) == list(range(23))
    assert [p.tolist() for p in parts] == [p.tolist() for p in kfold_indices(23, 5, seed=3)]
    with pytest.raises(ValueError):
        kfold_indices(3, 5)
    with pytest.raises(ValueError):
        kfold_indices(10, 1)


def test_separable_declension_probe():
    rng = np.random.default_rng(0)
    words, vectors, triples = [], [], []
    for i in range(60):
        label = 'strong' if i % 2 else 'weak'
        sign = 1.0 if label == 'strong' else -1.0
        nom = np.concatenate([[3.0 * sign], rng.normal(size=3)])
        gen = np.concatenate([[3.0 * sign], rng.normal(size=3)])
        words += [f'nom{i}', f'gen{i}']
        vectors += [nom, gen]
        triples.append((f'nom{i}', f'gen{i}', label))
    table = EmbeddingTable(words, np.array(vectors))
    accuracy = declension_probe(table, triples, folds=5, hidden=16, epochs=200, lr=0.05)
    assert accuracy > 0.99


def test_shuffled_labels_stay_near_chance():
    rng = np.random.default_rng(1)
    words = [f'form{i}' for i in range(200)]
    table = EmbeddingTable(words, rng.normal(size=(200, 8)))
    pairs = [(w, str(rng.integers(2))) for w in words]
    accuracy = casus_numerus_probe(table, pairs, folds=5, hidden=16, epochs=100, lr=0.01)
    assert abs(accuracy - 0.5) <= 0.15


def test_chiasmus_features_order():
    table = EmbeddingTable(['a', 'b'], np.array([[1.0, 0.0], [0.0, 1.0]]))
    np.testing.assert_allclose(chiasmus_features(table, 'a', 'b', 'b', 'a'),
                               [1.0, 1.0, 0.0, 0.0, 1.0, 1.0], atol=1e-12)


def _chiasmus_rows(seed=0):
    rng = np.random.default_rng(seed)
    words = [f'w{i}' for i in range(30)]
    table = EmbeddingTable(words, rng.normal(size=(30, 8)))
    rows = []
    for i in range(40):
        if i % 2:
            a, b = rng.choice(words, size=2, replace=False)
            rows.append((a, b, b, a, 1))
        else:
            rows.append(tuple(rng.choice(words, size=4, replace=False)) + (0,))
    return table, rows


def test_chiasmus_probe_learns_the_reversal_pattern():
    table, rows = _chiasmus_rows()
    assert chiasmus_probe(table, rows, folds=5, epochs=200, lr=0.05) > 0.9


def test_chiasmus_probe_rejects_single_label():
    table, rows = _chiasmus_rows()
    with pytest.raises(DegenerateTraining):
        chiasmus_probe(table, [r for r in rows if r[4] == 1])


def _metaphor_table(seed=0, count=40):
    rng = np.random.default_rng(seed)
    words, vectors, pairs = [], [], []
    for i in range(count):
        noun = rng.normal(size=6)
        metaphorical = i % 2
        adjective = rng.normal(size=6) if metaphorical else noun + rng.normal(scale=0.05, size=6)
        words += [f'adj{i}', f'noun{i}']
        vectors += [adjective, noun]
        pairs.append((f'adj{i}', f'noun{i}', metaphorical))
    return EmbeddingTable(words, np.array(vectors)), pairs


def test_metaphor_model_starts_from_cosine_distance():
    model = MetaphorModel(2)
    distance = model.distance(np.array([[1.0, 0.0], [1.0, 0.0]]), np.array([[2.0, 0.0], [0.0, 3.0]])).data
    np.testing.assert_allclose(distance, [0.0, 1.0], atol=1e-9)


def test_metaphoricity_scores_are_probabilities():
    table, pairs = _metaphor_table()
    model = metaphoricity_model(table, pairs, epochs=300, lr=0.05)
    scores = model.score(table.matrix([p[0] for p in pairs]), table.matrix([p[1] for p in pairs]))
    assert np.all((scores >= 0.0) & (scores <= 1.0))
    labels = np.array([p[2] for p in pairs])
    assert scores[labels == 1].mean() > scores[labels == 0].mean()


def test_metaphor_probe_separates_literal_and_figurative_pairs():
    table, pairs = _metaphor_table()
    assert metaphor_probe(table, pairs, folds=10, epochs=300, lr=0.05) > 0.9


def test_metaphor_probe_rejects_single_label():
    table, pairs = _metaphor_table()
    with pytest.raises(DegenerateTraining):
        metaphor_probe(table, [p for p in pairs if p[2] == 0], folds=5)


def test_reports(tmp_path):
    rows = [('topk', 0.8333333), ('sets', 1000)]
    text = format_report(rows)
    assert text.splitlines()[2] == 'topk    0.833'
    assert text.splitlines()[3] == 'sets    1000'
    path = tmp_path / 'report.tsv'
    write_report(rows, str(path))
    assert path.read_text(encoding='utf-8') == 'metric\tvalue\ntopk\t0.833333\nsets\t1000\n'


def test_chiasmus_features_match_the_cosine_definition():
    rng = np.random.default_rng(8)
    table = EmbeddingTable(['p', 'q', 'r', 's'], rng.normal(size=(4, 5)))
    features = chiasmus_features(table, 'p', 'q', 'r', 's')
    expected = []
    for a, b in (('p', 'q'), ('p', 'r'), ('p', 's'), ('q', 'r'), ('q', 's'), ('r', 's')):
        u, v = table.vector(a), table.vector(b)
        expected.append(1.0 - u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))
    assert np.max(np.abs(features - np.array(expected))) < 1e-12


def test_ooo_is_bit_for_bit_reproducible():
    table, dataset = random_table(seed=10)
    first = [ooo_trial(table, _ooo_pools(dataset, 4), 4, np.random.default_rng(3)) for _ in range(3)]
    assert first[0] == first[1] == first[2]
    assert ooo_score(table, dataset, 100, 4, seed=5) == ooo_score(table, dataset, 100, 4, seed=5)
