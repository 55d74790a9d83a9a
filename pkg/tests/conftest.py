import os
import sys

import pytest

SOURCE_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'rich-char-embed')
sys.path.insert(0, SOURCE_DIR)

from alphabet_tokenizer import default_alphabet  # noqa: E402
from rce_encoder import RceConfig  # noqa: E402
from tensor_autodiff import enable_finite_checks, manual_seed, set_default_dtype  # noqa: E402
from utils import ConfigManager  # noqa: E402


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run desk-scale training oracles')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long training oracle, needs --runslow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def clean_state():
    """Every test starts with an uninitialized config and a fixed seed."""
    ConfigManager.reset()
    set_default_dtype('float64')
    enable_finite_checks(False)
    manual_seed(0)
    yield
    ConfigManager.reset()


@pytest.fixture
def alphabet():
    return default_alphabet()


@pytest.fixture
def tiny_rce_config():
    return RceConfig(embed_dim=8, layers=1, heads=2, ff_dim=16, max_word_len=12, dropout=0.0)


@pytest.fixture
def toy_corpus_lines():
    return [
        'the cat sat on the mat',
        'a dog ran in the park',
        'the cat ate fish',
        'a dog ate bones',
        'birds sing in the park',
        'the mat is red',
    ]


@pytest.fixture
def toy_corpus(toy_corpus_lines):
    from corpus_io import parse_corpus
    return parse_corpus(toy_corpus_lines)
