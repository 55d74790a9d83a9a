import argparse
import os
import sys

import numpy as np

from alphabet_tokenizer import (
    EmptyWord, MalformedSequence, UnknownSpecial, WordTooLong, display_tokens, encode_token,
)
from corpus_io import (
    FILE_FORMATS, CorpusFormatError, export_embeddings, load_casus_pairs, load_categories,
    load_chiasmus_rows, load_corpus, load_declension_triples, load_metaphor_pairs, load_word_pairs,
)
from eval_metrics import (
    DegenerateTraining, EmbeddingTable, InsufficientCategory, MissingWord, casus_numerus_probe,
    chiasmus_features, chiasmus_probe, declension_probe, format_report, metaphor_probe,
    metaphoricity_model, ooo_score, topk_score, write_report,
)
from utils import ConfigError, ConfigManager

SOURCE_DIR = os.path.dirname(os.path.abspath(__file__))

HANDLED_ERRORS = (
    ConfigError, CorpusFormatError, WordTooLong, EmptyWord, MalformedSequence, UnknownSpecial,
    MissingWord, InsufficientCategory, DegenerateTraining, ValueError, FloatingPointError, OSError,
)


class UsageParser(argparse.ArgumentParser):
    """Usage errors print the file format reference along with the message."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}\n\n{FILE_FORMATS}", file=sys.stderr)
        sys.exit(2)


def build_parser():
    parser = UsageParser(prog='rce', description='Rich Character Embedding toolkit')
    parser.add_argument('--seed', type=int, help='global random seed')
    parser.add_argument('--threads', type=int, help='worker threads for parallel stages')
    parser.add_argument('--precision', choices=['float64', 'float32'], help='floating point precision')
    parser.add_argument('--config', default=None, help='user configuration file (YAML)')
    parser.add_argument('--out', default=None, help='output file of the command')
    commands = parser.add_subparsers(dest='command', required=True, parser_class=UsageParser)

    p = commands.add_parser('tokenize', help='print the character token sequence of words')
    p.add_argument('words', nargs='+')
    p.add_argument('--pad-to', type=int, default=None)

    p = commands.add_parser('train', help='train an RCE, c2v or combined encoder')
    p.add_argument('--corpus', required=True)
    p.add_argument('--encoder', choices=['rce', 'c2v', 'combined'])
    p.add_argument('--steps', type=int)
    p.add_argument('--batch-size', type=int)
    p.add_argument('--lr', type=float)
    p.add_argument('--window', type=int)
    p.add_argument('--dict-size', type=int)
    p.add_argument('--w-context', type=float)
    p.add_argument('--w-identity', type=float)
    p.add_argument('--w-dict', type=float)
    p.add_argument('--metrics', default=None, help='metrics log (default: <out>.metrics.tsv)')

    p = commands.add_parser('embed', help='write word vectors for a corpus or word list')
    p.add_argument('--model', required=True)
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument('--corpus')
    source.add_argument('--words', help='file with one word per line')

    p = commands.add_parser('eval-topk', help='TopK category neighbourhood score')
    p.add_argument('--embeddings', required=True)
    p.add_argument('--categories', required=True)
    p.add_argument('--k', type=int)

    p = commands.add_parser('eval-ooo', help='Odd-One-Out score')
    p.add_argument('--embeddings', required=True)
    p.add_argument('--categories', required=True)
    p.add_argument('--sets', type=int)
    p.add_argument('--in-size', type=int)

    for name, text in (('probe-declension', 'declension class from nominative + genitive'),
                       ('probe-casus', 'case and number from a single form'),
                       ('probe-chiasmus', 'chiasmus from the six distance features')):
        p = commands.add_parser(name, help=f'cross-validated probe: {text}')
        p.add_argument('--embeddings', required=True)
        p.add_argument('--data', required=True)
        p.add_argument('--folds', type=int)

    p = commands.add_parser('features-chiasmus', help='six pairwise cosine distances per row')
    p.add_argument('--embeddings', required=True)
    p.add_argument('--data', required=True)

    p = commands.add_parser('score-metaphor', help='metaphoricity transform: CV accuracy and pair scores')
    p.add_argument('--embeddings', required=True)
    p.add_argument('--train', required=True)
    p.add_argument('--score', default=None, help='adjective/noun pairs to score with a model fit on all data')
    p.add_argument('--folds', type=int)

    p = commands.add_parser('pretrain-lm', help='pretrain the small language model')
    p.add_argument('--corpus', required=True)
    p.add_argument('--variant', choices=['rce', 'lookup'])
    p.add_argument('--steps', type=int, required=True)
    p.add_argument('--held-out', type=int, default=0, help='report NSP accuracy on this many fresh pairs')

    p = commands.add_parser('eval-swag', help='continuation choice accuracy')
    p.add_argument('--model', required=True)
    p.add_argument('--items', required=True)
    p.add_argument('--train-items', default=None, help='items for task training before testing')
    p.add_argument('--train-steps', type=int, default=200)
    p.add_argument('--train-lr', type=float, default=1e-4)

    p = commands.add_parser('make-swag', help='build continuation items from a corpus')
    p.add_argument('--corpus', required=True)
    p.add_argument('--count', type=int, default=1000)
    return parser


def config_overrides(args):
    """Command line values mapped to their config keys; unset flags stay None."""
    get = lambda name: getattr(args, name, None)
    return {
        ('misc', 'seed'): get('seed'),
        ('misc', 'threads'): get('threads'),
        ('misc', 'precision'): get('precision'),
        ('training', 'encoder'): get('encoder'),
        ('training', 'steps'): get('steps') if args.command == 'train' else None,
        ('training', 'batch_size'): get('batch_size'),
        ('training', 'lr'): get('lr'),
        ('training', 'window'): get('window'),
        ('training', 'dict_size'): get('dict_size'),
        ('training', 'w_context'): get('w_context'),
        ('training', 'w_identity'): get('w_identity'),
        ('training', 'w_dict'): get('w_dict'),
        ('evaluation', 'topk_k'): get('k'),
        ('evaluation', 'ooo_sets'): get('sets'),
        ('evaluation', 'ooo_in_size'): get('in_size'),
        ('language_model', 'variant'): get('variant'),
    }


class RceCommandLine:
    def __init__(self, args):
        self.args = args
        self.seed = ConfigManager.get_config_value('misc', 'seed') or 0

    def run(self):
        handler = getattr(self, 'cmd_' + self.args.command.replace('-', '_'))
        return handler() or 0

    def emit(self, text):
        """Write command output to --out, or print it."""
        if self.args.out:
            with open(self.args.out, 'w', encoding='utf-8', newline='\n') as file:
                file.write(text + '\n')
            ConfigManager.log_success(f"Wrote {self.args.out}")
        else:
            print(text)

    def require_out(self):
        if not self.args.out:
            raise ConfigError(f"{self.args.command} needs --out")
        return self.args.out

    def report(self, name, value):
        rows = [(name, value)]
        if self.args.out:
            write_report(rows, self.args.out)
            ConfigManager.log_success(f"Wrote {self.args.out}")
        ConfigManager.console_print(format_report(rows))
        print(f"{value:.3f}")

    def folds(self, key='probe_folds'):
        return self.args.folds or ConfigManager.get_config_value('evaluation', key)

    def cmd_tokenize(self):
        pad_to = self.args.pad_to or ConfigManager.get_config_value('tokenizer', 'max_word_len')
        truncate = ConfigManager.get_config_value('tokenizer', 'truncate')
        lines = [display_tokens(encode_token(w, pad_to=pad_to, truncate=truncate)) for w in self.args.words]
        self.emit('\n'.join(lines))

    def cmd_train(self):
        from c2v_encoder import C2vConfig, C2vModel, CombinedEncoder
        from rce_encoder import RceConfig, RceModel
        from training_heads import HeadWeights, TrainOptions, save_training_checkpoint, train

        out = self.require_out()
        kind = ConfigManager.get_config_value('training', 'encoder')
        if kind == 'rce':
            model = RceModel(RceConfig.from_config())
        elif kind == 'c2v':
            model = C2vModel(C2vConfig.from_config())
        else:
            model = CombinedEncoder(RceModel(RceConfig.from_config()), C2vModel(C2vConfig.from_config()))
        corpus = load_corpus(self.args.corpus)
        opts = TrainOptions.from_config(metrics_path=self.args.metrics or out + '.metrics.tsv',
                                        checkpoint_path=out)
        result = train(model, corpus, HeadWeights.from_config(), opts)
        save_training_checkpoint(out, result.model, result.heads, result.dictionary)
        ConfigManager.log_success(f"Saved model to {out}")

    def cmd_embed(self):
        from rce_encoder import load_encoder

        out = self.require_out()
        model = load_encoder(self.args.model)
        if self.args.corpus:
            words = load_corpus(self.args.corpus).vocabulary()
        else:
            with open(self.args.words, 'r', encoding='utf-8') as file:
                words = [line.strip() for line in file if line.strip()]
        written = export_embeddings(model, words, out)
        ConfigManager.log_success(f"Wrote {len(written)} vectors to {out}")

    def cmd_eval_topk(self):
        table = EmbeddingTable.load(self.args.embeddings)
        dataset = load_categories(self.args.categories)
        k = ConfigManager.get_config_value('evaluation', 'topk_k')
        self.report(f'topk@{k}', topk_score(table, dataset, k))

    def cmd_eval_ooo(self):
        table = EmbeddingTable.load(self.args.embeddings)
        dataset = load_categories(self.args.categories)
        section = ConfigManager.get_config_section('evaluation')
        score = ooo_score(table, dataset, section['ooo_sets'], section['ooo_in_size'], self.seed,
                          ConfigManager.get_config_value('misc', 'threads'))
        self.report('odd-one-out', score)

    def cmd_probe_declension(self):
        table = EmbeddingTable.load(self.args.embeddings)
        triples = load_declension_triples(self.args.data)
        self.report('declension', declension_probe(table, triples, self.folds(), self.seed))

    def cmd_probe_casus(self):
        table = EmbeddingTable.load(self.args.embeddings)
        pairs = load_casus_pairs(self.args.data)
        self.report('casus-numerus', casus_numerus_probe(table, pairs, self.folds(), self.seed))

    def cmd_probe_chiasmus(self):
        table = EmbeddingTable.load(self.args.embeddings)
        rows = load_chiasmus_rows(self.args.data)
        self.report('chiasmus', chiasmus_probe(table, rows, self.folds(), self.seed))

    def cmd_features_chiasmus(self):
        table = EmbeddingTable.load(self.args.embeddings)
        lines = ['w1\tw2\tw3\tw4\td12\td13\td14\td23\td24\td34\tlabel']
        for row in load_chiasmus_rows(self.args.data):
            features = chiasmus_features(table, *row[:4])
            lines.append('\t'.join(list(row[:4]) + ['%.12g' % f for f in features] + [str(row[4])]))
        self.emit('\n'.join(lines))

    def cmd_score_metaphor(self):
        table = EmbeddingTable.load(self.args.embeddings)
        pairs = load_metaphor_pairs(self.args.train)
        accuracy = metaphor_probe(table, pairs, self.folds('metaphor_folds'), self.seed)
        ConfigManager.console_print(format_report([('metaphor', accuracy)]))
        if not self.args.score:
            self.report('metaphor', accuracy)
            return
        model = metaphoricity_model(table, pairs)
        to_score = load_word_pairs(self.args.score)
        scores = model.score(table.matrix([a for a, _ in to_score]), table.matrix([n for _, n in to_score]))
        self.emit('\n'.join(f"{a}\t{n}\t{s:.6f}" for (a, n), s in zip(to_score, scores)))

    def cmd_pretrain_lm(self):
        from minilm import LmConfig, build_lm, make_nsp_pairs, nsp_accuracy, pretrain, save_lm

        out = self.require_out()
        corpus = load_corpus(self.args.corpus)
        model = build_lm(LmConfig.from_config(), corpus)
        pretrain(model, corpus, self.args.steps, seed=self.seed)
        save_lm(model, out)
        ConfigManager.log_success(f"Saved language model to {out}")
        if self.args.held_out:
            pairs = make_nsp_pairs(corpus, self.args.held_out, np.random.default_rng(self.seed + 1))
            self.report_value('nsp', nsp_accuracy(model, pairs))

    def report_value(self, name, value):
        ConfigManager.console_print(format_report([(name, value)]))
        print(f"{value:.3f}")

    def cmd_eval_swag(self):
        from minilm import finetune_swag, load_lm, load_swag_items, swag_eval

        model = load_lm(self.args.model)
        if self.args.train_items:
            finetune_swag(model, load_swag_items(self.args.train_items), self.args.train_steps,
                          lr=self.args.train_lr, seed=self.seed)
        self.report('swag', swag_eval(model, load_swag_items(self.args.items)))

    def cmd_make_swag(self):
        from minilm import build_swag_items, save_swag_items

        out = self.require_out()
        items = build_swag_items(load_corpus(self.args.corpus), self.args.count, self.seed)
        save_swag_items(items, out)
        ConfigManager.log_success(f"Wrote {len(items)} items to {out}")


def configure(args):
    """Resolve defaults < config file < flags, then set up the numeric backend."""
    from tensor_autodiff import enable_finite_checks, manual_seed, set_default_dtype

    config_path = args.config or os.path.join(SOURCE_DIR, 'config.yaml')
    if args.config and not os.path.isfile(args.config):
        raise ConfigError(f"config file {args.config} does not exist")
    ConfigManager.reset()
    ConfigManager.initialize(config_path=config_path)
    ConfigManager.apply_overrides(config_overrides(args))
    ConfigManager.validate_config()

    ConfigManager.console_print(ConfigManager.dump_config())
    if args.out:
        ConfigManager.save_config(args.out + '.config.yaml')

    set_default_dtype(ConfigManager.get_config_value('misc', 'precision'))
    enable_finite_checks(ConfigManager.get_config_value('misc', 'check_finite'))
    manual_seed(ConfigManager.get_config_value('misc', 'seed') or 0)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        configure(args)
        return RceCommandLine(args).run()
    except HANDLED_ERRORS as exc:
        ConfigManager.log_error(f"{type(exc).__name__}: {exc}")
        return 1


if __name__ == '__main__':
    sys.exit(main())
