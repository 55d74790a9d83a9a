import pytest

from utils import ConfigError, ConfigManager


def test_defaults_come_from_schema(tmp_path):
    ConfigManager.initialize(config_path=str(tmp_path / 'missing.yaml'))
    assert ConfigManager.get_config_value('rce', 'embed_dim') == 64
    assert ConfigManager.get_config_value('training', 'batch_size') == 512
    assert ConfigManager.get_config_value('language_model', 'warmup_steps') == 5000
    assert ConfigManager.get_config_value('c2v', 'kernel_widths') == [2, 3, 4]
    assert ConfigManager.get_config_value('no', 'such') is None


def test_user_file_overrides_defaults(tmp_path):
    path = tmp_path / 'config.yaml'
    path.write_text('rce:\n  layers: 2\nmisc:\n  logging:\n    eval_debug: true\n', encoding='utf-8')
    ConfigManager.initialize(config_path=str(path))
    assert ConfigManager.get_config_value('rce', 'layers') == 2
    assert ConfigManager.get_config_value('rce', 'heads') == 2
    assert ConfigManager.should_log_feature('eval_debug')
    assert not ConfigManager.should_log_feature('io_debug')


def test_flags_override_file_and_none_is_skipped(tmp_path):
    path = tmp_path / 'config.yaml'
    path.write_text('misc:\n  seed: 5\n', encoding='utf-8')
    ConfigManager.initialize(config_path=str(path))
    ConfigManager.apply_overrides({('misc', 'seed'): 9, ('misc', 'threads'): None})
    assert ConfigManager.get_config_value('misc', 'seed') == 9
    assert ConfigManager.get_config_value('misc', 'threads') == 1


def test_broken_yaml_keeps_defaults(tmp_path, capsys):
    path = tmp_path / 'config.yaml'
    path.write_text('rce: [unclosed\n', encoding='utf-8')
    ConfigManager.initialize(config_path=str(path))
    assert ConfigManager.get_config_value('rce', 'embed_dim') == 64
    assert '[ERROR]' in capsys.readouterr().err


def test_validate_rejects_wrong_type_and_option(tmp_path):
    ConfigManager.initialize(config_path=str(tmp_path / 'none.yaml'))
    ConfigManager.validate_config()
    ConfigManager.set_config_value('many', 'rce', 'layers')
    with pytest.raises(ConfigError, match='rce.layers'):
        ConfigManager.validate_config()
    ConfigManager.reload_config()
    ConfigManager.set_config_value('gru', 'training', 'encoder')
    with pytest.raises(ConfigError, match='training.encoder'):
        ConfigManager.validate_config()


def test_save_and_dump_config(tmp_path):
    ConfigManager.initialize(config_path=str(tmp_path / 'none.yaml'))
    target = tmp_path / 'resolved.yaml'
    ConfigManager.save_config(str(target))
    assert ConfigManager.config_file_exists(str(target))
    assert 'embed_dim: 64' in target.read_text(encoding='utf-8')
    assert ConfigManager.dump_config() == target.read_text(encoding='utf-8')


def test_console_print_follows_switch(tmp_path, capsys):
    ConfigManager.initialize(config_path=str(tmp_path / 'none.yaml'))
    ConfigManager.console_print('visible')
    ConfigManager.set_config_value(False, 'misc', 'print_to_terminal')
    ConfigManager.console_print('hidden')
    out = capsys.readouterr().out
    assert 'visible' in out
    assert 'hidden' not in out
    assert not ConfigManager.progress_enabled()


def test_channels_without_initialization(capsys):
    ConfigManager.log_training_debug('quiet')
    ConfigManager.log_status('loud')
    ConfigManager.log_warning('careful')
    captured = capsys.readouterr()
    assert 'quiet' not in captured.out
    assert '[STATUS] loud' in captured.out
    assert '[WARNING] careful' in captured.err


def test_uninitialized_access_raises():
    with pytest.raises(RuntimeError):
        ConfigManager.get_config_value('rce', 'layers')
