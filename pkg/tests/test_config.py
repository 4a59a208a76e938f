import os

import pytest

from app.config import Settings, get_config, read_config_file
from app.exceptions import ConfigurationError
from app.models.schemas import Method, OptimizerKind, PairUniverse


@pytest.fixture(autouse=True)
def clean_env(monkeypatch, tmp_path):
    # no stray EXPODEBIAS_ variables or .env file from the developer machine
    monkeypatch.chdir(tmp_path)
    for key in list(os.environ):
        if key.upper().startswith("EXPODEBIAS_"):
            monkeypatch.delenv(key)


class TestSettings:
    def test_defaults(self):
        settings = Settings()
        assert settings.KS == [1, 2, 3]
        assert settings.PAIR_UNIVERSE == PairUniverse.GRID
        assert settings.seeds == [0]
        assert settings.methods == [Method.UBO]

    def test_comma_separated_lists(self):
        settings = Settings(SEEDS="1,2, 3", METHODS="naive;ubo", KS="1,5")
        assert settings.seeds == [1, 2, 3]
        assert settings.methods == [Method.NAIVE, Method.UBO]
        assert settings.KS == [1, 5]

    def test_environment_prefix(self, monkeypatch):
        monkeypatch.setenv("EXPODEBIAS_EPOCHS", "7")
        monkeypatch.setenv("EXPODEBIAS_OPTIMIZER", "sgd")
        settings = Settings()
        assert settings.EPOCHS == 7
        assert settings.OPTIMIZER == OptimizerKind.SGD

    def test_environment_lists(self, monkeypatch):
        monkeypatch.setenv("EXPODEBIAS_SEEDS", "1,2,3")
        monkeypatch.setenv("EXPODEBIAS_METHODS", "relmf;umf")
        settings = Settings()
        assert settings.seeds == [1, 2, 3]
        assert settings.methods == [Method.RELMF, Method.UMF]

    def test_dotenv_lists(self, tmp_path):
        (tmp_path / ".env").write_text("EXPODEBIAS_KS=1,5\nEXPODEBIAS_VARIANCE_M_BARS=0.1, 1.0\n")
        settings = Settings()
        assert settings.KS == [1, 5]
        assert settings.VARIANCE_M_BARS == [0.1, 1.0]

    def test_bad_environment_list_is_a_configuration_error(self, monkeypatch):
        monkeypatch.setenv("EXPODEBIAS_KS", "one,two")
        with pytest.raises(ConfigurationError, match="KS"):
            get_config()

    def test_bilevel_config(self):
        settings = Settings(INNER_LR=0.01, DIM=8, KS="1,3", WEIGHT_DECAY=0.5)
        config = settings.bilevel_config(seed=4)
        assert config.seed == 4
        assert config.dim == 8
        assert config.ks == (1, 3)
        assert config.weight_decay == 0.5
        assert settings.bilevel_config(weight_decay=0.0).weight_decay == 0.0

    def test_synth_config(self):
        config = Settings(CONSTANT_GAMMA=1.0, MAX_USERS=50).synth_config()
        assert config.constant_gamma == 1.0
        assert config.max_users == 50

    def test_config_hash_tracks_values(self):
        assert Settings(SEED=1).config_hash() == Settings(SEED=1).config_hash()
        assert Settings(SEED=1).config_hash() != Settings(SEED=2).config_hash()

    def test_log_level_is_normalised(self):
        assert Settings(LOG_LEVEL="debug").LOG_LEVEL == "DEBUG"


class TestGetConfig:
    def test_file_then_overrides(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# experiment\nepochs=5\nSEEDS=1,2\nmethod=relmf\n")

        settings = get_config(path, EPOCHS=9, seed=None)

        assert settings.EPOCHS == 9
        assert settings.seeds == [1, 2]
        assert settings.METHOD == Method.RELMF

    def test_read_config_file_uppercases_keys(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("dim=4\n")
        assert read_config_file(path) == {"DIM": "4"}

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            get_config(tmp_path / "absent.cfg")

    @pytest.mark.parametrize("overrides", [{"KS": "0,1"}, {"ACTIVE_FRACTION": 1.5}, {"METHOD": "bogus"},
                                           {"LOG_LEVEL": "loud"}, {"CLIP_FLOOR": 0.0}])
    def test_invalid_values_name_the_field(self, overrides):
        field = next(iter(overrides))
        with pytest.raises(ConfigurationError, match=field):
            get_config(**overrides)
