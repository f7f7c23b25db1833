import pytest

from mafrec.config import (DESK_PROFILE, FULL_PROFILE, TrainConfig, parse_modalities, read_flat,
                           resolve_config, valid_keys, write_flat)


def test_desk_profile_defaults():
    c = DESK_PROFILE
    assert (c.n, c.d, c.d_prime, c.blocks, c.heads, c.lam, c.fusion) == (20, 64, 32, 2, 4, 10.0, "sum")
    assert c.modalities == ("image", "text", "category")


def test_full_profile():
    c = FULL_PROFILE
    assert (c.d, c.d_prime, c.blocks, c.heads, c.lr, c.epochs) == (256, 128, 4, 8, 1e-4, 200)


def test_flags_override_file_values(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("# comment\nfusion = gate\nlam = 5\nepochs=3\n", encoding="utf-8")
    cfg = resolve_config(read_flat(path), {"lam": "0", "modalities": "none"})
    assert cfg.fusion == "gate" and cfg.lam == 0.0 and cfg.epochs == 3 and cfg.modalities == ()


def test_unknown_key_lists_valid_keys():
    with pytest.raises(KeyError) as err:
        resolve_config({"learning_rate": "1"})
    assert "learning_rate" in str(err.value)
    assert all(k in str(err.value) for k in valid_keys())


def test_round_trip(tmp_path):
    cfg = TrainConfig(fusion="concat", modalities=("text", "image"), lam=2.5, tied=False)
    write_flat(cfg, tmp_path / "c.txt")
    assert resolve_config(read_flat(tmp_path / "c.txt")) == cfg


def test_parse_modalities():
    assert parse_modalities("none") == ()
    assert parse_modalities("ALL") == ("image", "text", "category")
    assert parse_modalities("text, image") == ("text", "image")
    assert TrainConfig(modalities="category,image").modalities == ("image", "category")


@pytest.mark.parametrize("bad", [
    dict(heads=3), dict(d_prime=100), dict(fusion="product"), dict(lam=-1), dict(dropout=1.0),
    dict(modalities=("audio",)), dict(n=0), dict(blocks=0),
])
def test_invalid_configs(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_bad_boolean_and_line(tmp_path):
    with pytest.raises(ValueError):
        resolve_config({"tied": "maybe"})
    path = tmp_path / "c.txt"
    path.write_text("fusion gate\n", encoding="utf-8")
    with pytest.raises(ValueError, match="c.txt:1"):
        read_flat(path)
