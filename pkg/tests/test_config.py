import os

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from smearmoe import checkpoint, config
from smearmoe.errors import ConfigError
from smearmoe.io import atomic_write


# --- config ---------------------------------------------------------------------

def test_defaults_are_valid():
    cfg = config.from_dict({})
    assert cfg.architecture == "smear" and cfg.k is None
    assert cfg.train.seed == cfg.corpus.seed == 0


def test_seed_override_reaches_every_stream():
    cfg = config.from_dict({"seed": 1}, seed=9)
    assert cfg.seed == cfg.train.seed == cfg.corpus.seed == 9


def test_pinned_corpus_seed_survives():
    cfg = config.from_dict({"corpus": {"seed": 4}}, seed=9)
    assert cfg.corpus.seed == 4 and cfg.train.seed == 9


@pytest.mark.parametrize("data,field", [
    ({"architecture": "gru"}, "architecture"),
    ({"architecture": "token_moe"}, "k"),
    ({"architecture": "token_moe", "k": 5}, "k"),
    ({"architecture": "smear", "k": 1}, "k"),
    ({"architecture": "monolithic", "renormalize": True}, "renormalize"),
    ({"bogus": 1}, "bogus"),
    ({"train": {"lr": 1.0}}, "train.lr"),
    ({"train": {"seed": 3}}, "train.seed"),
    ({"train": {"lr_peak": -1.0}}, "train.lr_peak"),
    ({"train": {"max_steps": "many"}}, "train.max_steps"),
    ({"train": {"batch_size": 2.5}}, "train.batch_size"),
    ({"corpus": {"sigma": -1}}, "corpus.sigma"),
    ({"corpus": {"d_enc": 16}}, "dims.d_enc"),
    ({"corpus": {"num_languages": 3, "num_families": 1}, "architecture": "tied"}, "dims.num_experts"),
    ({"dims": {"d_z": 0}}, "dims"),
    ({"dims": "wide"}, "dims"),
    ({"seed": True}, "seed"),
])
def test_errors_name_the_field(data, field):
    with pytest.raises(ConfigError) as info:
        config.from_dict(data)
    assert info.value.field == field


def test_hard_moe_accepts_k():
    cfg = config.from_dict({"architecture": "utterance_moe", "k": 2, "renormalize": True})
    assert cfg.k == 2 and cfg.renormalize


def test_yaml_echo_round_trips(tmp_path):
    cfg = config.from_dict({"architecture": "token_moe", "k": 2, "train": {"max_steps": 7, "warmup_steps": 2},
                            "corpus": {"alpha": 0.5}}, seed=3, output_dir=str(tmp_path))
    path = tmp_path / "echo.yaml"
    path.write_text(config.dump(cfg))
    back = config.load(path)
    assert back == cfg


def test_load_reports_bad_files(tmp_path):
    with pytest.raises(ConfigError) as info:
        config.load(tmp_path / "missing.yaml")
    assert info.value.field == "config"
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: [unclosed\n")
    with pytest.raises(ConfigError):
        config.load(bad)
    bad.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        config.load(bad)
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    assert config.load(empty) == config.from_dict({})


def test_dump_is_plain_yaml():
    data = yaml.safe_load(config.dump(config.from_dict({})))
    assert data["dims"]["ds_strides"] == [2, 2]
    assert "seed" not in data["train"]


# --- checkpoint -------------------------------------------------------------------

def _state(seed=0):
    rng = np.random.default_rng(seed)
    return {"b.w": rng.normal(size=(3, 4)), "a": rng.normal(size=5), "s": np.array(1e-300)}


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    state = _state()
    state["odd"] = np.array([np.nan, np.inf, -np.inf, -0.0, 5e-324])
    path = tmp_path / "ck.json"
    checkpoint.save(path, state, {"architecture": "smear"})
    back, cfg = checkpoint.load(path)
    assert cfg == {"architecture": "smear"}
    assert set(back) == set(state)
    for k in state:
        assert back[k].shape == state[k].shape
        assert back[k].tobytes() == state[k].tobytes()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(allow_nan=True, allow_infinity=True), min_size=1, max_size=20))
def test_checkpoint_any_floats_round_trip(values):
    arr = np.array(values, dtype=np.float64)
    back, _ = checkpoint.loads(checkpoint.dumps({"x": arr}))
    assert back["x"].tobytes() == arr.tobytes() or (
        np.isnan(arr).any() and np.array_equal(back["x"], arr, equal_nan=True))


def test_checkpoint_is_deterministic():
    assert checkpoint.dumps(_state(), {"a": 1}) == checkpoint.dumps(dict(reversed(_state().items())),
                                                                    {"a": 1})


@pytest.mark.parametrize("text", [
    "not json",
    '{"format": "something-else", "version": 1}',
    '{"format": "smearmoe-checkpoint", "version": 2, "tensors": {}}',
    '{"format": "smearmoe-checkpoint", "version": 1, "tensors": {"x": {"shape": [3], "data": [1.0]}}}',
])
def test_checkpoint_rejects_bad_documents(text):
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(text)


# --- atomic writes ---------------------------------------------------------------------

def test_atomic_write_replaces_and_leaves_no_temp(tmp_path):
    path = tmp_path / "sub" / "f.txt"
    atomic_write(path, "one")
    atomic_write(path, "two")
    assert path.read_text() == "two"
    assert os.listdir(path.parent) == ["f.txt"]


def test_atomic_write_failure_keeps_old_file(tmp_path, monkeypatch):
    path = tmp_path / "f.txt"
    atomic_write(path, "old")

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        atomic_write(path, "new")
    assert path.read_text() == "old"
    assert os.listdir(tmp_path) == ["f.txt"]
