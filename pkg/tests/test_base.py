import json

import numpy as np
import pytest

from mamfsd.lab.base import (FormatError, LabModule, derive_rng, discover_profiles, hash_to_index,
                             load_profile, name_hash, sample_hash)
from mamfsd.lab.layers import LinearLayer, param_rng
from mamfsd.lab.tensor import parameter


def test_sample_hash_is_pure_and_coordinate_sensitive():
    assert sample_hash(42, 0, 3) == sample_hash(42, 0, 3)
    assert sample_hash(42, 0, 3) != sample_hash(42, 3, 0)
    assert sample_hash(42, 0, 3) != sample_hash(43, 0, 3)
    assert 0 <= sample_hash(1, -1) < 2 ** 32


def test_hash_to_index_stays_in_pool():
    for i in range(200):
        assert 0 <= hash_to_index(sample_hash(5, i), 7) < 7


def test_derive_rng_reproduces_streams():
    a = derive_rng(9, 1, 2).random(5)
    b = derive_rng(9, 1, 2).random(5)
    c = derive_rng(9, 2, 1).random(5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_param_rng_depends_on_name_not_order():
    assert name_hash("stage1.block1.conv1") == name_hash("stage1.block1.conv1")
    a = param_rng(0, "cls").random(3)
    param_rng(0, "auxcls").random(3)
    np.testing.assert_array_equal(a, param_rng(0, "cls").random(3))


def test_discover_profiles_lists_default_first():
    assert discover_profiles("synth_")[0] == "synth_default.json"
    assert "gloss_default.json" in discover_profiles()


def test_load_profile_by_name_and_path(tmp_path):
    assert load_profile("gloss_default.json", required=("glosses",))["glosses"]
    path = tmp_path / "custom.json"
    path.write_text(json.dumps({"name": "custom", "pools": {}}), encoding='utf-8')
    assert load_profile(str(path))["name"] == "custom"


def test_load_profile_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_profile("no_such_profile.json")
    path = tmp_path / "partial.json"
    path.write_text(json.dumps({"name": "partial"}), encoding='utf-8')
    with pytest.raises(ValueError):
        load_profile(str(path), required=("glosses",))


class _Pair(LabModule):
    def __init__(self):
        super().__init__()
        self.scale = self.register("scale", parameter(np.ones(2)))
        self.first = self.mount("first", LinearLayer(2, 3, key="first"))
        self.second = self.mount("second", LinearLayer(3, 1, key="second"))


def test_named_parameters_follow_registration_order():
    names = [n for n, _ in _Pair().named_parameters()]
    assert names == ["scale", "first.w", "first.b", "second.w", "second.b"]


def test_state_dict_round_trip_and_mismatch():
    a, b = _Pair(), _Pair()
    b.first.w.data[:] = 0.0
    b.load_state_dict(a.state_dict())
    np.testing.assert_array_equal(a.first.w.data, b.first.w.data)

    state = a.state_dict()
    del state["second.b"]
    with pytest.raises(FormatError):
        b.load_state_dict(state)

    state = a.state_dict()
    state["scale"] = np.ones(3)
    with pytest.raises(FormatError):
        b.load_state_dict(state)


def test_repr_counts_parameters():
    assert repr(_Pair()) == "Lab Module(15 params)"
