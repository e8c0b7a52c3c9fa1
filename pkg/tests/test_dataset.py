import json

import numpy as np
import pytest

from stacklab import imaging
from stacklab.dataset import (Manifest, UnknownGroup, build_dataset, record_unstable, resolve_groups, select,
                              split_of, split_view, stats)
from stacklab.physics import simulate
from stacklab.stability import TAU, label_stability

GROUPS = "4B-2D-Uni,6B-3D-NonUni"


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    return build_dataset(GROUPS, 4, 7, out), out


def test_manifest_shape(built):
    m, out = built
    assert len(m) == 8
    assert m.groups == ["4B-2D-Uni", "6B-3D-NonUni"]
    assert m.header["per_group"] == 4 and m.header["base_seed"] == 7
    assert m.tau == TAU
    for r in m.records:
        assert (out / r["mask"]).exists() and (out / r["heat"]).exists()
        assert len(r["displacements"]) == len(r["scene"]["blocks"])


def test_split_rule_is_index_parity(built):
    m, _ = built
    for r in m.records:
        assert r["split"] == split_of(r["scene_index"])
    train = split_view(m, GROUPS, "train")
    test = split_view(m, GROUPS, "test")
    assert len(train) == len(test) == 4
    assert not train.keys & test.keys


def test_read_round_trip(built):
    m, out = built
    back = Manifest.read(out)
    assert back == m
    r = back.records[3]
    assert back.scene(r).to_dict() == r["scene"]


def test_labels_consistent_with_displacements(built):
    m, _ = built
    for r in m.records:
        assert record_unstable(r, m.tau) == r["unstable"]


def test_label_reproduces_from_stored_scene(built):
    m, _ = built
    r = m.records[1]
    assert label_stability(simulate(m.scene(r)), m.tau).unstable == r["unstable"]


def test_masks_at_both_resolutions(built):
    m, _ = built
    r = m.records[0]
    big = m.mask(r, imaging.ARCHIVE_RES)
    small = m.mask(r)
    assert big.bits.shape == (imaging.ARCHIVE_RES,) * 2
    assert small.bits.shape == (imaging.TRAIN_RES,) * 2
    assert small == imaging.training_mask(m.scene(r))
    assert m.heat(r).shape == (imaging.TRAIN_RES,) * 2


def test_heat_map_empty_for_stable_zero_motion(built):
    m, _ = built
    for r in m.records:
        heat = m.heat(r)
        assert 0.0 <= heat.min() and heat.max() <= 1.0
        if r["unstable"]:
            assert heat.max() == 1.0


def test_rebuild_is_byte_identical(built, tmp_path):
    m, out = built
    again = build_dataset(GROUPS, 4, 7, tmp_path)
    assert (tmp_path / "manifest.jsonl").read_bytes() == (out / "manifest.jsonl").read_bytes()
    for r in again.records:
        assert (tmp_path / r["mask"]).read_bytes() == (out / r["mask"]).read_bytes()
        assert (tmp_path / r["heat"]).read_bytes() == (out / r["heat"]).read_bytes()


def test_stats_rows(built):
    m, _ = built
    rows = stats(m)
    assert [r["group"] for r in rows] == m.groups
    for row in rows:
        assert row["stable"] + row["unstable"] == row["scenes"] == 4


def test_view_labels_and_masks(built):
    m, _ = built
    v = split_view(m, "4B-2D-Uni", "train")
    assert v.masks.shape == (2, imaging.TRAIN_RES, imaging.TRAIN_RES)
    assert list(v.labels) == [int(r["unstable"]) for r in v.records]
    assert set(np.unique(v.masks)) <= {0.0, 1.0}


def test_group_aliases():
    assert len(resolve_groups("all")) == 16
    assert all(g.startswith(("4B", "6B")) for g in resolve_groups("simple"))
    assert all(g.startswith(("10B", "14B")) for g in resolve_groups("complex"))
    with pytest.raises(UnknownGroup, match="valid groups"):
        resolve_groups("5B-2D-Uni")


def test_select_rejects_absent_group_and_bad_split(built):
    m, _ = built
    with pytest.raises(UnknownGroup):
        select(m, "10B-2D-Uni")
    with pytest.raises(ValueError):
        select(m, "4B-2D-Uni", "val")


def test_manifest_without_header_rejected(tmp_path):
    (tmp_path / "manifest.jsonl").write_text(json.dumps({"group_id": "x"}) + "\n")
    with pytest.raises(ValueError):
        Manifest.read(tmp_path)
