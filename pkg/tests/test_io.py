import json
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cryomorph import io
from cryomorph.errors import (ConfigError, CorruptHeader, SidecarMissing, SizeMismatch,
                              TruncatedData, UnsupportedMode)
from cryomorph.nn import NetConfig
from cryomorph.train import build_model
from cryomorph.volume import Volume


def test_mrc_round_trip_bit_exact(tmp_path, rng):
    v = Volume(rng.standard_normal((48, 48, 48)).astype(np.float32).astype(float), 7.5)
    path = tmp_path / "v.mrc"
    io.write_mrc(path, v)
    assert path.stat().st_size == 1024 + 4 * 48**3
    w = io.read_mrc(path)
    assert np.array_equal(w.data, v.data)
    assert w.voxel_size == pytest.approx(7.5, rel=1e-7)


def test_mrc_header_layout(tmp_path, rng):
    d = 8
    data = rng.standard_normal((d, d, d)).astype(np.float32).astype(float)
    path = tmp_path / "v.mrc"
    io.write_mrc(path, Volume(data, 2.0))
    raw = path.read_bytes()
    assert struct.unpack_from("<4i", raw, 0) == (d, d, d, 2)
    assert struct.unpack_from("<3i", raw, 28) == (d, d, d)
    assert struct.unpack_from("<3f", raw, 40) == (16.0, 16.0, 16.0)
    assert raw[208:212] == b"MAP " and raw[212] == 0x44
    # x fastest: the second stored value is data[1, 0, 0]
    assert struct.unpack_from("<f", raw, 1028)[0] == np.float32(data[1, 0, 0])


def _patch(path, offset, fmt, value):
    raw = bytearray(path.read_bytes())
    struct.pack_into(fmt, raw, offset, value)
    path.write_bytes(bytes(raw))


def test_mrc_errors(tmp_path):
    path = tmp_path / "v.mrc"
    io.write_mrc(path, Volume(np.ones((6, 6, 6))))
    _patch(path, 12, "<i", 1)
    with pytest.raises(UnsupportedMode):
        io.read_mrc(path)
    io.write_mrc(path, Volume(np.ones((6, 6, 6))))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(TruncatedData):
        io.read_mrc(path)
    path.write_bytes(b"\0" * 100)
    with pytest.raises(CorruptHeader):
        io.read_mrc(path)
    io.write_mrc(path, Volume(np.ones((6, 6, 6))))
    _patch(path, 208, "<4s", b"XXXX")
    with pytest.raises(CorruptHeader):
        io.read_mrc(path)


def test_raw_round_trip_and_errors(tmp_path, rng):
    v = Volume(rng.standard_normal((10, 10, 10)).astype(np.float32).astype(float), 3.25)
    path = tmp_path / "v.raw"
    io.write_raw(path, v)
    side = json.loads(io.sidecar_path(path).read_text())
    assert side["d"] == 10 and side["byte_order"] == "little"
    w = io.read_raw(path)
    assert np.array_equal(w.data, v.data) and w.voxel_size == 3.25
    side["d"] = 11
    io.sidecar_path(path).write_text(json.dumps(side))
    with pytest.raises(SizeMismatch):
        io.read_raw(path)
    io.sidecar_path(path).unlink()
    with pytest.raises(SidecarMissing):
        io.read_raw(path)


def test_mrc_to_raw_conversion_is_value_identical(tmp_path, rng):
    v = Volume(rng.standard_normal((8, 8, 8)), 1.5)
    io.write_volume(tmp_path / "a.mrc", v)
    m = io.read_volume(tmp_path / "a.mrc")
    io.write_volume(tmp_path / "a.raw", m)
    r = io.read_volume(tmp_path / "a.raw")
    assert np.array_equal(m.data, r.data)


def test_manifest(tmp_path):
    entries = [{"path": "a.mrc", "class_id": 0, "seed": 1}, {"path": "b.mrc", "class_id": 1, "seed": 2}]
    m = io.Manifest(entries, {"d": 8})
    io.write_manifest(tmp_path / "m.json", m)
    back = io.read_manifest(tmp_path / "m.json")
    assert back.entries == entries and back.metadata == {"d": 8}
    assert list(back.labels()) == [0, 1]
    with pytest.raises(ValueError):
        io.Manifest(entries + entries[:1])


def test_load_stack(tmp_path, rng):
    vols = [Volume(rng.standard_normal((6, 6, 6)).astype(np.float32).astype(float), 2.0) for _ in range(3)]
    entries = []
    for i, v in enumerate(vols):
        io.write_mrc(tmp_path / f"{i}.mrc", v)
        entries.append({"path": f"{i}.mrc", "seed": i})
    stack, vs = io.load_stack(io.Manifest(entries), tmp_path)
    assert stack.shape == (3, 6, 6, 6) and vs == 2.0
    assert np.array_equal(stack[1], vols[1].data)


# ---------------------------------------------------------------- config


def test_config_round_trip_default():
    cfg = io.RunConfig()
    assert io.loads_config(io.dumps_config(cfg)) == cfg


@given(st.integers(0, 2**31), st.floats(1e-6, 1.0), st.integers(1, 64), st.booleans(),
       st.sampled_from(["pca", "none"]))
def test_config_round_trip_property(seed, lr, n, ctf, reduction):
    doc = {"seed": seed, "train": {"lr": lr, "n_candidates": n}, "sim": {"apply_ctf": ctf},
           "infer": {"reduction": reduction}}
    cfg = io.config_from_dict(doc)
    assert io.loads_config(io.dumps_config(cfg)) == cfg
    assert cfg.train.lr == lr and cfg.train.n_candidates == n


def test_config_unknown_key_names_key():
    with pytest.raises(ConfigError) as e:
        io.config_from_dict({"train": {"epochz": 3}})
    assert e.value.key == "train.epochz"
    with pytest.raises(ConfigError) as e:
        io.config_from_dict({"bogus": 1})
    assert e.value.key == "bogus"


def test_config_type_errors():
    with pytest.raises(ConfigError) as e:
        io.config_from_dict({"train": {"epochs": 2.5}})
    assert e.value.key == "train.epochs"
    with pytest.raises(ConfigError):
        io.config_from_dict({"sim": {"apply_ctf": "yes"}})
    with pytest.raises(ConfigError):
        io.loads_config("{not json")


# ---------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip(tmp_path, rng):
    cfg = NetConfig(box=24, latent_dim=4)
    enc, dec = build_model(cfg, 3)
    io.save_checkpoint(tmp_path / "m.ckpt", enc, dec, {"epoch": 7})
    enc2, dec2, meta = io.load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"epoch": 7} and enc2.cfg == cfg
    for (n1, p1), (n2, p2) in zip(enc.named_parameters() + dec.named_parameters(),
                                  enc2.named_parameters() + dec2.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.values, p2.values)
    x = rng.standard_normal((2, 24, 24, 24)).astype(np.float32)
    assert np.array_equal(enc(x, training=False).z.values, enc2(x, training=False).z.values)


def test_checkpoint_corrupt(tmp_path):
    enc, dec = build_model(NetConfig(box=24, latent_dim=4), 0)
    path = tmp_path / "m.ckpt"
    io.save_checkpoint(path, enc, dec)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(TruncatedData):
        io.load_checkpoint(path)
    path.write_bytes(b"NOTACKPT" + b"\0" * 16)
    with pytest.raises(CorruptHeader):
        io.load_checkpoint(path)


# ---------------------------------------------------------------- CSV


def test_latent_csv_round_trip(tmp_path, rng):
    n, L, K = 7, 3, 2
    z, theta = rng.standard_normal((n, L)), rng.standard_normal((n, 9))
    coords, post = rng.standard_normal((n, 2)), rng.dirichlet(np.ones(K), n)
    labels = post.argmax(1)
    io.write_latent_csv(tmp_path / "l.csv", z, theta, coords, post, labels)
    header = (tmp_path / "l.csv").read_text().splitlines()[0].split(",")
    assert header == io.latent_columns(L, K)
    back = io.read_latent_csv(tmp_path / "l.csv")
    assert np.array_equal(back["z"], z) and np.array_equal(back["theta"], theta)
    assert np.array_equal(back["coords"], coords) and np.array_equal(back["posteriors"], post)
    assert np.array_equal(back["label"], labels)


def test_metrics_csv_round_trip(tmp_path):
    rows = [("a", "ari", 0.1 + 0.2), ("b", "sap", -1e-17)]
    io.write_metrics_csv(tmp_path / "m.csv", rows)
    assert io.read_metrics_csv(tmp_path / "m.csv") == rows
