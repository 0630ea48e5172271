import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mlorq.compressed import CompressedLayer
from mlorq.exceptions import (
    BadMagic,
    BrokenChain,
    DuplicateName,
    MissingTensor,
    ShapeMismatch,
    TruncatedBuffer,
    UnsupportedVersion,
)
from mlorq.inter_search import AllocationSolution
from mlorq.intra_search import LOWRANK, QUANT, Candidate
from mlorq.model_store import (
    TensorContainer,
    container_bytes,
    load_compressed,
    load_model,
    load_sequential,
    parse_container,
    read_container,
    save_solution,
    write_container,
)
from mlorq.quantizer import percentile_params, quantize_codes, quantize_uniform


def test_roundtrip_3x2(tmp_path):
    arr = np.arange(6, dtype=np.float32).reshape(3, 2) / 7
    tc = TensorContainer([("w", arr)])
    write_container(tc, tmp_path / "a.mlrq")
    back = read_container(tmp_path / "a.mlrq")
    assert back.names() == ["w"]
    assert back["w"].tobytes() == arr.tobytes()
    assert back["w"].shape == (3, 2)


def test_bad_magic():
    with pytest.raises(BadMagic):
        parse_container(b"XXXX" + b"\0" * 8)


def test_unsupported_version():
    with pytest.raises(UnsupportedVersion):
        parse_container(b"MLRQ" + struct.pack("<II", 7, 0))


def test_truncated_buffer():
    data = b"MLRQ" + struct.pack("<II", 1, 1)
    data += struct.pack("<H", 1) + b"w" + struct.pack("<BB", 1, 2) + struct.pack("<2Q", 4, 4)
    data += np.zeros(15, dtype="<f4").tobytes()
    with pytest.raises(TruncatedBuffer):
        parse_container(data)


def test_duplicate_in_file():
    one = struct.pack("<H", 1) + b"a" + struct.pack("<BB", 2, 1) + struct.pack("<Q", 1) + b"\1\0\0\0"
    with pytest.raises(DuplicateName):
        parse_container(b"MLRQ" + struct.pack("<II", 1, 2) + one + one)


def test_empty_container(tmp_path):
    write_container(TensorContainer(), tmp_path / "e.mlrq")
    raw = (tmp_path / "e.mlrq").read_bytes()
    assert raw == b"MLRQ" + struct.pack("<II", 1, 0)
    assert len(read_container(tmp_path / "e.mlrq")) == 0


def test_deterministic_bytes(tmp_path):
    tc = TensorContainer([("b", np.ones((2, 2), np.float32)), ("a", np.arange(3, dtype=np.int32))])
    write_container(tc, tmp_path / "1.mlrq")
    write_container(tc, tmp_path / "2.mlrq")
    assert (tmp_path / "1.mlrq").read_bytes() == (tmp_path / "2.mlrq").read_bytes()
    # insertion order is preserved
    assert read_container(tmp_path / "1.mlrq").names() == ["b", "a"]


def test_duplicate_rejected_before_write(tmp_path):
    tc = TensorContainer([("a", np.zeros(1)), ("a", np.ones(1))])
    with pytest.raises(DuplicateName):
        write_container(tc, tmp_path / "d.mlrq")
    assert not (tmp_path / "d.mlrq").exists()
    with pytest.raises(DuplicateName):
        TensorContainer([("a", np.zeros(1))]).add("a", np.zeros(1))


names = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=12)
arrays = st.one_of(
    hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
               elements=st.floats(width=32, allow_nan=False)),
    hnp.arrays(np.int32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4)),
)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(names, arrays), max_size=5, unique_by=lambda t: t[0]))
def test_roundtrip_property(entries):
    tc = TensorContainer(entries)
    assert parse_container(container_bytes(tc)) == tc


def test_load_model_chain(model_dir):
    manifest, tensors = load_model(model_dir)
    assert [s.name for s in manifest.layers] == ["fc0", "fc1"]
    assert tensors["fc0.weight"].shape == (3, 4)
    model, calib, _ = load_sequential(model_dir)
    assert model.layers[1].n_out == 2 and calib.shape == (16, 4)


def _edit_manifest(path, fn):
    doc = json.loads(path.read_text())
    fn(doc)
    path.write_text(json.dumps(doc))


def test_broken_chain(model_dir):
    _edit_manifest(model_dir, lambda d: d["layers"][1].update(in_features=5))
    with pytest.raises(BrokenChain):
        load_model(model_dir)


def test_hessian_shape_mismatch(model_dir):
    tc = read_container(model_dir.parent / "model.mlrq")
    tc.add("bad_h", np.ones((2, 2), np.float32))
    write_container(tc, model_dir.parent / "model.mlrq")
    _edit_manifest(model_dir, lambda d: d["hessians"].update(fc0="bad_h"))
    with pytest.raises(ShapeMismatch):
        load_model(model_dir)


def test_missing_tensor(model_dir):
    _edit_manifest(model_dir, lambda d: d["layers"][0].update(weight="nope"))
    with pytest.raises(MissingTensor):
        load_model(model_dir)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=3, max_size=5), st.data())
def test_fuzzed_chain_rejected(tmp_path_factory, dims, data):
    """Manifests whose declared features break the chain never load."""
    tmp = tmp_path_factory.mktemp("fuzz")
    tc = TensorContainer()
    layers = []
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        tc.add(f"w{i}", np.zeros((b, a), np.float32))
        layers.append({"name": f"l{i}", "in_features": a, "out_features": b, "weight": f"w{i}"})
    tc.add("x", np.zeros((2, dims[0]), np.float32))
    write_container(tc, tmp / "model.mlrq")
    k = data.draw(st.integers(1, len(layers) - 1))
    bad = data.draw(st.integers(1, 6).filter(lambda v: v != layers[k - 1]["out_features"]))
    layers[k]["in_features"] = bad
    (tmp / "m.json").write_text(json.dumps({"layers": layers, "calibration_inputs": "x"}))
    with pytest.raises((BrokenChain, ShapeMismatch)):
        load_model(tmp / "m.json")


def _solution(cands):
    return AllocationSolution([0] * len(cands), cands, sum(c.memory_bits for c in cands), 0.0,
                              10**9)


def test_save_all_8bit(tmp_path, rng):
    W = rng.standard_normal((3, 4))
    p = percentile_params(W, 1.0, 8)
    cand = Candidate(QUANT, 0.0, 96, bits_w=8, params=(p,))
    layers = [CompressedLayer("fc0", QUANT, (quantize_codes(W, p),), (p,))]
    save_solution(_solution([cand]), layers, tmp_path)
    lines = (tmp_path / "solution.txt").read_text().splitlines()
    row = lines[2].split("\t")
    assert row[:6] == ["fc0", "quant", "-", "8", "-", "-"]


def test_save_lowrank_roundtrip(tmp_path, rng):
    A = rng.standard_normal((4, 2))
    B = rng.standard_normal((2, 6))
    pa, pb = percentile_params(A, 1.0, 4), percentile_params(B, 1.0, 2)
    cand = Candidate(LOWRANK, 0.1, 56, rank=2, bits_a=4, bits_b=2, params=(pa, pb))
    W_hat = quantize_uniform(A, pa) @ quantize_uniform(B, pb)
    layer = CompressedLayer("fc0", LOWRANK, (quantize_codes(A, pa), quantize_codes(B, pb)), (pa, pb))
    save_solution(_solution([cand]), [layer], tmp_path)
    row = (tmp_path / "solution.txt").read_text().splitlines()[2].split("\t")
    assert row[:7] == ["fc0", "lowrank", "2", "-", "4", "2", "56"]
    back, act, summary = load_compressed(tmp_path)
    assert act == {}
    np.testing.assert_array_equal(back[0].dense_weight(), W_hat)
    assert back[0].memory_bits == 56
