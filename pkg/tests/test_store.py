import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusecap.store import (
    EmbeddingFileError,
    EmbeddingMatrix,
    MatrixValidationError,
    load_embeddings,
    matrix_from_rows,
    normalize_rows,
    write_embeddings,
)


def test_minimal_round_trip_and_layout(tmp_path):
    matrix = matrix_from_rows("m", ["a"], [[0.0, 0.0]])
    path = tmp_path / "one.emb"
    write_embeddings(matrix, path)
    # header: magic(4) + version(4) + dim(4) + count(8) + model_id(2+1) + flags(4)
    # id table: 2+1; payload: 1*2*4 = 8
    assert path.stat().st_size == 4 + 4 + 4 + 8 + 3 + 4 + 3 + 8
    assert load_embeddings(path) == matrix


def test_duplicate_ids_rejected():
    with pytest.raises(MatrixValidationError, match="duplicate id"):
        matrix_from_rows("m", ["a", "a"], [[1.0], [2.0]])


def test_seeded_round_trip_bit_exact(tmp_path, rng):
    rows = rng.normal(size=(100, 3)).astype(np.float32)
    matrix = matrix_from_rows("m", [f"id{i}" for i in range(100)], rows)
    path = tmp_path / "m.emb"
    write_embeddings(matrix, path)
    again = load_embeddings(path)
    assert again.rows.tobytes() == matrix.rows.tobytes()
    assert again == matrix


def test_bad_magic(tmp_path):
    path = tmp_path / "m.emb"
    write_embeddings(matrix_from_rows("m", ["a"], [[1.0]]), path)
    data = bytearray(path.read_bytes())
    data[0:4] = b"NOPE"
    path.write_bytes(bytes(data))
    with pytest.raises(EmbeddingFileError, match="bad magic"):
        load_embeddings(path)


def test_unsupported_version(tmp_path):
    path = tmp_path / "m.emb"
    write_embeddings(matrix_from_rows("m", ["a"], [[1.0]]), path)
    data = bytearray(path.read_bytes())
    data[4:8] = struct.pack("<I", 9)
    path.write_bytes(bytes(data))
    with pytest.raises(EmbeddingFileError, match="unsupported version"):
        load_embeddings(path)


@pytest.mark.parametrize("cut_inside_payload", [1, 7, 39])
def test_truncated_payload(tmp_path, rng, cut_inside_payload):
    matrix = matrix_from_rows("m", [f"i{i}" for i in range(5)], rng.normal(size=(5, 2)))
    path = tmp_path / "m.emb"
    write_embeddings(matrix, path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - cut_inside_payload])
    with pytest.raises(EmbeddingFileError, match="truncated payload"):
        load_embeddings(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "m.emb"
    write_embeddings(matrix_from_rows("m", ["a"], [[1.0, 2.0]]), path)
    path.write_bytes(path.read_bytes() + b"\x00\x00\x00\x00")
    with pytest.raises(EmbeddingFileError, match="trailing bytes"):
        load_embeddings(path)


def test_normalized_flag_round_trip(tmp_path):
    matrix = normalize_rows(matrix_from_rows("m", ["a", "b"], [[3.0, 4.0], [1.0, 0.0]]))
    path = tmp_path / "m.emb"
    write_embeddings(matrix, path)
    again = load_embeddings(path)
    assert again.normalized is True
    assert again == matrix


def test_normalized_flag_with_bad_norms_rejected(tmp_path):
    matrix = matrix_from_rows("mm", ["a"], [[3.0, 4.0]])
    path = tmp_path / "m.emb"
    write_embeddings(matrix, path)
    data = bytearray(path.read_bytes())
    flags_offset = 4 + 4 + 4 + 8 + 2 + len(b"mm")
    data[flags_offset : flags_offset + 4] = struct.pack("<I", 1)
    path.write_bytes(bytes(data))
    with pytest.raises(EmbeddingFileError, match="norm"):
        load_embeddings(path)


def test_non_finite_payload_rejected(tmp_path):
    path = tmp_path / "m.emb"
    write_embeddings(matrix_from_rows("m", ["a"], [[1.0, 2.0]]), path)
    data = bytearray(path.read_bytes())
    data[-4:] = struct.pack("<f", float("nan"))
    path.write_bytes(bytes(data))
    with pytest.raises(EmbeddingFileError, match="non-finite"):
        load_embeddings(path)


def test_non_finite_rows_rejected_on_construction():
    with pytest.raises(MatrixValidationError, match="non-finite"):
        matrix_from_rows("m", ["a"], [[float("inf"), 0.0]])


def test_empty_matrix_round_trip(tmp_path):
    matrix = matrix_from_rows("m", [], [], dim=3)
    path = tmp_path / "empty.emb"
    write_embeddings(matrix, path)
    again = load_embeddings(path)
    assert again.count == 0 and again.dim == 3


def test_normalize_rows_three_four_five():
    out = normalize_rows(matrix_from_rows("m", ["a"], [[3.0, 4.0]]))
    assert np.allclose(out.rows[0], [0.6, 0.8], atol=1e-7)
    assert out.normalized is True


def test_normalize_rows_idempotent(rng):
    matrix = matrix_from_rows("m", [f"i{i}" for i in range(20)], rng.normal(size=(20, 8)))
    once = normalize_rows(matrix)
    twice = normalize_rows(once)
    assert np.max(np.abs(once.rows - twice.rows)) <= 1e-7


def test_normalize_rows_zero_row_names_offender():
    matrix = matrix_from_rows("m", ["ok", "bad"], [[1.0, 2.0], [0.0, 0.0]])
    with pytest.raises(MatrixValidationError, match="zero-norm row: bad"):
        normalize_rows(matrix)


def test_rows_are_immutable():
    matrix = matrix_from_rows("m", ["a"], [[1.0, 2.0]])
    with pytest.raises(ValueError):
        matrix.rows[0, 0] = 5.0


def test_id_count_mismatch_rejected():
    with pytest.raises(MatrixValidationError, match="id table"):
        EmbeddingMatrix(model_id="m", ids=("a",), rows=np.zeros((2, 2), dtype=np.float32))


_ids = st.lists(
    st.text(min_size=1, max_size=12), min_size=1, max_size=8, unique=True
)


@settings(max_examples=40, deadline=None)
@given(ids=_ids, dim=st.integers(min_value=1, max_value=6), data=st.data())
def test_round_trip_identity_property(tmp_path_factory, ids, dim, data):
    finite32 = st.floats(allow_nan=False, allow_infinity=False, width=32)
    values = data.draw(
        st.lists(finite32, min_size=len(ids) * dim, max_size=len(ids) * dim)
    )
    rows = np.array(values, dtype=np.float32).reshape(len(ids), dim)
    matrix = EmbeddingMatrix(model_id="m", ids=tuple(ids), rows=rows)
    path = tmp_path_factory.mktemp("rt") / "m.emb"
    write_embeddings(matrix, path)
    again = load_embeddings(path)
    assert again.ids == matrix.ids
    assert again.rows.tobytes() == matrix.rows.tobytes()
    assert again == matrix
