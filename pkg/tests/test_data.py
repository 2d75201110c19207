import numpy as np
import pytest

from projres.data import hash_token, labels_from_tokens, synthetic_dataset, text_file_dataset
from projres.exceptions import ValidationError


def test_synthetic_shape_and_determinism():
    a = synthetic_dataset(50, 100, 3, 2, 5, seed=4)
    b = synthetic_dataset(50, 100, 3, 2, 5, seed=4)
    assert a.sequences == b.sequences and np.array_equal(a.labels, b.labels)
    assert len(a) == 50
    assert all(2 <= len(s) <= 5 for s in a.sequences)
    assert all(1 <= t < 100 for s in a.sequences for t in s)
    assert set(a.labels.tolist()) <= {0, 1, 2}


def test_labels_are_a_token_function():
    ds = synthetic_dataset(200, 64, 2, 1, 3, seed=0)
    again = labels_from_tokens(ds.sequences, 64, 2, 0)
    np.testing.assert_array_equal(ds.labels, again)
    # both classes occur
    assert 0 < ds.labels.mean() < 1


def test_padded_tokens():
    ds = synthetic_dataset(10, 20, seed=0)
    ids = [0, 1, 2]
    assert ds.padded_tokens(ids) == 3 * max(len(ds.sequences[i]) for i in ids)
    assert ds.padded_tokens([]) == 0


def test_invalid_synthetic():
    with pytest.raises(ValidationError):
        synthetic_dataset(0, 10)
    with pytest.raises(ValidationError):
        synthetic_dataset(5, 10, min_len=3, max_len=2)


def test_hash_token_range_and_stability():
    ids = {hash_token(w, 50) for w in ["a", "b", "hello", "world", ""]}
    assert all(1 <= i < 50 for i in ids)
    assert hash_token("word", 50) == hash_token("word", 50)


def test_text_file(tmp_path):
    f = tmp_path / "d.txt"
    f.write_text("1\tgood movie\n\nbad film here\n0\tmeh\n", encoding="utf-8")
    ds = text_file_dataset(f, 100, 2, max_len=2)
    assert len(ds) == 3
    assert ds.labels[0] == 1 and ds.labels[2] == 0
    assert len(ds.sequences[1]) == 2


def test_text_file_errors(tmp_path):
    f = tmp_path / "d.txt"
    f.write_text("\n\n", encoding="utf-8")
    with pytest.raises(ValidationError):
        text_file_dataset(f, 100)
    f.write_text("5\tfoo\n", encoding="utf-8")
    with pytest.raises(ValidationError):
        text_file_dataset(f, 100, 2)
