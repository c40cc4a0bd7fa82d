import numpy as np
import pytest

from tensor_checkpoint import (
    MAGIC,
    CheckpointError,
    decode_checkpoint,
    encode_checkpoint,
    file_digest,
    load_checkpoint,
    save_checkpoint,
)


def _tensors():
    return {
        "stem.weight": np.arange(24, dtype=np.float32).reshape(2, 3, 4),
        "stem.bias": np.array([0.5, -1.25], dtype=np.float32),
    }


def test_header_layout():
    blob = encode_checkpoint(_tensors(), {"arch": "conv3d"})
    header = blob.split(b"\nend\n", 1)[0].decode("ascii").split("\n")
    assert header == [
        MAGIC,
        "tag arch conv3d",
        "tensor stem.weight 2x3x4 0 96",
        "tensor stem.bias 2 96 8",
    ]
    assert len(blob.split(b"\nend\n", 1)[1]) == 104


def test_decode_restores_values_and_tags():
    tensors, tags = decode_checkpoint(encode_checkpoint(_tensors(), {"role": "backbone", "note": "two words"}))
    assert list(tensors) == ["stem.weight", "stem.bias"]
    np.testing.assert_array_equal(tensors["stem.weight"], _tensors()["stem.weight"])
    assert tensors["stem.bias"].dtype == np.float32
    assert tags == {"role": "backbone", "note": "two words"}


def test_encoding_is_byte_stable():
    assert encode_checkpoint(_tensors()) == encode_checkpoint(_tensors())


def test_save_returns_file_digest(tmp_path):
    path = tmp_path / "nested" / "model.ckpt"
    digest = save_checkpoint(path, _tensors())
    assert digest == file_digest(path)
    tensors, _ = load_checkpoint(path)
    np.testing.assert_array_equal(tensors["stem.bias"], [0.5, -1.25])
    assert not [p for p in path.parent.iterdir() if p.name.startswith(".")]


@pytest.mark.parametrize("name", ["has space", "new\nline", ""])
def test_invalid_tensor_names_rejected(name):
    with pytest.raises(CheckpointError):
        encode_checkpoint({name: np.ones(2)})


def test_tag_with_newline_rejected():
    with pytest.raises(CheckpointError, match="tag"):
        encode_checkpoint(_tensors(), {"note": "a\nb"})


def test_empty_tensor_rejected():
    with pytest.raises(CheckpointError, match="positive dimension"):
        encode_checkpoint({"w": np.zeros((0, 3))})


def test_bad_magic_rejected():
    blob = encode_checkpoint(_tensors()).replace(MAGIC.encode("ascii"), b"SOMETHING-ELSE 1", 1)
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(blob)


def test_truncated_payload_rejected():
    blob = encode_checkpoint(_tensors())
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(blob[:-4])


def test_trailing_bytes_rejected():
    with pytest.raises(CheckpointError, match="trailing"):
        decode_checkpoint(encode_checkpoint(_tensors()) + b"\x00\x00\x00\x00")


def test_missing_end_rejected():
    with pytest.raises(CheckpointError, match="end"):
        decode_checkpoint(MAGIC.encode("ascii") + b"\ntensor w 1 0 4\n")


def test_load_missing_file_names_path(tmp_path):
    with pytest.raises(CheckpointError, match="absent.ckpt"):
        load_checkpoint(tmp_path / "absent.ckpt")
