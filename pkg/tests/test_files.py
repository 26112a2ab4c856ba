import pytest

from coelab.files import atomic_write_bytes, ensure_directory, read_corpus_bytes


def test_ensure_directory_creates_parents(tmp_path):
    target = tmp_path / "runs" / "a" / "b"
    assert ensure_directory(target) == target
    assert target.is_dir()
    ensure_directory(target)


def test_ensure_directory_rejects_file(tmp_path):
    path = tmp_path / "file.txt"
    path.write_text("x")
    with pytest.raises(NotADirectoryError):
        ensure_directory(path)


def test_atomic_write_leaves_no_staging_file(tmp_path):
    path = tmp_path / "blob.bin"
    atomic_write_bytes(path, b"first")
    atomic_write_bytes(path, b"second")
    assert path.read_bytes() == b"second"
    assert [p.name for p in tmp_path.iterdir()] == ["blob.bin"]


def test_read_corpus_bytes(tmp_path):
    path = tmp_path / "corpus.txt"
    path.write_bytes(b"\x00\xffabc")
    assert read_corpus_bytes(path) == b"\x00\xffabc"
    with pytest.raises(FileNotFoundError):
        read_corpus_bytes(tmp_path / "absent.txt")
