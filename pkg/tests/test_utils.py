"""Tests for artifact I/O helpers."""

import numpy as np
import pytest

from pyphantomrl.exceptions import OutputLockedError
from pyphantomrl.utils import (
    append_csv_row,
    atomic_write_text,
    output_lock,
    read_csv,
    read_pgm,
    write_csv,
    write_pgm,
)


def test_atomic_write_replaces_and_leaves_no_temp(tmp_path):
    path = tmp_path / "nested" / "file.txt"
    atomic_write_text(path, "one")
    atomic_write_text(path, "two")
    assert path.read_text() == "two"
    assert [p.name for p in path.parent.iterdir()] == ["file.txt"]


def test_csv_append(tmp_path):
    path = tmp_path / "log.csv"
    append_csv_row(path, ["a", "b"], ["1", "x"])
    inode = path.stat().st_ino
    append_csv_row(path, ["a", "b"], ["2", "y"])
    assert path.stat().st_ino == inode
    assert path.read_text() == "a,b\n1,x\n2,y\n"
    assert read_csv(path) == [{"a": "1", "b": "x"}, {"a": "2", "b": "y"}]
    write_csv(path, ["a"], [["3"]])
    assert read_csv(path) == [{"a": "3"}]


def test_pgm_quantises_to_8_bit(tmp_path):
    image = np.linspace(0.0, 1.0, 64, dtype=np.float32).reshape(8, 8)
    path = write_pgm(tmp_path / "img.pgm", image)
    assert path.read_bytes().startswith(b"P5")
    back = read_pgm(path)
    assert back.shape == (8, 8)
    assert np.abs(back - image).max() <= 0.5 / 255.0 + 1e-7


def test_output_lock(tmp_path):
    with output_lock(tmp_path / "run") as lock:
        assert lock.exists()
        with pytest.raises(OutputLockedError) as info:
            with output_lock(tmp_path / "run"):
                pass
        assert info.value.exit_code == 7
    assert not lock.exists()
