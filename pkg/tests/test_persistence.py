"""Tests for atomic output files and the distance ledger."""

import hashlib
import json
import math
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest

from lorentz_lab import persistence
from lorentz_lab.persistence import (
    LEDGER_COLUMNS,
    Ledger,
    LedgerRow,
    atomic_write_text,
    read_csv,
    sha256_file,
    write_csv,
    write_json,
)


class TestAtomicWrite:
    def test_creates_parent_directories(self, tmp_path: Path) -> None:
        target = tmp_path / "a" / "b" / "out.txt"
        atomic_write_text(target, "hello")
        assert target.read_text() == "hello"

    def test_replaces_existing(self, tmp_path: Path) -> None:
        target = tmp_path / "out.txt"
        target.write_text("old")
        atomic_write_text(target, "new")
        assert target.read_text() == "new"

    def test_failed_rename_leaves_no_temp_file(self, tmp_path: Path) -> None:
        target = tmp_path / "out.txt"
        with patch.object(persistence.os, "replace", side_effect=OSError("disk full")):
            with pytest.raises(OSError, match="disk full"):
                atomic_write_text(target, "data")
        assert list(tmp_path.iterdir()) == []


class TestJson:
    def test_numpy_values_and_non_finite(self, tmp_path: Path) -> None:
        target = tmp_path / "summary.json"
        write_json(
            target,
            {
                "b": np.float64(1.5),
                "a": np.arange(3),
                "flag": np.bool_(True),
                "count": np.int64(7),
                "bad": math.inf,
                "nested": {"x": (1.0, math.nan)},
            },
        )
        text = target.read_text()
        assert text.endswith("\n")
        payload = json.loads(text)
        assert payload == {
            "a": [0, 1, 2],
            "b": 1.5,
            "bad": "inf",
            "count": 7,
            "flag": True,
            "nested": {"x": [1.0, "nan"]},
        }
        assert list(payload) == sorted(payload)

    def test_byte_identical_rewrites(self, tmp_path: Path) -> None:
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        payload = {"z": 0.1 + 0.2, "y": [1, 2]}
        write_json(a, payload)
        write_json(b, dict(reversed(list(payload.items()))))
        assert sha256_file(a) == sha256_file(b)


class TestCsv:
    def test_roundtrip_rows(self, tmp_path: Path) -> None:
        target = tmp_path / "t.csv"
        write_csv(target, ["x", "y"], [[1, "a"], [2, "b,c"]])
        assert read_csv(target) == [{"x": "1", "y": "a"}, {"x": "2", "y": "b,c"}]
        assert target.read_text().startswith("x,y\n")

    def test_sha256(self, tmp_path: Path) -> None:
        target = tmp_path / "t.txt"
        target.write_bytes(b"lorentz")
        assert sha256_file(target) == hashlib.sha256(b"lorentz").hexdigest()


class TestLedger:
    def _row(self, metric: str, n: float, value: float) -> LedgerRow:
        return LedgerRow(metric, "surrogate_iid", 2, 0.5, n, value, 0.01, 0)

    def test_columns(self) -> None:
        assert LEDGER_COLUMNS == (
            "metric", "backend", "d", "gamma", "n_or_t", "value", "stderr", "seed"
        )

    def test_row_formatting(self) -> None:
        assert self._row("w1_1d", 100.0, 0.1).as_list() == [
            "w1_1d", "surrogate_iid", "2", "0.5", "100.0", "0.1", "0.01", "0"
        ]

    def test_write_in_insertion_order(self, tmp_path: Path) -> None:
        ledger = Ledger()
        ledger.append(self._row("w1_1d", 1000.0, 0.2))
        ledger.extend([self._row("w1_1d", 100.0, 0.3), self._row("ks_orthant", 100.0, 0.1)])
        assert len(ledger) == 3
        target = tmp_path / "ledger.csv"
        ledger.write(target)
        rows = Ledger.load(target)
        assert [r["n_or_t"] for r in rows] == ["1000.0", "100.0", "100.0"]
        assert rows[2]["metric"] == "ks_orthant"
        assert float(rows[0]["value"]) == 0.2
