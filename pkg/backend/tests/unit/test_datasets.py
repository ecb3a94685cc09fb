"""
Unit tests for design-matrix ingestion.
"""

import numpy as np
import pytest

from app.services.datasets import load_dataset, standardize_columns
from app.services.errors import DatasetError


class TestLoadDataset:
    """Tests for CSV loading."""

    @pytest.mark.unit
    def test_basic_load(self, logistic_csv):
        """The last column is the response, the rest are features."""
        data = load_dataset(logistic_csv)
        assert data.n == 6
        assert data.p == 2
        assert data.feature_names == ["age", "dose"]
        np.testing.assert_array_equal(data.y, [0, 1, 0, 1, 1, 0])
        assert data.groups is None

    @pytest.mark.unit
    def test_add_intercept(self, logistic_csv):
        """add_intercept prepends a column of ones."""
        data = load_dataset(logistic_csv, add_intercept=True)
        assert data.feature_names[0] == "intercept"
        np.testing.assert_array_equal(data.X[:, 0], 1.0)

    @pytest.mark.unit
    def test_standardize(self, logistic_csv):
        """Standardised columns have mean 0 and sd 1; the intercept stays at one."""
        data = load_dataset(logistic_csv, add_intercept=True, standardize=True)
        np.testing.assert_allclose(data.X[:, 1:].mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(data.X[:, 1:].std(axis=0), 1.0, rtol=1e-12)
        np.testing.assert_array_equal(data.X[:, 0], 1.0)
        assert set(data.standardization) == {"age", "dose"}

    @pytest.mark.unit
    def test_subject_column(self, mixed_csv):
        """Subject labels become zero-based group indices and leave X."""
        data = load_dataset(mixed_csv, subject_column="subject")
        assert data.feature_names == ["x"]
        assert sorted(set(data.groups.tolist())) == [0, 1, 2]
        assert data.groups[0] == 0 and data.groups[1] == 1

    @pytest.mark.unit
    def test_missing_file(self, tmp_path):
        """A missing path should raise DatasetError."""
        with pytest.raises(DatasetError, match="not found"):
            load_dataset(tmp_path / "nope.csv")

    @pytest.mark.unit
    @pytest.mark.parametrize("body,message", [
        ("", "empty"),
        ("x,y\n", "no data rows"),
        ("x,y\n1.0,0\nabc,1\n", "non-numeric"),
        ("x,y\n1.0,0\n2.0,3\n", "must be 0/1"),
        ("x,y\n1.0,0\n2.0\n", "cells"),
        ("x,y\n1.0,0\nnan,1\n", "non-finite"),
        ("y\n1\n", "at least one feature"),
    ])
    def test_contract_violations(self, tmp_path, body, message):
        """Malformed files should fail with a specific message."""
        path = tmp_path / "bad.csv"
        path.write_text(body)
        with pytest.raises(DatasetError, match=message):
            load_dataset(path)

    @pytest.mark.unit
    def test_unknown_subject_column(self, logistic_csv):
        """A subject column that is not in the header should be rejected."""
        with pytest.raises(DatasetError, match="not in header"):
            load_dataset(logistic_csv, subject_column="patient")

    @pytest.mark.unit
    def test_non_integer_subject(self, tmp_path):
        """Subject labels must be integers."""
        path = tmp_path / "grouped.csv"
        path.write_text("subject,x,y\n1.5,0.1,0\n2,0.2,1\n")
        with pytest.raises(DatasetError, match="integer"):
            load_dataset(path, subject_column="subject")


class TestStandardize:
    """Tests for column standardisation."""

    @pytest.mark.unit
    def test_constant_column_untouched(self):
        """Zero-variance columns are skipped and not recorded."""
        X = np.array([[1.0, 2.0], [1.0, 4.0], [1.0, 6.0]])
        out, record = standardize_columns(X, ["c", "x"])
        np.testing.assert_array_equal(out[:, 0], 1.0)
        assert "c" not in record
        assert record["x"]["mean"] == pytest.approx(4.0)
