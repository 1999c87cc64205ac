# acrkn/utils/csv_io.py

from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, TypeVar

import pandas as pd

from domain.errors import DataError
from utils.formatting import CSV_FLOAT_FORMAT

T = TypeVar("T")


def chunked(items: Sequence[T], size: int) -> Iterable[Sequence[T]]:
    if size < 1:
        raise ValueError(f"chunk size must be >= 1, got {size}")
    for i in range(0, len(items), size):
        yield items[i:i + size]


def read_csv(path: str | Path) -> Tuple[pd.DataFrame, List[str]]:
    """
    Reads a headered CSV as strings and returns (frame, columns_from_header).
    Strips whitespace from headers and values; `line_no` holds the file line of each row.
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except FileNotFoundError as e:
        raise DataError(f"CSV file not found: {path}") from e
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as e:
        raise DataError(f"Cannot parse CSV {path}: {e}") from e

    frame.columns = [str(c).strip() for c in frame.columns]
    columns = [c for c in frame.columns if c and not c.startswith("Unnamed:")]
    if not columns:
        raise DataError(f"CSV {path} has no header row")

    frame = frame[columns].apply(lambda col: col.str.strip())
    # header is line 1
    frame["line_no"] = range(2, len(frame) + 2)
    return frame, columns


def require_columns(columns: Sequence[str], required: Sequence[str], path: str | Path = "") -> None:
    missing = [c for c in required if c not in columns]
    if missing:
        raise DataError(f"CSV {path} missing columns: {missing}. Found: {list(columns)}")


def to_numeric(frame: pd.DataFrame, columns: Sequence[str], integer: bool = False) -> pd.DataFrame:
    """
    Convert columns in place, reporting the first bad cell of each column with its line number.
    Floats go through astype, which is correctly rounded, so `%.17g` text reads back exactly.
    """
    for col in columns:
        if integer:
            values = pd.to_numeric(frame[col], errors="coerce")
            bad = values.isna() | (values.notna() & (values % 1 != 0))
        else:
            try:
                values = frame[col].astype("float64")
                bad = values.isna()
            except ValueError:
                values = pd.to_numeric(frame[col], errors="coerce")
                bad = values.isna()
        if bad.any():
            row = frame.loc[bad.idxmax()]
            raise DataError(f"Line {row['line_no']}: column '{col}' has non-numeric value {row[col]!r}")
        frame[col] = values.astype("int64") if integer else values.astype("float64")
    return frame


def write_csv(frame: pd.DataFrame, path: str | Path, mode: str = "w") -> None:
    """Deterministic CSV output: fixed float format, no index, header only when creating the file."""
    path = Path(path)
    header = mode == "w" or not path.exists()
    frame.to_csv(path, mode=mode, header=header, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
