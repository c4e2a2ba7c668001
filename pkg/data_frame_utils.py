import os
import tempfile
import pandas as pd
from typing import Optional
from utils import is_readable_file, ensure_dir
from constants import *

# Returns True if df is None or has zero rows
def is_empty_data_frame(df: pd.DataFrame) -> bool:
    return True if df is None or len(df) == 0 else False

# Returns the file format implied by the extension of data_file
def get_data_frame_format(data_file: str) -> str:
    if data_file.endswith(PARQUET_FORMAT):
        return PARQUET_FORMAT
    return CSV_FORMAT

# Saves the data_frame without its index to data_file, using the
# file extension (CSV_FORMAT | PARQUET_FORMAT) to choose the format.
# Floats are written with full precision so reruns compare byte-for-byte.
def save_data_frame(data_file: str, df: pd.DataFrame) -> str:
    ensure_dir(os.path.dirname(os.path.abspath(data_file)))
    if get_data_frame_format(data_file) == PARQUET_FORMAT:
        df.reset_index(drop=True).to_parquet(data_file, engine="pyarrow", index=False)
    else:
        df.to_csv(data_file, index=False, float_format="%.17g")
    return data_file

# Loads the data_frame saved by save_data_frame or None if the given
# data_file is not found or is not readable
def load_data_frame(data_file: str) -> Optional[pd.DataFrame]:
    if not is_readable_file(data_file):
        return None
    if get_data_frame_format(data_file) == PARQUET_FORMAT:
        df = pd.read_parquet(data_file, engine="pyarrow")
    else:
        df = pd.read_csv(data_file)
    if "Unnamed: 0" in df.columns:
        df = df.drop(columns=['Unnamed: 0'])
    return df


################################################
# Tests
################################################

def test_save_load_csv():
    saved_df = pd.DataFrame({"step": [1, 2], "l_final": [0.1, 1.0 / 3.0]})
    with tempfile.TemporaryDirectory() as tmp:
        data_file = save_data_frame(os.path.join(tmp, f"metrics.{CSV_FORMAT}"), saved_df)
        loaded_df = load_data_frame(data_file)
    assert loaded_df["l_final"].tolist() == saved_df["l_final"].tolist(), "ERROR: csv float precision lost"
    assert list(loaded_df.columns) == ["step", "l_final"], f"ERROR: columns {list(loaded_df.columns)}"

def test_save_load_parquet_lists():
    saved_df = pd.DataFrame({"token_ids": [[0, 5, 1], [0, 1]], "k": [1, 2]})
    with tempfile.TemporaryDirectory() as tmp:
        data_file = save_data_frame(os.path.join(tmp, f"cache.{PARQUET_FORMAT}"), saved_df)
        loaded_df = load_data_frame(data_file)
    assert [list(x) for x in loaded_df["token_ids"]] == [[0, 5, 1], [0, 1]], "ERROR: list column"
    assert len(loaded_df) == 2, "ERROR: row count"

def test_missing_file():
    assert load_data_frame("/nonexistent/file.csv") is None, "ERROR: missing file must give None"
    assert is_empty_data_frame(None), "ERROR: None is empty"

def tests():
    test_save_load_csv()
    test_save_load_parquet_lists()
    test_missing_file()
    print("all tests passed in", os.path.basename(__file__))


def main():
    tests()

if __name__ == "__main__":
    main()
