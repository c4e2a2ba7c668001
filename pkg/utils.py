import os
import json
import tempfile
from typing import Any, Dict, Iterator, List


class SSPError(Exception):
    """Base error; the cli exits with exit_code after printing the message."""

    def __init__(self, message: str, exit_code: int = 2):
        super().__init__(message)
        self.exit_code = exit_code


class DataFormatError(SSPError):
    pass


# Converts string v to a bool
def str2bool(v: str) -> bool:
    return v.lower() in ("yes", "true", "t", "1")

def is_readable_file(file_path: str) -> bool:
   return False if \
       (file_path is None) or \
           (len(file_path) == 0) or \
               (os.path.isfile(file_path) is False) or \
                   (os.access(file_path, os.R_OK) is False) \
        else True

# Yields (line_number, dict) for every non-blank line of a JSON-lines file.
# Raises DataFormatError naming the line when a line is not a JSON object.
def iter_jsonl(path: str) -> Iterator[Any]:
    if not is_readable_file(path):
        raise DataFormatError(f"cannot read {path}")
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise DataFormatError(f"{path}:{line_number}: invalid JSON ({err.msg})")
            if not isinstance(record, dict):
                raise DataFormatError(f"{path}:{line_number}: expected a JSON object")
            yield line_number, record

# Serializes records with sorted keys so identical inputs give identical bytes
def write_jsonl(path: str, records: List[Dict[str, Any]]) -> str:
    text = "".join(json.dumps(record, sort_keys=True) + "\n" for record in records)
    return atomic_write_text(path, text)

# Writes text to path through a temp file in the same directory and a rename
def atomic_write_text(path: str, text: str) -> str:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    return path

def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


################################################
# Tests
################################################

def test_str2bool():
    assert str2bool('') is False, "ERROR: empty string failure"
    assert str2bool('0') is False, "ERROR: zero string failure"
    assert str2bool('1') is True, "ERROR: 1 string failure"
    assert str2bool('TrUe') is True, "ERROR: TrUe string failure"
    assert str2bool('yes') is True, "ERROR: yes string failure"
    assert str2bool('y') is False, "ERROR: y string failure"
    assert str2bool('F') is False, "ERROR: F string failure"

def test_jsonl_round_trip():
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "records.jsonl")
        records = [{"b": 1, "a": "x"}, {"a": "y", "b": 2}]
        write_jsonl(path, records)
        assert [record for _, record in iter_jsonl(path)] == records, "ERROR: jsonl round trip"
        with open(path, "r", encoding="utf-8") as f:
            assert f.readline() == '{"a": "x", "b": 1}\n', "ERROR: keys not sorted"

def test_jsonl_bad_line():
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "bad.jsonl")
        atomic_write_text(path, '{"a": 1}\n\nnot json\n')
        try:
            list(iter_jsonl(path))
            assert False, "ERROR: malformed line accepted"
        except DataFormatError as err:
            assert ":3:" in str(err), f"ERROR: line number missing in {err}"
            assert err.exit_code == 2, "ERROR: exit code"

def tests():
    test_str2bool()
    test_jsonl_round_trip()
    test_jsonl_bad_line()
    print("all tests passed in", os.path.basename(__file__))


def main():
    tests()

if __name__ == "__main__":
    main()
