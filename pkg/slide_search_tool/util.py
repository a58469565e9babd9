import csv
import logging
import os
from typing import Any, Dict, Generator, Iterable, List, Sequence

from slide_search_tool.errors import DataError, UsageError


def parse_key_values(lines: Iterable[str], source: str = "<config>") -> Dict[str, str]:
    """Parses KEY=VALUE lines; '#' starts a comment, blank lines are skipped."""
    parsed: Dict[str, str] = {}
    for line_number, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        split = line.split("=", 1)
        if len(split) != 2 or split[0].strip() == "" or split[1].strip() == "":
            raise UsageError(f"{source}:{line_number}: expected KEY=VALUE, got {raw.strip()!r}")
        key = split[0].strip().lower().replace("-", "_")
        if key in parsed:
            logging.warning("%s:%d: duplicate key %s, last value wins", source, line_number, key)
        parsed[key] = split[1].strip()
    return parsed


def read_key_value_file(path: str) -> Dict[str, str]:
    try:
        with open(path, "r", encoding="utf-8") as config_file:
            return parse_key_values(config_file, source=path)
    except FileNotFoundError as err:
        raise UsageError(f"config file not found: {path}") from err


def chunk_list(lst: Sequence[Any], limit: int) -> Generator[Sequence[Any], None, None]:
    """Yield successive limit-sized chunks from lst."""
    for i in range(0, len(lst), limit):
        yield lst[i : i + limit]


def read_csv_dicts(path: str, required: Sequence[str]) -> List[Dict[str, str]]:
    try:
        with open(path, "r", encoding="utf-8", newline="") as csv_file:
            reader = csv.DictReader(csv_file)
            missing = [name for name in required if name not in (reader.fieldnames or [])]
            if missing:
                raise DataError(f"{path}: missing CSV columns {missing}")
            return list(reader)
    except FileNotFoundError as err:
        raise DataError(f"file not found: {path}") from err


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as csv_file:
        writer = csv.writer(csv_file, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def allowed_char(char: str) -> bool:
    """Return true if the character is safe to keep in a file name."""
    return char.isalnum() or char in {"-", ".", "_"}


def id_to_path(directory: str, object_id: str, suffix: str) -> str:
    """File path where the object with the given id is stored"""
    safe_id = "".join(x if allowed_char(x) else "_" for x in object_id)
    return os.path.join(directory, safe_id + suffix)
