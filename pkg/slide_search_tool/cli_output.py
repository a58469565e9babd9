import csv
import io
from typing import Any, Dict, List, Sequence

import jsonlines
from colorama import Fore, Style

from slide_search_tool.constants import OutputFormats


class BColors:
    HEADER = Fore.LIGHTMAGENTA_EX
    OKGREEN = Fore.LIGHTGREEN_EX
    FAIL = Fore.LIGHTRED_EX
    ENDC = Style.RESET_ALL
    BOLD = Style.BRIGHT

    @classmethod
    def wrap(cls, start: str, text: str) -> str:
        return f"{start}{text}{cls.ENDC}"


def bold(text: str) -> str:
    return BColors.wrap(BColors.BOLD, text)


def header(text: str) -> str:
    return BColors.wrap(BColors.HEADER, text)


def success(text: str) -> str:
    return BColors.wrap(BColors.OKGREEN, text)


def failed(text: str) -> str:
    return BColors.wrap(BColors.FAIL, text)


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    if value is None:
        return ""
    return str(value)


def table(columns: Sequence[str], rows: Sequence[Sequence[Any]], title: str = "") -> str:
    cells = [[_cell(v) for v in row] for row in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    lines = [header(title)] if title else []
    lines.append(bold("  ".join(c.ljust(w) for c, w in zip(columns, widths))))
    lines.extend("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells)
    return "\n".join(lines)


def csv_text(columns: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    writer.writerows([[repr(v) if isinstance(v, float) else v for v in row] for row in rows])
    return buffer.getvalue().rstrip("\n")


def json_lines(columns: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buffer = io.StringIO()
    records: List[Dict[str, Any]] = [dict(zip(columns, row)) for row in rows]
    with jsonlines.Writer(buffer, sort_keys=False) as writer:
        writer.write_all(records)
    return buffer.getvalue().rstrip("\n")


def render(
    columns: Sequence[str], rows: Sequence[Sequence[Any]], fmt: str, title: str = ""
) -> str:
    if fmt == OutputFormats.CSV:
        return csv_text(columns, rows)
    if fmt == OutputFormats.JSON_LINES:
        return json_lines(columns, rows)
    return table(columns, rows, title)
