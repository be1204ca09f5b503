"""Common utilities and constants for prime_traffic."""

import dataclasses
import gzip
import json
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, BinaryIO, Iterable, Iterator

import numpy as np
import polars as pl
import xlsxwriter

from .errors import ConfigError, PcapError, PrimeError, UnsupportedFormatError

APP_NAME = "prime_traffic"

# Environment variable overriding the default output root
OUTPUT_ROOT_ENV = "PRIME_TRAFFIC_OUTPUT"
DEFAULT_OUTPUT_ROOT = "runs"

# Feature geometry
DEFAULT_N_B = 784
DEFAULT_N_P = 32
HDR_FIELDS = 4

# Header-feature normalizers
PAYLOAD_LEN_SCALE = 1460.0
TCP_WINDOW_SCALE = 65535.0
IAT_CLIP_SECONDS = 10.0

DEFAULT_IDLE_TIMEOUT = 60.0

# Singular values at or below this are discarded by effective_rank
SINGULAR_EPS = 1e-5

# Supported table output formats (value is the CSV separator, if any)
SUPPORTED_FORMATS = {
    "csv": ",",
    "tsv": "\t",
    "parquet": None,
    "json": None,
    "ndjson": None,
    "jsonl": None,
    "xlsx": None,
}

# Format versions written into every artifact for provenance
DATASET_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1
RUN_FORMAT_VERSION = 1


def format_float(value: float, precision: int = 3) -> str:
    """Format a float value, keeping integers without decimal point.

    Args:
        value: The float value to format.
        precision: The number of decimal places to display. Defaults to 3.

    Returns:
        The formatted float as a string.
    """
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return "-"
    if (value_int := int(value)) == value:
        return str(value_int)
    return f"{value:.{precision}f}"


def format_mean_range(mean: float, half_range: float, precision: int = 3) -> str:
    """Render a `mean ± half-range` cell."""
    return f"{mean:.{precision}f} ± {half_range:.{precision}f}"


def get_config_dir() -> Path:
    """Return the platform-appropriate config directory for the app.

    Returns:
        Path to the config directory (e.g. ~/.config/prime_traffic on Linux).
    """
    if sys.platform == "win32":
        config_base = Path(os.environ.get("LOCALAPPDATA", Path.home() / "AppData" / "Local"))
    elif sys.platform == "darwin":
        config_base = Path.home() / "Library" / "Application Support"
    else:
        config_base = Path(os.environ.get("XDG_CONFIG_HOME", Path.home() / ".config"))
    return config_base / APP_NAME


def get_output_root(out: str | Path | None = None) -> Path:
    """Resolve the output root: explicit flag, then environment variable, then `./runs`."""
    if out:
        return Path(out)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))


def guess_file_format(filename: str | Path) -> str | None:
    """Guess the table format based on the filename extension.

    Args:
        filename: The name of the file to guess the format for.

    Returns:
        The format (e.g. 'csv', 'xlsx') or None if it is not supported.
    """
    if not isinstance(filename, (str, Path)):
        return None

    fmt = Path(filename).suffix.lower().removeprefix(".")
    return fmt if fmt in SUPPORTED_FORMATS else None


@contextmanager
def zopen(source: str | Path) -> Iterator[BinaryIO]:
    """Context manager to open files for binary reading, including gzip compressed files.

    Args:
        source: The file path.

    Yields:
        A binary file-like object for the opened source.
    """
    filepath = Path(source)
    if filepath.suffix.lower() == ".gz":
        with gzip.open(filepath, "rb") as f:
            yield f
    else:
        with open(filepath, "rb") as f:
            yield f


def to_jsonable(obj: Any) -> Any:
    """Convert dataclasses, enums, paths and numpy values into JSON-serializable objects."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_json(path: str | Path, obj: Any) -> None:
    """Write an object as indented JSON."""
    Path(path).write_text(json.dumps(to_jsonable(obj), indent=2, sort_keys=False) + "\n", encoding="utf-8")


def read_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


class JsonlWriter:
    """Append-only writer for one-object-per-line JSON logs."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._fh = self.path.open("a", encoding="utf-8")

    def write(self, record: Any) -> None:
        self._fh.write(json.dumps(to_jsonable(record), sort_keys=False) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "JsonlWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


@dataclass
class Table:
    """A named table to be written to disk.

    Attributes:
        df: The table content.
        name: Sheet name (xlsx) or file stem suffix for other formats.
    """

    df: pl.DataFrame
    name: str


def write_tables(tables: Iterable[Table], filename: str | Path) -> list[Path]:
    """Write one or more tables in the format inferred from `filename`.

    Only xlsx holds several tables in one file (one sheet per table). For the other
    formats the first table is written to `filename` and every further table to
    `<stem>_<name><suffix>` next to it.

    Args:
        tables: Tables to write.
        filename: Output path; the extension selects the format.

    Returns:
        The paths that were written.

    Raises:
        ConfigError: If the output format is not supported.
    """
    tables = list(tables)
    filepath = Path(filename)
    if not (fmt := guess_file_format(filepath)):
        raise ConfigError(
            f"Unsupported output file format for `{filename}`. Supported formats: {', '.join(SUPPORTED_FORMATS)}"
        )

    if fmt == "xlsx":
        with xlsxwriter.Workbook(str(filepath)) as wb:
            for table in tables:
                worksheet = wb.add_worksheet(table.name[:31])
                table.df.write_excel(workbook=wb, worksheet=worksheet)
        return [filepath]

    written = []
    for idx, table in enumerate(tables):
        path = filepath if idx == 0 else filepath.with_name(f"{filepath.stem}_{table.name}{filepath.suffix}")
        if fmt in ("csv", "tsv"):
            table.df.write_csv(path, separator=SUPPORTED_FORMATS[fmt])
        elif fmt == "parquet":
            table.df.write_parquet(path)
        elif fmt in ("jsonl", "ndjson"):
            table.df.write_ndjson(path)
        elif fmt == "json":
            table.df.write_json(path)
        written.append(path)

    return written


def handle_error(err: Exception) -> None:
    """Render an error with troubleshooting hints and exit.

    Args:
        err: The exception raised by the library.

    Raises:
        SystemExit: Always, with exit code 1.
    """
    from rich.console import Console

    console = Console(stderr=True)
    console.rule("Error", style="red")

    if isinstance(err, ConfigError):
        for problem in err.problems:
            console.print(f"- {problem}", markup=False)
        hint = "Fix every listed key in the config file (or the matching `--set` override) and run again."
    elif isinstance(err, UnsupportedFormatError):
        console.print(str(err), markup=False)
        hint = "Only classic pcap captures are read. Convert pcapng files first, e.g. `editcap -F pcap in.pcapng out.pcap`."
    elif isinstance(err, PcapError):
        console.print(str(err), markup=False)
        hint = "The capture looks truncated. Packets before the reported offset were decoded; re-capture or cut the file."
    elif isinstance(err, FileNotFoundError):
        console.print(str(err), markup=False)
        hint = "Check the path, or set `--out` / `PRIME_TRAFFIC_OUTPUT` for run directories."
    elif isinstance(err, PrimeError):
        console.print(str(err), markup=False)
        hint = "See the message above; run with `-v` for debug logs."
    else:
        console.print(f"{type(err).__name__}: {err}", markup=False)
        hint = "Unhandled error. Run with `-v` for debug logs."

    console.rule("Troubleshooting", style="green")
    console.print(hint + "\n", markup=False)
    sys.exit(1)
