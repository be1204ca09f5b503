"""Report browsing: run directories and checkpoints as tables, in a textual app or on the console."""

from __future__ import annotations

from pathlib import Path

import polars as pl
from rich.console import Console
from rich.table import Table as RichTable
from rich.text import Text
from textual.app import App, ComposeResult
from textual.widgets import DataTable, Footer, Static, TabbedContent, TabPane
from textual.widgets.tabbed_content import ContentTabs

from .common import Table, format_float, read_json
from .model import load_checkpoint

NULL_DISPLAY = "-"


# ─── Table collection ────────────────────────────────────────────────────────


def _read_jsonl(path: Path) -> pl.DataFrame | None:
    if not path.exists() or path.stat().st_size == 0:
        return None
    return pl.read_ndjson(path)


def run_tables(run_dir: str | Path) -> list[Table]:
    """Tables of a run directory: aggregate, per-seed metrics, then every sub-run's details."""
    run_dir = Path(run_dir)
    if not (run_dir / "manifest.json").exists():
        raise FileNotFoundError(f"Not a run directory (no manifest.json): `{run_dir}`")

    config = read_json(run_dir / "config.json")
    tables = [Table(pl.read_csv(run_dir / "aggregate.csv"), "aggregate"), Table(pl.read_csv(run_dir / "runs.csv"), "runs")]
    for method in config["methods"]:
        for seed in config["seeds"]:
            sub = run_dir / method / f"seed-{seed}"
            tag = f"{method}-{seed}"
            tables.append(Table(pl.read_csv(sub / "accuracy.csv"), f"{tag} accuracy"))
            stages = pl.DataFrame(
                [
                    {k: v for k, v in stage.items() if k in ("stage", "path", "epochs", "params_before", "params_after")}
                    for stage in read_json(sub / "stages.json")
                ]
            )
            tables.append(Table(stages, f"{tag} stages"))
            if (df := _read_jsonl(sub / "plasticity.jsonl")) is not None:
                tables.append(Table(df.drop("method", "seed"), f"{tag} plasticity"))
            if (df := _read_jsonl(sub / "events.jsonl")) is not None:
                tables.append(Table(df.drop("method", "seed"), f"{tag} expansions"))
    return tables


def checkpoint_tables(path: str | Path) -> list[Table]:
    """Layer specs, partition sizes and widening generations of a checkpoint."""
    model, optimizer = load_checkpoint(path)
    layers = pl.DataFrame(
        [
            {"kind": s.kind, "in": s.in_dim, "out": s.out_dim, "dropout": s.dropout_rate, "heads": s.heads}
            for s in model.layer_specs()
        ]
    )
    params = pl.DataFrame(
        [
            {
                "key": key,
                "partition": model.partitions[key].value,
                "shape": "x".join(map(str, value.shape)),
                "size": value.size,
                "frozen": key in model.frozen,
            }
            for key, value in model.params.items()
        ]
    )
    partitions = params.group_by("partition").agg(pl.len().alias("blocks"), pl.col("size").sum()).sort("partition")
    generations = pl.DataFrame(
        [
            {"generation": g, "widths": str(gen.widths), "factor": gen.factor, "eps0": gen.eps0, "stage": gen.stage}
            for g, gen in enumerate(model.generations)
        ]
    )
    heads = pl.DataFrame([{"head": i, "task": h.task, "classes": h.n_classes, "generation": h.generation} for i, h in enumerate(model.heads)])
    tables = [Table(layers, "layers"), Table(partitions, "partitions"), Table(generations, "generations"), Table(params, "parameters")]
    if not heads.is_empty():
        tables.insert(3, Table(heads, "heads"))
    if optimizer is not None:
        tables.append(Table(pl.DataFrame([optimizer.scalars()]), "optimizer"))
    return tables


def load_tables(target: str | Path) -> list[Table]:
    target = Path(target)
    if target.is_dir():
        return run_tables(target)
    if not target.exists():
        raise FileNotFoundError(f"No run directory or checkpoint at `{target}`")
    return checkpoint_tables(target)


# ─── Rendering ───────────────────────────────────────────────────────────────


def _cell(value) -> str:
    if value is None:
        return NULL_DISPLAY
    if isinstance(value, float):
        return format_float(value, 4)
    return str(value)


def _justify(dtype: pl.DataType) -> str:
    return "right" if dtype.is_numeric() else "left"


def rich_table(table: Table) -> RichTable:
    out = RichTable(title=table.name)
    for col, dtype in zip(table.df.columns, table.df.dtypes):
        out.add_column(col, justify=_justify(dtype))
    for row in table.df.iter_rows():
        out.add_row(*(_cell(v) for v in row))
    return out


def print_tables(tables: list[Table], console: Console | None = None) -> None:
    console = console or Console()
    for table in tables:
        console.print(rich_table(table))


class ReportTable(DataTable):
    """DataTable bound to one polars frame, sortable by the cursor column."""

    BINDINGS = [
        ("[", "sort(False)", "Sort ascending"),
        ("]", "sort(True)", "Sort descending"),
    ]

    def __init__(self, df: pl.DataFrame, **kwargs) -> None:
        super().__init__(zebra_stripes=True, **kwargs)
        self.df = df
        self.sorted_by: tuple[str, bool] | None = None

    def on_mount(self) -> None:
        self.build()

    def build(self) -> None:
        self.clear(columns=True)
        for col, dtype in zip(self.df.columns, self.df.dtypes):
            mark = ""
            if self.sorted_by and self.sorted_by[0] == col:
                mark = " ▼" if self.sorted_by[1] else " ▲"
            self.add_column(Text(col + mark, justify=_justify(dtype)), key=col)
        for ridx, row in enumerate(self.df.iter_rows()):
            cells = [Text(_cell(v), justify=_justify(dtype)) for v, dtype in zip(row, self.df.dtypes)]
            self.add_row(*cells, key=str(ridx), label=str(ridx + 1))

    def action_sort(self, descending: bool) -> None:
        if self.df.is_empty():
            return
        col = self.df.columns[self.cursor_coordinate.column]
        try:
            self.df = self.df.sort(col, descending=descending, nulls_last=True)
        except pl.exceptions.PolarsError as e:
            self.log(f"Error sorting by column '{col}': {e}")
            return
        self.sorted_by = (col, descending)
        self.build()


class ReportViewer(App):
    """One tab per table of a run directory or checkpoint."""

    CSS = """
        TabbedContent > ContentTabs {
            dock: bottom;
        }
        TabbedContent > ContentSwitcher {
            overflow: auto;
            height: 1fr;
        }
        ContentTab.-active {
            background: $block-cursor-background;
        }
        #status_bar {
            dock: bottom;
            height: 1;
            background: $surface;
            color: $text-muted;
            padding: 0 1;
        }
    """

    BINDINGS = [("q", "quit", "Quit")]

    def __init__(self, tables: list[Table], title: str = "prime-traffic") -> None:
        super().__init__()
        self.tables = tables
        self.title = title
        self.status_bar: Static | None = None

    def compose(self) -> ComposeResult:
        with TabbedContent(id="main_tabs"):
            for idx, table in enumerate(self.tables, start=1):
                yield TabPane(table.name, ReportTable(table.df, id=f"table-{idx}"), id=f"tab-{idx}")
        self.status_bar = Static(self._context(0), id="status_bar")
        yield self.status_bar
        yield Footer()

    def on_mount(self) -> None:
        if len(self.tables) == 1:
            self.query_one(ContentTabs).display = False

    def on_tabbed_content_tab_activated(self, event: TabbedContent.TabActivated) -> None:
        idx = int(event.pane.id.removeprefix("tab-")) - 1
        self.status_bar.update(self._context(idx))
        event.pane.query_one(ReportTable).focus()

    def _context(self, idx: int) -> str:
        if not self.tables:
            return "No tables"
        df = self.tables[idx].df
        return f"{self.title} | {self.tables[idx].name} | {df.height} rows x {df.width} cols"
