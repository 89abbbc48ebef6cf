"""Table reader shared by the engine and by assembled pipeline scripts.

This module must stay import-free apart from ``os`` and ``pandas``: its source
is copied verbatim into every assembled pipeline so that the standalone script
reads inputs exactly the way the engine did.
"""
import os

import pandas as pd

NULL_TOKENS = frozenset({"", "na", "n/a", "nan", "null", "none", "-"})
TRUE_TOKENS = frozenset({"true", "yes", "t", "y"})
FALSE_TOKENS = frozenset({"false", "no", "f", "n"})


def _is_null(value):
    return value is None or value.strip().lower() in NULL_TOKENS


def _convert(raw, kind):
    mask = raw.map(_is_null)
    if kind == "integer":
        values = pd.to_numeric(raw.where(~mask), errors="coerce")
        return values.astype("Int64") if values.isna().any() else values.astype("int64")
    if kind == "real":
        return pd.to_numeric(raw.where(~mask), errors="coerce").astype("float64")
    if kind == "boolean":
        lowered = raw.str.strip().str.lower()
        out = pd.Series(pd.NA, index=raw.index, dtype="boolean")
        out[lowered.isin(TRUE_TOKENS)] = True
        out[lowered.isin(FALSE_TOKENS)] = False
        return out
    if kind == "datetime":
        return pd.to_datetime(raw.where(~mask), errors="coerce", format="mixed")
    out = raw.astype(object).where(~mask, None)
    return out.map(lambda v: v.strip() if isinstance(v, str) else v)


def read_table(path, delimiter, has_header, columns, types):
    """Read a delimited or whitespace-aligned file into a typed DataFrame.

    ``delimiter`` is ``","``, ``"\\t"`` or ``"whitespace"``; ``columns`` and
    ``types`` come from the file's profile so that headerless files get their
    synthetic names and every column its inferred type.
    """
    columns = list(columns)
    if os.path.getsize(path) == 0:
        return pd.DataFrame({c: pd.Series(dtype=object) for c in columns})
    if delimiter == "whitespace":
        frame = pd.read_csv(path, sep=r"\s+", header=None, dtype=str,
                            keep_default_na=False, engine="python")
    else:
        frame = pd.read_csv(path, sep=delimiter, header=None, dtype=str,
                            keep_default_na=False, skip_blank_lines=True)
    if has_header:
        frame = frame.iloc[1:].reset_index(drop=True)
    frame = frame.iloc[:, : len(columns)]
    frame.columns = columns
    data = {c: _convert(frame[c], t) for c, t in zip(columns, types)}
    return pd.DataFrame(data)
