"""Append-only columnar result store.

One partition file per scenario, ``part-NNNNN.csp``; all integers little-endian.

    header   b"CSPART01" | u32 version | i32 scenario
    block    b"BLK1" | u32 rows | u32 new dictionary entries
             | entries: u8 dictionary, u16 length, utf-8 bytes
             | u8 layer[rows] | i32 timestamp[rows] | u8 kind[rows]
             | u32 entity[rows] | u16 metric[rows] | f64 value[rows]
             | u32 crc32 of everything between the block magic and the checksum
    footer   b"FTR1" | u32 blocks
             | per block: u64 offset, u32 rows, i32 t_min, i32 t_max, f64 v_min, f64 v_max
             | u64 total rows | four dictionaries (layer, kind, entity, metric):
               u32 count, then (u16 length, utf-8) per entry in code order
    trailer  u64 footer offset | b"CSPEND01"

Blocks hold at most 65536 rows. Dictionary codes are assigned in order of first
appearance and every block carries the entries it introduces, so a partition
without a footer can be recovered block by block. A partition is finalized
once its trailer is present; queries read finalized partitions only.
"""
from __future__ import annotations

import csv
import json
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

MAGIC = b"CSPART01"
BLOCK_MAGIC = b"BLK1"
FOOTER_MAGIC = b"FTR1"
END = b"CSPEND01"
VERSION = 1
BLOCK_ROWS = 65536
DICTS = ("layer", "entity_kind", "entity_id", "metric")
_CODE_DTYPES = {"layer": "<u1", "entity_kind": "<u1", "entity_id": "<u4", "metric": "<u2"}
# key packing: layer 4 bits | timestamp 24 bits | (kind, id) pair 20 bits | metric 16 bits
_LIMITS = {"layer": 16, "entity_kind": 256, "entity_id": 2 ** 20, "metric": 2 ** 16, "pair": 2 ** 20}
MAX_TIMESTAMP = 2 ** 24
KEY_COLUMNS = ("scenario", "layer", "timestamp", "entity_kind", "entity_id", "metric")
COLUMNS = KEY_COLUMNS + ("value",)
_BLOCK_META = struct.Struct("<QIiidd")


class StoreError(Exception):
    pass


class DuplicateKey(StoreError):
    pass


class UnknownMetric(StoreError, KeyError):
    pass


class IoFailure(StoreError, OSError):
    pass


@dataclass
class Batch:
    """Columnar records for one partition; string columns may be scalars."""

    layer: object
    timestamp: np.ndarray
    entity_kind: object
    entity_id: object
    metric: object
    value: np.ndarray

    def __len__(self) -> int:
        return int(np.asarray(self.value).size)


def batch_from_array(layer: str, kind: str, ids: Sequence[str], metric: str, values: np.ndarray,
                     timestamps: Sequence[int]) -> Batch:
    """Records for an (entities, hours) array."""
    values = np.asarray(values, float).reshape(len(ids), len(timestamps))
    n_t = values.shape[1]
    return Batch(layer, np.tile(np.asarray(timestamps, np.int64), len(ids)), kind,
                 np.repeat(np.asarray(list(ids), dtype=object), n_t), metric, values.ravel())


def concat(batches: Iterable[Batch]) -> Batch:
    bs = [b for b in batches if len(b)]
    if not bs:
        return Batch("", np.zeros(0, np.int64), "", np.zeros(0, object), "", np.zeros(0))

    def col(name):
        vals = [getattr(b, name) for b in bs]
        if all(isinstance(v, str) for v in vals) and len(set(vals)) == 1:
            return vals[0]
        return np.concatenate([np.full(len(b), v, dtype=object) if isinstance(v, str)
                               else np.asarray(v, dtype=object) for b, v in zip(bs, vals)])

    return Batch(col("layer"), np.concatenate([np.asarray(b.timestamp, np.int64) for b in bs]),
                 col("entity_kind"), col("entity_id"), col("metric"),
                 np.concatenate([np.asarray(b.value, float) for b in bs]))


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def _read_str(buf: bytes, pos: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<H", buf, pos)
    return buf[pos + 2: pos + 2 + n].decode("utf-8"), pos + 2 + n


def _parse_block(buf: bytes, pos: int, dicts: dict[str, list[str]]) -> tuple[dict, int, int]:
    """Decode the block at ``pos``; appends its new dictionary entries. Returns
    (columns of codes, rows, position after the block)."""
    if buf[pos:pos + 4] != BLOCK_MAGIC:
        raise StoreError(f"bad block magic at offset {pos}")
    start = pos + 4
    n, n_new = struct.unpack_from("<II", buf, start)
    p = start + 8
    for _ in range(n_new):
        (d_i,) = struct.unpack_from("<B", buf, p)
        s, p = _read_str(buf, p + 1)
        dicts[DICTS[d_i]].append(s)
    cols = {}
    for name, dt in (("layer", "<u1"), ("timestamp", "<i4"), ("entity_kind", "<u1"),
                     ("entity_id", "<u4"), ("metric", "<u2"), ("value", "<f8")):
        size = np.dtype(dt).itemsize * n
        cols[name] = np.frombuffer(buf, dtype=dt, count=n, offset=p)
        p += size
    (crc,) = struct.unpack_from("<I", buf, p)
    if zlib.crc32(buf[start:p]) != crc:
        raise StoreError(f"checksum mismatch in block at offset {pos}")
    return cols, n, p + 4


class PartitionWriter:
    """The single writer of one scenario partition."""

    def __init__(self, path: str | Path, scenario: int, fsync: bool = False,
                 resume_offset: Optional[int] = None):
        self.path = Path(path)
        self.scenario = int(scenario)
        self.fsync = fsync
        self.dicts: dict[str, dict[str, int]] = {d: {} for d in DICTS}
        self.pairs: dict[tuple[int, int], int] = {}
        self.blocks: list[tuple] = []
        self.keys: set[int] = set()
        self.rows = 0
        self.finalized = False
        try:
            if resume_offset is not None:
                self._recover(int(resume_offset))
            else:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                self.fh = open(self.path, "wb")
                self.fh.write(MAGIC + struct.pack("<Ii", VERSION, self.scenario))
                self.fh.flush()
        except OSError as exc:
            raise IoFailure(f"cannot open partition {self.path}: {exc}") from exc

    def _recover(self, offset: int) -> None:
        """Reopen a partition and keep only the blocks that end at or before ``offset``."""
        buf = self.path.read_bytes()[:offset]
        if buf[:8] != MAGIC:
            raise StoreError(f"{self.path} is not a partition file")
        names: dict[str, list[str]] = {d: [] for d in DICTS}
        pos = 16
        while pos < len(buf):
            cols, n, end = _parse_block(buf, pos, names)
            for d in DICTS:
                self.dicts[d] = {s: i for i, s in enumerate(names[d])}
            codes = {k: cols[k] for k in DICTS}
            self.keys.update(self._keys(codes, cols["timestamp"].astype(np.int64)).tolist())
            self.blocks.append((pos, n, int(cols["timestamp"].min()), int(cols["timestamp"].max()),
                                float(cols["value"].min()), float(cols["value"].max())))
            self.rows += n
            pos = end
        self.fh = open(self.path, "r+b")
        self.fh.truncate(pos)
        self.fh.seek(pos)

    def _codes(self, name: str, col, n: int) -> tuple[np.ndarray, list]:
        d = self.dicts[name]
        new = []
        if isinstance(col, str):
            if col not in d:
                d[col] = len(d)
                new.append(col)
            codes = np.full(n, d[col], dtype=np.int64)
        else:
            arr = np.asarray(col, dtype=object).astype(str)
            if arr.size != n:
                raise ValueError(f"{name} column length differs from values")
            uniq, inv = np.unique(arr, return_inverse=True)
            lut = np.empty(uniq.size, dtype=np.int64)
            for k, s in enumerate(uniq.tolist()):
                if s not in d:
                    d[s] = len(d)
                    new.append(s)
                lut[k] = d[s]
            codes = lut[inv]
        if len(d) > _LIMITS[name]:
            raise StoreError(f"more than {_LIMITS[name]} distinct {name} values")
        return codes, new

    def _keys(self, codes: dict, ts: np.ndarray) -> np.ndarray:
        kind, ent = codes["entity_kind"].astype(np.int64), codes["entity_id"].astype(np.int64)
        comb = kind * (2 ** 32) + ent
        uniq, inv = np.unique(comb, return_inverse=True)
        lut = np.empty(uniq.size, np.uint64)
        for k, c in enumerate(uniq.tolist()):
            pair = (c >> 32, c & 0xFFFFFFFF)
            if pair not in self.pairs:
                self.pairs[pair] = len(self.pairs)
            lut[k] = self.pairs[pair]
        if len(self.pairs) > _LIMITS["pair"]:
            raise StoreError("too many distinct entities in one partition")
        return ((codes["layer"].astype(np.uint64) << np.uint64(60))
                | (ts.astype(np.uint64) << np.uint64(36))
                | (lut[inv] << np.uint64(16))
                | codes["metric"].astype(np.uint64))

    def _describe(self, key: int) -> str:
        inv = {name: {v: k for k, v in self.dicts[name].items()} for name in DICTS}
        pair = {v: k for k, v in self.pairs.items()}[(key >> 16) & 0xFFFFF]
        return (f"(layer={inv['layer'][key >> 60]}, timestamp={(key >> 36) & 0xFFFFFF}, "
                f"entity={inv['entity_kind'][pair[0]]}:{inv['entity_id'][pair[1]]}, "
                f"metric={inv['metric'][key & 0xFFFF]})")

    def append(self, batch: Batch) -> int:
        """Write ``batch`` and flush it; returns the partition row count."""
        if self.finalized:
            raise StoreError("partition already finalized")
        n = len(batch)
        if n == 0:
            return self.rows
        value = np.asarray(batch.value, float).ravel()
        if not np.all(np.isfinite(value)):
            raise ValueError("record values must be finite")
        ts = np.asarray(batch.timestamp, np.int64).ravel()
        if ts.size != n:
            raise ValueError("timestamp column length differs from values")
        if ts.min() < 0 or ts.max() >= MAX_TIMESTAMP:
            raise ValueError(f"timestamps must lie in [0, {MAX_TIMESTAMP})")
        saved = ({k: dict(v) for k, v in self.dicts.items()}, dict(self.pairs))
        codes, new = {}, []
        try:
            for name in DICTS:
                c, nw = self._codes(name, getattr(batch, name), n)
                codes[name] = c
                new.extend((DICTS.index(name), s) for s in nw)
            key = self._keys(codes, ts)
            srt = np.sort(key)
            dup = srt[1:][srt[1:] == srt[:-1]]
            if dup.size == 0:
                klist = key.tolist()
                if not self.keys.isdisjoint(klist):
                    dup = np.array([next(k for k in klist if k in self.keys)], np.uint64)
            if dup.size:
                raise DuplicateKey(f"duplicate record key {self._describe(int(dup[0]))} "
                                   f"in scenario {self.scenario}")
        except Exception:
            self.dicts, self.pairs = saved
            raise
        self.keys.update(key.tolist())
        try:
            for a in range(0, n, BLOCK_ROWS):
                b = slice(a, min(n, a + BLOCK_ROWS))
                self._write_block({k: v[b] for k, v in codes.items()}, ts[b], value[b], new if a == 0 else [])
            self.fh.flush()
            if self.fsync:
                os.fsync(self.fh.fileno())
        except OSError as exc:
            raise IoFailure(f"write to {self.path} failed: {exc}") from exc
        return self.rows

    def _write_block(self, codes: dict, ts: np.ndarray, value: np.ndarray, new: list) -> None:
        n = ts.size
        parts = [struct.pack("<II", n, len(new))]
        parts.extend(struct.pack("<B", d_i) + _pack_str(s) for d_i, s in new)
        parts.append(codes["layer"].astype("<u1").tobytes())
        parts.append(ts.astype("<i4").tobytes())
        parts.append(codes["entity_kind"].astype("<u1").tobytes())
        parts.append(codes["entity_id"].astype("<u4").tobytes())
        parts.append(codes["metric"].astype("<u2").tobytes())
        parts.append(value.astype("<f8").tobytes())
        body = b"".join(parts)
        offset = self.fh.tell()
        self.fh.write(BLOCK_MAGIC + body + struct.pack("<I", zlib.crc32(body)))
        self.blocks.append((offset, n, int(ts.min()), int(ts.max()), float(value.min()), float(value.max())))
        self.rows += n

    def tell(self) -> int:
        """Offset just past the last written block (a resume point)."""
        return self.fh.tell()

    def finalize(self) -> None:
        if self.finalized:
            return
        try:
            off = self.fh.tell()
            parts = [FOOTER_MAGIC, struct.pack("<I", len(self.blocks))]
            parts.extend(_BLOCK_META.pack(*b) for b in self.blocks)
            parts.append(struct.pack("<Q", self.rows))
            for name in DICTS:
                items = sorted(self.dicts[name].items(), key=lambda kv: kv[1])
                parts.append(struct.pack("<I", len(items)))
                parts.extend(_pack_str(s) for s, _ in items)
            self.fh.write(b"".join(parts) + struct.pack("<Q", off) + END)
            self.fh.flush()
            if self.fsync:
                os.fsync(self.fh.fileno())
            self.fh.close()
        except OSError as exc:
            raise IoFailure(f"finalizing {self.path} failed: {exc}") from exc
        self.finalized = True

    def close(self) -> None:
        if not self.finalized and not self.fh.closed:
            self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, *_):
        if exc_type is None:
            self.finalize()
        else:
            self.close()


# ---------------------------------------------------------------------------- reading
@dataclass
class PartitionInfo:
    scenario: int
    rows: int
    blocks: list            # (offset, rows, t_min, t_max, v_min, v_max)
    dicts: dict             # name -> list of strings


def read_footer(path: str | Path) -> PartitionInfo:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return _footer(buf, path)


def _footer(buf: bytes, path) -> PartitionInfo:
    if buf[:8] != MAGIC:
        raise StoreError(f"{path} is not a partition file")
    version, scenario = struct.unpack_from("<Ii", buf, 8)
    if version != VERSION:
        raise StoreError(f"{path}: unsupported partition version {version}")
    if buf[-8:] != END:
        raise StoreError(f"{path} is not finalized")
    (off,) = struct.unpack_from("<Q", buf, len(buf) - 16)
    if buf[off:off + 4] != FOOTER_MAGIC:
        raise StoreError(f"{path}: bad footer")
    (nb,) = struct.unpack_from("<I", buf, off + 4)
    p = off + 8
    blocks = []
    for _ in range(nb):
        blocks.append(_BLOCK_META.unpack_from(buf, p))
        p += _BLOCK_META.size
    (rows,) = struct.unpack_from("<Q", buf, p)
    p += 8
    dicts = {}
    for name in DICTS:
        (cnt,) = struct.unpack_from("<I", buf, p)
        p += 4
        vals = []
        for _ in range(cnt):
            s, p = _read_str(buf, p)
            vals.append(s)
        dicts[name] = vals
    return PartitionInfo(scenario, rows, blocks, dicts)


def read_partition(path: str | Path, t_range: Optional[tuple[int, int]] = None) -> tuple[PartitionInfo, dict]:
    """Footer plus code columns; blocks outside ``t_range`` (inclusive) are skipped."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    info = _footer(buf, path)
    names: dict[str, list[str]] = {d: [] for d in DICTS}
    chunks = []
    for off, n, t0, t1, _, _ in info.blocks:
        cols, rows, _ = _parse_block(buf, off, names)
        if t_range is not None and (t1 < t_range[0] or t0 > t_range[1]):
            continue
        chunks.append(cols)
    if sum(b[1] for b in info.blocks) != info.rows:
        raise StoreError(f"{path}: footer row count does not match its blocks")
    cols = {k: (np.concatenate([c[k] for c in chunks]) if chunks else np.zeros(0, dt))
            for k, dt in (("layer", "<u1"), ("timestamp", "<i4"), ("entity_kind", "<u1"),
                          ("entity_id", "<u4"), ("metric", "<u2"), ("value", "<f8"))}
    return info, cols


# ---------------------------------------------------------------------------- store
AGGREGATES = ("none", "sum", "mean", "quantile")


class ResultStore:
    """A directory of scenario partitions plus ``meta.json``."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def partition_path(self, scenario: int) -> Path:
        return self.root / f"part-{int(scenario):05d}.csp"

    def writer(self, scenario: int, **kw) -> PartitionWriter:
        return PartitionWriter(self.partition_path(scenario), scenario, **kw)

    def write_meta(self, meta: dict) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        p = self.root / "meta.json"
        p.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return p

    def meta(self) -> dict:
        p = self.root / "meta.json"
        return json.loads(p.read_text()) if p.exists() else {}

    def scenarios(self) -> list[int]:
        out = []
        for p in sorted(self.root.glob("part-*.csp")):
            try:
                out.append(int(p.stem.split("-")[1]))
            except ValueError:
                continue
        return out

    def metrics(self) -> set[str]:
        out: set[str] = set()
        for s in self.scenarios():
            out.update(read_footer(self.partition_path(s)).dicts["metric"])
        return out

    def read(self, scenario: int, t_range: Optional[tuple[int, int]] = None) -> pd.DataFrame:
        info, cols = read_partition(self.partition_path(scenario), t_range)
        return _frame(info, cols)

    def query(self, metric: Optional[str | Sequence[str]] = None, scenarios: Optional[Sequence[int]] = None,
              layers: Optional[Sequence[str]] = None, hours: Optional[tuple[int, int]] = None,
              entity_kind: Optional[str] = None, entities: Optional[Sequence[str]] = None,
              aggregate: str = "none", q: float = 0.5,
              group_by: Sequence[str] = ("layer", "entity_kind", "entity_id", "metric")) -> pd.DataFrame:
        """Filter records and optionally aggregate ``value`` within ``group_by`` groups.

        ``hours`` is a half-open range. Rows come back sorted by key; aggregated
        rows are sorted by the group columns.
        """
        if aggregate not in AGGREGATES:
            raise ValueError(f"aggregate must be one of {AGGREGATES}")
        metrics = None if metric is None else ([metric] if isinstance(metric, str) else list(metric))
        known = self.metrics()
        for m in metrics or ():
            if m not in known:
                raise UnknownMetric(m)
        t_range = None if hours is None else (int(hours[0]), int(hours[1]) - 1)
        frames = []
        for s in (self.scenarios() if scenarios is None else sorted(set(scenarios))):
            if not self.partition_path(s).exists():
                continue
            info, cols = read_partition(self.partition_path(s), t_range)
            mask = np.ones(cols["value"].size, bool)
            if t_range is not None:
                mask &= (cols["timestamp"] >= t_range[0]) & (cols["timestamp"] <= t_range[1])
            for name, want in (("metric", metrics), ("layer", layers),
                               ("entity_kind", None if entity_kind is None else [entity_kind]),
                               ("entity_id", entities)):
                if want is None:
                    continue
                codes = [i for i, v in enumerate(info.dicts[name]) if v in set(want)]
                mask &= np.isin(cols[name], codes)
            frames.append(_frame(info, {k: v[mask] for k, v in cols.items()}))
        df = pd.concat(frames, ignore_index=True) if frames else _frame(None, None)
        df = df.sort_values(list(KEY_COLUMNS), kind="mergesort").reset_index(drop=True)
        if aggregate == "none":
            return df
        group = list(group_by)
        if df.empty:
            return pd.DataFrame({**{c: [] for c in group}, "value": []})
        g = df.groupby(group, sort=True)["value"]
        if aggregate == "sum":
            out = g.sum()
        elif aggregate == "mean":
            out = g.mean()
        else:
            out = g.apply(lambda v: float(np.quantile(np.sort(v.to_numpy()), q)))
        return out.reset_index()

    def total_rows(self) -> int:
        return sum(read_footer(self.partition_path(s)).rows for s in self.scenarios())


def _frame(info: Optional[PartitionInfo], cols: Optional[dict]) -> pd.DataFrame:
    if info is None:
        return pd.DataFrame({"scenario": np.zeros(0, np.int64), "layer": [], "timestamp": np.zeros(0, np.int64),
                             "entity_kind": [], "entity_id": [], "metric": [], "value": np.zeros(0)})

    def dec(name):
        lut = np.asarray(info.dicts[name], dtype=object)
        return lut[cols[name].astype(np.int64)] if lut.size else np.zeros(0, object)

    return pd.DataFrame({
        "scenario": np.full(cols["value"].size, info.scenario, np.int64),
        "layer": dec("layer"), "timestamp": cols["timestamp"].astype(np.int64),
        "entity_kind": dec("entity_kind"), "entity_id": dec("entity_id"), "metric": dec("metric"),
        "value": cols["value"].astype(float),
    })


# ---------------------------------------------------------------------------- export
def export_csv(df: pd.DataFrame, path: str | Path) -> Path:
    """CSV with shortest round-trip float text; identical frames give identical bytes."""
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(df.columns))
            for row in df.itertuples(index=False):
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return path


def read_csv(path: str | Path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"layer": str, "entity_kind": str, "entity_id": str, "metric": str},
                     float_precision="round_trip", keep_default_na=False)
    return df


LAYER_COLORS = {"week_ahead": "tab:red", "day_ahead": "tab:blue", "hour_ahead": "tab:green",
                "true_up": "tab:purple"}


def export_svg(df: pd.DataFrame, path: str | Path, title: str = "", ylabel: str = "") -> Path:
    """Line chart, one series per layer; values are summed over entities per hour."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    matplotlib.rcParams["svg.hashsalt"] = "cascadesim"
    fig, ax = plt.subplots(figsize=(9, 4))
    if len(df):
        tot = df.groupby(["layer", "timestamp"], sort=True)["value"].sum().reset_index()
        order = [lay for lay in LAYER_COLORS if lay in set(tot["layer"])]
        order += sorted(set(tot["layer"]) - set(order))
        for lay in order:
            part = tot[tot["layer"] == lay]
            ax.plot(part["timestamp"].to_numpy(), part["value"].to_numpy(), label=lay,
                    color=LAYER_COLORS.get(lay), drawstyle="steps-post", gid=f"series-{lay}")
        ax.legend(loc="best")
    ax.set_xlabel("hour")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    try:
        fig.savefig(path, format="svg", metadata={"Date": None})
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    finally:
        plt.close(fig)
    return path
