from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Union

import numpy as np
import pandas as pd

from errors import LogFormatError, ReachabilityError

logger = logging.getLogger("[LAB]")

GENERATOR_VERSION = "1.0"

LOG_COLUMNS = ("impression_id", "user_id", "item_id", "category_id", "click", "dmi", "dma", "pay")
FEATURE_COLUMNS = ("user_id", "item_id", "category_id")
LABEL_COLUMNS = ("click", "dmi", "dma", "pay")

# (label column, required column, message)
IMPLICATIONS = (
    ("dmi", "click", "label_dmi=1 requires label_click=1"),
    ("dma", "click", "label_dma=1 requires label_click=1"),
    ("pay", "click", "label_purchase=1 requires label_click=1"),
)

# at most 18 digits so every match fits in int64
_INTEGER = re.compile(r"-?\d{1,18}")


@dataclass(frozen=True)
class ImpressionRecord:
    impression_id: int
    user_id: int
    item_id: int
    category_id: int
    label_click: int
    label_dmi: int
    label_dma: int
    label_purchase: int

    def violations(self) -> List[str]:
        labels = {"click": self.label_click, "dmi": self.label_dmi,
                  "dma": self.label_dma, "pay": self.label_purchase}
        return [msg for label, required, msg in IMPLICATIONS if labels[label] == 1 and labels[required] != 1]


@dataclass
class ImpressionLog:
    """Columnar impression log; iterating yields ImpressionRecord."""

    impression_id: np.ndarray
    user_id: np.ndarray
    item_id: np.ndarray
    category_id: np.ndarray
    click: np.ndarray
    dmi: np.ndarray
    dma: np.ndarray
    purchase: np.ndarray

    def __post_init__(self):
        for name in ("impression_id", "user_id", "item_id", "category_id"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        for name in ("click", "dmi", "dma", "purchase"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int8))

    def __len__(self) -> int:
        return int(self.impression_id.shape[0])

    def __iter__(self) -> Iterator[ImpressionRecord]:
        for i in range(len(self)):
            yield ImpressionRecord(
                impression_id=int(self.impression_id[i]),
                user_id=int(self.user_id[i]),
                item_id=int(self.item_id[i]),
                category_id=int(self.category_id[i]),
                label_click=int(self.click[i]),
                label_dmi=int(self.dmi[i]),
                label_dma=int(self.dma[i]),
                label_purchase=int(self.purchase[i]),
            )

    @classmethod
    def empty(cls) -> "ImpressionLog":
        return cls(*([np.zeros(0)] * 8))

    @classmethod
    def from_records(cls, records: Iterable[ImpressionRecord]) -> "ImpressionLog":
        rows = [
            (r.impression_id, r.user_id, r.item_id, r.category_id,
             r.label_click, r.label_dmi, r.label_dma, r.label_purchase)
            for r in records
        ]
        if not rows:
            return cls.empty()
        columns = np.asarray(rows, dtype=np.int64).T
        return cls(*columns)

    @classmethod
    def concat(cls, logs: List["ImpressionLog"]) -> "ImpressionLog":
        if not logs:
            return cls.empty()
        return cls(*(
            np.concatenate([getattr(log, name) for log in logs])
            for name in ("impression_id", "user_id", "item_id", "category_id",
                         "click", "dmi", "dma", "purchase")
        ))

    def take(self, index) -> "ImpressionLog":
        return ImpressionLog(
            self.impression_id[index], self.user_id[index], self.item_id[index],
            self.category_id[index], self.click[index], self.dmi[index],
            self.dma[index], self.purchase[index],
        )

    def features(self) -> np.ndarray:
        """(n, 3) int64 matrix of user, item and category ids."""
        return np.stack([self.user_id, self.item_id, self.category_id], axis=1)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "impression_id": self.impression_id,
            "user_id": self.user_id,
            "item_id": self.item_id,
            "category_id": self.category_id,
            "click": self.click,
            "dmi": self.dmi,
            "dma": self.dma,
            "pay": self.purchase,
        }, columns=list(LOG_COLUMNS))

    def check_reachability(self, first_line: int = 2) -> None:
        """Raise ReachabilityError naming the first failed implication."""
        labels = {"click": self.click, "dmi": self.dmi, "dma": self.dma, "pay": self.purchase}
        for label, required, message in IMPLICATIONS:
            bad = np.flatnonzero((labels[label] == 1) & (labels[required] != 1))
            if bad.size:
                raise ReachabilityError(message, line_number=int(bad[0]) + first_line)


@dataclass
class DatasetManifest:
    record_count: int
    counts: Dict[str, int]
    click_rate: Optional[float]
    dmi_rate: Optional[float]
    dma_rate: Optional[float]
    purchase_rate: Optional[float]
    seed: Optional[int] = None
    generator_version: str = GENERATOR_VERSION
    notes: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_log(cls, log: ImpressionLog, seed: Optional[int] = None,
                 notes: Optional[Dict[str, str]] = None) -> "DatasetManifest":
        impressions = len(log)
        clicks = int(log.click.sum())
        counts = {
            "impressions": impressions,
            "click": clicks,
            "dmi": int(log.dmi.sum()),
            "dma": int(log.dma.sum()),
            "pay": int(log.purchase.sum()),
        }

        def per_click(count: int) -> Optional[float]:
            return count / clicks if clicks else None

        return cls(
            record_count=impressions,
            counts=counts,
            click_rate=clicks / impressions if impressions else None,
            dmi_rate=per_click(counts["dmi"]),
            dma_rate=per_click(counts["dma"]),
            purchase_rate=per_click(counts["pay"]),
            seed=seed,
            notes=dict(notes or {}),
        )

    def rates(self) -> Dict[str, Optional[float]]:
        return {"click": self.click_rate, "dmi": self.dmi_rate,
                "dma": self.dma_rate, "purchase": self.purchase_rate}

    def verify(self, log: ImpressionLog) -> None:
        recomputed = DatasetManifest.from_log(log, self.seed, self.notes)
        if recomputed.counts != self.counts or recomputed.rates() != self.rates():
            raise LogFormatError(
                f"manifest mismatch stored={self.counts} recomputed={recomputed.counts}"
            )

    def save(self, path: Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, indent=2)
            f.write("\n")

    @classmethod
    def load(cls, path: Path) -> "DatasetManifest":
        with open(path, "r", encoding="utf-8") as f:
            return cls(**json.load(f))


def manifest_path(log_path: Path) -> Path:
    log_path = Path(log_path)
    return log_path.with_name(log_path.stem + ".manifest.json")


def write_log(
    records: Union[ImpressionLog, Iterable[ImpressionRecord]],
    path: Path,
    seed: Optional[int] = None,
    notes: Optional[Dict[str, str]] = None,
) -> DatasetManifest:
    """Write a CSV log with header plus its manifest next to it."""
    log = records if isinstance(records, ImpressionLog) else ImpressionLog.from_records(records)
    log.check_reachability()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    log.to_frame().to_csv(path, index=False, lineterminator="\n", encoding="utf-8")
    manifest = DatasetManifest.from_log(log, seed=seed, notes=notes)
    manifest.save(manifest_path(path))
    logger.info(f"log_written path={path} records={len(log)} clicks={manifest.counts['click']}")
    return manifest


def _first_undecodable_line(path: Path) -> Optional[int]:
    with open(path, "rb") as f:
        for number, line in enumerate(f, start=1):
            try:
                line.decode("utf-8")
            except UnicodeDecodeError:
                return number
    return None


def read_log(path: Path) -> ImpressionLog:
    """Read and validate a CSV log. Line numbers in errors count the header as line 1."""
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False, encoding="utf-8")
    except pd.errors.EmptyDataError as e:
        raise LogFormatError("missing header line", line_number=1) from e
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        line = int(match.group(1)) if match else None
        raise LogFormatError(f"malformed line: {str(e)[:200]}", line_number=line) from e
    except UnicodeDecodeError as e:
        raise LogFormatError("line is not valid UTF-8", line_number=_first_undecodable_line(path)) from e

    if tuple(frame.columns) != LOG_COLUMNS:
        raise LogFormatError(f"header mismatch expected={','.join(LOG_COLUMNS)}", line_number=1)

    columns: Dict[str, np.ndarray] = {}
    for name in LOG_COLUMNS:
        raw = frame[name].fillna("").astype(str)
        valid = raw.str.fullmatch(_INTEGER).fillna(False).to_numpy(dtype=bool)
        if not valid.all():
            bad = int(np.flatnonzero(~valid)[0])
            raise LogFormatError(f"column {name} is not an integer of at most 18 digits: {raw.iloc[bad][:40]!r}",
                                 line_number=bad + 2)
        values = raw.astype(np.int64).to_numpy()
        if name in LABEL_COLUMNS:
            outside = np.flatnonzero((values != 0) & (values != 1))
            if outside.size:
                raise LogFormatError(f"label {name} must be 0 or 1", line_number=int(outside[0]) + 2)
        elif np.any(values < 0):
            bad = int(np.flatnonzero(values < 0)[0])
            raise LogFormatError(f"{name} must be non-negative", line_number=bad + 2)
        columns[name] = values

    log = ImpressionLog(
        columns["impression_id"], columns["user_id"], columns["item_id"], columns["category_id"],
        columns["click"], columns["dmi"], columns["dma"], columns["pay"],
    )
    log.check_reachability()
    logger.info(f"log_read path={path} records={len(log)}")
    return log
