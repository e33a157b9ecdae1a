# app/utils/reporting.py
"""Artifact writers. Every number goes through fmt6 so outputs are byte-stable."""

import csv
import hashlib
import json
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Sequence, Union

CSV_COLUMNS = [
    "episode_id",
    "n",
    "k",
    "k_q",
    "update_mode",
    "da_policy",
    "da_preset",
    "mix_mode",
    "sched_start",
    "sched_end",
    "tta",
    "v",
    "acc_last",
    "acc_best",
    "best_epoch",
    "v_pre",
    "v_post",
]

INTENSITY_COLUMNS = ["policy", "preset", "mode", "value", "n_terms", "extractor_id", "seed"]


def fmt6(value: Any) -> str:
    """Six significant digits for floats; ints and strings pass through."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return format(value, ".6g")
    if value is None:
        return ""
    return str(value)


def round6(obj: Any) -> Any:
    """JSON-safe copy with floats cut to 6 significant digits and infinities as strings."""
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return fmt6(obj)
        return float(format(obj, ".6g"))
    if isinstance(obj, Mapping):
        return {str(k): round6(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round6(v) for v in obj]
    return obj


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def config_hash(config: Mapping[str, Any]) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()[:12]


def write_csv(path: Union[str, Path], columns: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([fmt6(row.get(col)) for col in columns])


def read_csv(path: Union[str, Path]) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_json(path: Union[str, Path], payload: Mapping[str, Any]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(round6(payload), fh, sort_keys=True, indent=2)
        fh.write("\n")
