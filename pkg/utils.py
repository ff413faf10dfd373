import json
import sys
import zlib
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import numpy as np
import pandas as pd

try:
    from tqdm import tqdm
except ImportError:
    tqdm = None

    def tqdm_write(msg: str) -> None:
        print(msg, file=sys.stderr)
else:
    def tqdm_write(msg: str) -> None:
        tqdm.write(msg)

from config import FLOAT_FORMAT

VERBOSE = True


def set_verbose(flag: bool) -> None:
    global VERBOSE
    VERBOSE = flag


def verbose_log(msg: str) -> None:
    """
    Print message only if VERBOSE is True.
    """
    if VERBOSE:
        tqdm_write(msg)


def log(msg: str) -> None:
    """
    Always print message.
    """
    tqdm_write(msg)


def progress(total: Optional[int] = None, desc: str = "", unit: str = "it", leave: bool = False):
    """
    Returns a tqdm progress bar, disabled when not verbose or when tqdm is missing.
    """
    if tqdm is None:
        return _NullBar()
    return tqdm(total=total, desc=desc, unit=unit, leave=leave, disable=not VERBOSE)


class _NullBar:
    def update(self, n: int = 1) -> None:
        pass

    def set_postfix(self, *args, **kwargs) -> None:
        pass

    def write(self, msg: str) -> None:
        verbose_log(msg)

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc) -> bool:
        return False


def ensure_dir(path: Path) -> None:
    """
    Ensure that a directory exists; creates if not.
    """
    path.mkdir(parents=True, exist_ok=True)


def rng_for(seed: int, label: str) -> np.random.Generator:
    """
    Returns a generator for one subsystem of a run.
    Streams for different labels are independent, so sweeping one subsystem's
    parameters never shifts the draws of another.
    """
    return np.random.default_rng([int(seed), zlib.crc32(label.encode("utf-8"))])


def write_json(path: Path, payload: Dict[str, Any]) -> None:
    with open(path, "w") as f:
        json.dump(to_jsonable(payload), f, indent=2, sort_keys=True)
        f.write("\n")


def write_series(path: Path, rows: Iterable[Dict[str, Any]]) -> pd.DataFrame:
    """
    Writes per-iteration rows as CSV with a fixed float format, returns the frame.
    """
    frame = pd.DataFrame(list(rows))
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return frame


def to_jsonable(value: Any) -> Any:
    """
    Converts numpy scalars/arrays and tuples into plain JSON types.
    """
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    return value
