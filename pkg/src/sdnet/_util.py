import hashlib
import json
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

SCHEMA_VERSION = 1


def round_half_up(x: float) -> int:
    # Decimal(str(.)) avoids 0.025 * 500 landing on 12.4999...
    return int(Decimal(str(x)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_of(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def dump_json(obj, path) -> None:
    """Write `obj` as stable, human-readable JSON (byte-identical across reruns)."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2, ensure_ascii=False)
        fh.write("\n")
