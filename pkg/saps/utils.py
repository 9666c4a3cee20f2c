import json
import logging
import math
import uuid
from datetime import datetime
from typing import Any, Dict, Optional

import pytz

from .config import get_settings

settings = get_settings()


# ---- Logging ----
def configure_logging(level: Optional[str] = None) -> None:
    logging.basicConfig(
        level=(level or settings.LOG_LEVEL).upper(),
        format="%(asctime)s [%(levelname)s] %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )


# ---- Experiment ids ----
def new_uuid() -> str:
    return str(uuid.uuid4())


# ---- Timestamps ----
def now_tz(zone: Optional[str] = None) -> datetime:
    return datetime.now(pytz.timezone(zone or settings.TIMEZONE))


# ---- Structured event helper ----
_event_logger = logging.getLogger("saps.events")


def log_event(event: str, meta: Optional[Dict[str, Any]] = None, level: int = logging.INFO) -> None:
    """One JSON object per line: time, event name and free-form metadata."""
    if not _event_logger.isEnabledFor(level):
        return
    ts = now_tz().isoformat()
    _event_logger.log(level, json.dumps({"time": ts, "event": event, "meta": meta or {}}, default=str))


# ---- Paginated list envelope ----
def response_list(data: list, page: int, per_page: int, total: int) -> Dict[str, Any]:
    return {
        "page": page,
        "per_page": per_page,
        "pages": math.ceil(total / per_page) if total else 0,
        "total": total,
        "data": data,
    }
