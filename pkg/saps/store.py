import threading
from dataclasses import dataclass
from datetime import datetime
from typing import Any, Dict, List, Optional

from .analysis import RoundRecord, records_to_csv
from .experiment import ExperimentResult
from .utils import new_uuid, now_tz


@dataclass(frozen=True)
class StoredExperiment:
    id: str
    created_at: datetime
    config: Dict[str, Any]
    summary: Dict[str, Any]
    records: List[RoundRecord]

    @property
    def csv(self) -> str:
        return records_to_csv(self.records)

    def brief(self) -> Dict[str, Any]:
        return {"id": self.id, "created_at": self.created_at.isoformat(), "summary": self.summary}


class ExperimentStore:
    """Finished experiments kept in process memory, newest first."""

    def __init__(self):
        self._lock = threading.Lock()
        self._items: Dict[str, StoredExperiment] = {}

    def add(self, result: ExperimentResult) -> StoredExperiment:
        item = StoredExperiment(
            id=new_uuid(),
            created_at=now_tz(),
            config=result.config.dict(),
            summary=result.summary.as_dict(),
            records=list(result.records),
        )
        with self._lock:
            self._items[item.id] = item
        return item

    def get(self, experiment_id: str) -> Optional[StoredExperiment]:
        with self._lock:
            return self._items.get(experiment_id)

    def list(self, offset: int = 0, limit: int = 20) -> List[StoredExperiment]:
        with self._lock:
            items = sorted(self._items.values(), key=lambda e: e.created_at, reverse=True)
        return items[offset:offset + limit]

    def count(self) -> int:
        with self._lock:
            return len(self._items)

    def clear(self) -> None:
        with self._lock:
            self._items.clear()


store: Optional[ExperimentStore] = None


# --- Lifecycle ---
def connect_store() -> ExperimentStore:
    global store
    if store is None:
        store = ExperimentStore()
    return store


def disconnect_store() -> None:
    global store
    if store is not None:
        store.clear()
        store = None


def get_store() -> ExperimentStore:
    if store is None:
        raise RuntimeError("experiment store is not initialized; connect_store() runs at startup")
    return store
