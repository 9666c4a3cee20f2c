from functools import lru_cache
from pydantic import BaseSettings
# pydantic<2; on v2 this moves to pydantic_settings.BaseSettings


class Settings(BaseSettings):
    # Logging
    LOG_LEVEL: str = "INFO"
    TIMEZONE: str = "UTC"

    # Coordinator endpoint (TCP transport)
    COORDINATOR_HOST: str = "127.0.0.1"
    COORDINATOR_PORT: int = 7070
    WORKER_HOST: str = "127.0.0.1"
    WORKER_BASE_PORT: int = 7100

    # Timeouts (seconds)
    ROUND_TIMEOUT_S: float = 300.0
    CONNECT_TIMEOUT_S: float = 10.0

    # Periodic BANDWIDTH_REPORT from workers, 0 disables the job
    BANDWIDTH_REPORT_INTERVAL_S: float = 0.0

    # HTTP service
    API_HOST: str = "0.0.0.0"
    API_PORT: int = 8000

    # Algorithm defaults
    DEFAULT_T_THRES: int = 10

    class Config:
        env_prefix = "SAPS_"
        env_file = ".env"
        env_file_encoding = "utf-8"


@lru_cache()
def get_settings() -> Settings:
    return Settings()
