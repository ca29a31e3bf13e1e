from .app import ScreeningService, ServiceSettings, create_app, parse_metadata, serve
from .store import AudioStore, LogCorrupt, RecordLog, verify_log

__all__ = [
    "ScreeningService", "ServiceSettings", "create_app", "parse_metadata", "serve",
    "AudioStore", "LogCorrupt", "RecordLog", "verify_log",
]
