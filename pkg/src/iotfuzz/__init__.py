"""Protocol-guided mutation fuzzer for HTTP, RTSP and TP-Link SmartHome devices."""

from enum import Enum

__version__ = "0.1.0"


class Protocol(str, Enum):
    HTTP = "HTTP"
    RTSP = "RTSP"
    TPLINK_SMARTHOME = "TPLINK_SMARTHOME"
    UNKNOWN = "UNKNOWN"

    @classmethod
    def parse(cls, text: str) -> "Protocol":
        key = text.strip().upper().replace("-", "_")
        if key in ("TPLINK", "TP_LINK", "SMARTHOME"):
            key = "TPLINK_SMARTHOME"
        return cls(key)


__all__ = ["Protocol", "__version__"]
