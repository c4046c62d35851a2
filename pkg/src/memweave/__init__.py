"""Structured long-term memory construction for dialogue agents, with session-level rewards."""

from .memory import MemoryBank, MemoryEntry, bank_digest, load_bank, save_bank
from .store import VectorStore
from .gateway import ChatRequest, Gateway, GatewayConfig
from .config import Gateways, RunConfig

__version__ = "0.1.0"

__all__ = [
    "ChatRequest",
    "Gateway",
    "GatewayConfig",
    "Gateways",
    "MemoryBank",
    "MemoryEntry",
    "RunConfig",
    "VectorStore",
    "bank_digest",
    "load_bank",
    "save_bank",
]
