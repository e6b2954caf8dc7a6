"""Storage data-path encryption behind an emulated enclave boundary."""

from .boundary import BufferPlacement, CallGate, CallHandle, Enclave, GateConfig, TransitionStats
from .channel import ChannelClient, ChannelServer, ClientSession, ServerSession
from .datapath import BlockHeader, BlockStore, DataPath, ObjectRef, SecurityMode
from .emulator import EpcArena, EpcConfig, EpcRegion, EvictionPolicy, PagingStats, UntrustedArena, UntrustedBuffer
from .engine import Backend, CryptoEngine, SealedRecord
from .errors import *  # noqa: F401,F403

__version__ = "0.1.0"
