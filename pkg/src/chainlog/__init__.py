"""chainlog: a chain-backed log database.

SQL-like operations are recorded as signed transactions in a hash-linked
ledger agreed by UNL-based consensus, then deterministically replayed into a
local table store on every participating node. Client middleware adds
multi-endpoint failover, column sealing, binlog ingestion, and a
disaster-recovery pipeline; everything runs at desk scale on a deterministic
simulated network.
"""

from . import (
    cli,
    codec,
    consensus,
    ledger,
    middleware,
    netsim,
    node,
    scenario,
    signing,
    sqltext,
    sqlvm,
)

__all__ = [
    "cli",
    "codec",
    "consensus",
    "ledger",
    "middleware",
    "netsim",
    "node",
    "scenario",
    "signing",
    "sqltext",
    "sqlvm",
]

__version__ = "0.1.0"
