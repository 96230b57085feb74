"""Deterministic replay engine: applies validated ledgers to a table store.

All mutation is funneled through ``apply_op``/``apply_ledger`` so that every
replica, replaying the same chain, lands on the same canonical state hash.
Rejections are total and deterministic (never exceptions), because replicas
must agree on outcomes, not just on successes. A ``PendingOverlay`` supports
optimistic apply with exact rollback for the consensus path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

from .codec import CodecError, Reader, Writer, check_sorted_key
from .ledger import (
    AccountId,
    ACCOUNT_LEN,
    ColumnType,
    CreateTable,
    Delete,
    DropTable,
    Grant,
    HASH_LEN,
    Insert,
    Ledger,
    Literal,
    Perm,
    Transaction,
    Update,
    hash32,
    literal_matches,
    perms_from_mask,
    perms_to_mask,
    verify_chain,
)

REJECT_BAD_SEQ = "bad_seq"
REJECT_NO_SUCH_TABLE = "no_such_table"
REJECT_TABLE_EXISTS = "table_exists"
REJECT_TYPE_MISMATCH = "type_mismatch"
REJECT_PERMISSION_DENIED = "permission_denied"
REJECT_MISSING_COLUMN = "missing_column"

_OP_PERM = {Insert: Perm.INSERT, Update: Perm.UPDATE, Delete: Perm.DELETE}


class OverlayError(RuntimeError):
    """Overlay lifecycle misuse (nested begin, commit without begin, ...)."""


class OutOfOrderLedgerError(ValueError):
    """apply_ledger called with a seq that is not applied_ledger_seq + 1."""


class CorruptCheckpointError(ValueError):
    """Checkpoint bytes fail to parse or do not match their snapshot hash."""


class QueryError(ValueError):
    """Read-path failure; ``reason`` uses the shared rejection vocabulary."""

    def __init__(self, reason: str, detail: str = "") -> None:
        super().__init__(f"{reason}{': ' + detail if detail else ''}")
        self.reason = reason


@dataclass(frozen=True)
class Applied:
    rows_changed: int = 0

    @property
    def ok(self) -> bool:
        return True


@dataclass(frozen=True)
class Rejected:
    reason: str

    @property
    def ok(self) -> bool:
        return False


ApplyResult = Union[Applied, Rejected]


@dataclass(frozen=True)
class Row:
    row_id: int
    values: dict


class Table:
    """One table: schema, ownership, grants, and rows keyed by row_id."""

    __slots__ = ("name", "columns", "owner", "grants", "rows", "next_row_id", "_types")

    def __init__(
        self,
        name: str,
        columns: tuple,
        owner: AccountId,
        grants: Optional[dict] = None,
        rows: Optional[dict] = None,
        next_row_id: int = 1,
    ) -> None:
        self.name = name
        self.columns = columns  # ((name, ColumnType), ...) in declared order
        self.owner = owner
        self.grants = grants if grants is not None else {}
        self.rows = rows if rows is not None else {}
        self.next_row_id = next_row_id
        self._types = dict(columns)

    def column_type(self, column: str) -> Optional[ColumnType]:
        return self._types.get(column)

    def holds_perm(self, account: AccountId, perm: Perm) -> bool:
        if account == self.owner:
            return True
        return perm in self.grants.get(account, ())

    def clone(self) -> "Table":
        return Table(
            self.name,
            self.columns,
            self.owner,
            dict(self.grants),
            {rid: dict(vals) for rid, vals in self.rows.items()},
            self.next_row_id,
        )


class TableStore:
    """The replay target. Mutated only through apply_op / apply_ledger."""

    def __init__(self) -> None:
        self.tables: dict = {}  # name -> Table
        self.account_seq: dict = {}  # AccountId -> last applied seq
        self.applied_ledger_seq = 0
        self._overlay: Optional[PendingOverlay] = None

    def clone(self) -> "TableStore":
        if self._overlay is not None:
            raise OverlayError("cannot clone with an active overlay")
        out = TableStore()
        out.tables = {name: t.clone() for name, t in self.tables.items()}
        out.account_seq = dict(self.account_seq)
        out.applied_ledger_seq = self.applied_ledger_seq
        return out


@dataclass
class PendingOverlay:
    """Tentative ops applied in place, with an inverse log for exact rollback."""

    store: TableStore
    base_state_hash: bytes
    tx_ids: list = field(default_factory=list)
    _undo: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Canonical serialization and state hashing
# ---------------------------------------------------------------------------


def _encode_literal(w: Writer, value: Literal) -> None:
    if isinstance(value, int):
        w.u8(0)
        w.i64(value)
    else:
        w.u8(1)
        w.str_(value)


def _decode_literal(r: Reader) -> Literal:
    tag = r.u8()
    if tag == 0:
        return r.i64()
    if tag == 1:
        return r.str_()
    raise CodecError(f"unknown literal tag {tag}")


def _encode_content(w: Writer, store: TableStore) -> None:
    # Tables sorted by name, grants by grantee, rows by row_id, cells by
    # column name: the byte stream is a pure function of abstract content.
    w.u32(len(store.tables))
    for name in sorted(store.tables, key=lambda n: n.encode("utf-8")):
        t = store.tables[name]
        w.str_(name)
        w.u32(len(t.columns))
        for col, col_type in t.columns:
            w.str_(col)
            w.u8(0 if col_type is ColumnType.INT else 1)
        w.raw(t.owner.id)
        w.u32(len(t.grants))
        for grantee in sorted(t.grants, key=lambda a: a.id):
            w.raw(grantee.id)
            w.u8(perms_to_mask(t.grants[grantee]))
        w.u64(t.next_row_id)
        w.u32(len(t.rows))
        for row_id in sorted(t.rows):
            w.u64(row_id)
            vals = t.rows[row_id]
            w.u32(len(vals))
            for col in sorted(vals, key=lambda c: c.encode("utf-8")):
                w.str_(col)
                _encode_literal(w, vals[col])
    w.u32(len(store.account_seq))
    for account in sorted(store.account_seq, key=lambda a: a.id):
        w.raw(account.id)
        w.u64(store.account_seq[account])


def state_hash(store: TableStore) -> bytes:
    """Canonical content digest; excludes applied_ledger_seq.

    The ledger header that carries this hash also carries the seq, so hashing
    content alone lets an empty ledger leave the state hash unchanged while
    still advancing the applied counter.
    """
    w = Writer()
    _encode_content(w, store)
    return hash32(w.getvalue())


def serialize_store(store: TableStore) -> bytes:
    """Full snapshot bytes: applied_ledger_seq plus canonical content."""
    w = Writer()
    w.u64(store.applied_ledger_seq)
    _encode_content(w, store)
    return w.getvalue()


def deserialize_store(data: bytes) -> TableStore:
    r = Reader(data)
    store = TableStore()
    store.applied_ledger_seq = r.u64()
    ntables = r.u32()
    prev_name = None
    for _ in range(ntables):
        name = r.str_()
        prev_name = check_sorted_key(prev_name, name.encode("utf-8"), "tables")
        ncols = r.u32()
        columns = []
        for _ in range(ncols):
            col = r.str_()
            tag = r.u8()
            if tag > 1:
                raise CodecError(f"unknown column type tag {tag}")
            columns.append((col, ColumnType.INT if tag == 0 else ColumnType.TEXT))
        owner = AccountId(r.raw(ACCOUNT_LEN))
        grants = {}
        prev_grantee = None
        for _ in range(r.u32()):
            grantee = AccountId(r.raw(ACCOUNT_LEN))
            prev_grantee = check_sorted_key(prev_grantee, grantee.id, "grants")
            grants[grantee] = perms_from_mask(r.u8())
        next_row_id = r.u64()
        rows = {}
        prev_rid = None
        for _ in range(r.u32()):
            row_id = r.u64()
            prev_rid = check_sorted_key(
                prev_rid, row_id.to_bytes(8, "big"), "rows"
            )
            vals = {}
            prev_col = None
            for _ in range(r.u32()):
                col = r.str_()
                prev_col = check_sorted_key(prev_col, col.encode("utf-8"), "cells")
                vals[col] = _decode_literal(r)
            rows[row_id] = vals
        store.tables[name] = Table(name, tuple(columns), owner, grants, rows, next_row_id)
    prev_acct = None
    for _ in range(r.u32()):
        account = AccountId(r.raw(ACCOUNT_LEN))
        prev_acct = check_sorted_key(prev_acct, account.id, "account_seq")
        store.account_seq[account] = r.u64()
    r.finish()
    return store


# ---------------------------------------------------------------------------
# Applying transactions
# ---------------------------------------------------------------------------


def _check_where(table: Table, where: tuple) -> Optional[str]:
    for col, lit in where:
        col_type = table.column_type(col)
        if col_type is None:
            return REJECT_MISSING_COLUMN
        if not literal_matches(lit, col_type):
            return REJECT_TYPE_MISMATCH
    return None


def _match_rows(table: Table, where: tuple) -> list:
    # Conjunctive equality; empty where matches every row.
    out = []
    for row_id in sorted(table.rows):
        vals = table.rows[row_id]
        if all(vals[col] == lit for col, lit in where):
            out.append(row_id)
    return out


def _apply_checked(store: TableStore, tx: Transaction, undo: Optional[list]) -> ApplyResult:
    op = tx.op
    account = tx.account

    if isinstance(op, CreateTable):
        if op.table in store.tables:
            return Rejected(REJECT_TABLE_EXISTS)
        store.tables[op.table] = Table(op.table, op.columns, account)
        if undo is not None:
            undo.append(lambda: store.tables.pop(op.table))
        return Applied()

    table = store.tables.get(op.table)
    if table is None:
        return Rejected(REJECT_NO_SUCH_TABLE)

    if isinstance(op, DropTable):
        if account != table.owner:
            return Rejected(REJECT_PERMISSION_DENIED)
        store.tables.pop(op.table)
        if undo is not None:
            undo.append(lambda: store.tables.__setitem__(op.table, table))
        return Applied()

    if isinstance(op, Grant):
        if account != table.owner:
            return Rejected(REJECT_PERMISSION_DENIED)
        had, old = (op.grantee in table.grants), table.grants.get(op.grantee)
        if op.perms:
            table.grants[op.grantee] = frozenset(op.perms)
        else:
            # Empty grant is revocation; dropping the entry keeps the
            # canonical encoding free of dead grantees.
            table.grants.pop(op.grantee, None)
        if undo is not None:
            def undo_grant() -> None:
                if had:
                    table.grants[op.grantee] = old
                else:
                    table.grants.pop(op.grantee, None)
            undo.append(undo_grant)
        return Applied()

    if not table.holds_perm(account, _OP_PERM[type(op)]):
        return Rejected(REJECT_PERMISSION_DENIED)

    if isinstance(op, Insert):
        # Values must cover the schema exactly: no missing, no unknown columns.
        if set(op.values) != set(table._types):
            return Rejected(REJECT_MISSING_COLUMN)
        for col, lit in op.values.items():
            if not literal_matches(lit, table.column_type(col)):
                return Rejected(REJECT_TYPE_MISMATCH)
        row_id = table.next_row_id
        table.next_row_id += 1
        table.rows[row_id] = dict(op.values)
        if undo is not None:
            def undo_insert() -> None:
                table.rows.pop(row_id)
                table.next_row_id = row_id
            undo.append(undo_insert)
        return Applied(rows_changed=1)

    if isinstance(op, Update):
        for col in op.set_values:
            if table.column_type(col) is None:
                return Rejected(REJECT_MISSING_COLUMN)
        for col, lit in op.set_values.items():
            if not literal_matches(lit, table.column_type(col)):
                return Rejected(REJECT_TYPE_MISMATCH)
        reason = _check_where(table, op.where)
        if reason is not None:
            return Rejected(reason)
        matched = _match_rows(table, op.where)
        if undo is not None:
            saved = [
                (rid, {c: table.rows[rid][c] for c in op.set_values})
                for rid in matched
            ]
            def undo_update() -> None:
                for rid, old_vals in saved:
                    table.rows[rid].update(old_vals)
            undo.append(undo_update)
        for rid in matched:
            table.rows[rid].update(op.set_values)
        return Applied(rows_changed=len(matched))

    assert isinstance(op, Delete)
    reason = _check_where(table, op.where)
    if reason is not None:
        return Rejected(reason)
    matched = _match_rows(table, op.where)
    removed = [(rid, table.rows.pop(rid)) for rid in matched]
    if undo is not None:
        def undo_delete() -> None:
            for rid, vals in removed:
                table.rows[rid] = vals
        undo.append(undo_delete)
    return Applied(rows_changed=len(removed))


def apply_op(store: TableStore, tx: Transaction) -> ApplyResult:
    """Apply one signature-valid transaction; total and deterministic.

    A rejected transaction leaves the store byte-identical, including the
    account sequence (rejects do not consume a seq).
    """
    undo = store._overlay._undo if store._overlay is not None else None
    expected = store.account_seq.get(tx.account, 0) + 1
    if tx.seq != expected:
        return Rejected(REJECT_BAD_SEQ)
    result = _apply_checked(store, tx, undo)
    if result.ok:
        had_entry = tx.account in store.account_seq
        store.account_seq[tx.account] = tx.seq
        if undo is not None:
            def undo_seq() -> None:
                if had_entry:
                    store.account_seq[tx.account] = tx.seq - 1
                else:
                    store.account_seq.pop(tx.account)
            undo.append(undo_seq)
        if store._overlay is not None:
            store._overlay.tx_ids.append(tx.tx_id)
    return result


def apply_ledger(store: TableStore, ledger: Ledger) -> list:
    """Apply a validated ledger's txs in canonical order; returns per-tx results."""
    if store._overlay is not None:
        raise OverlayError("cannot apply a ledger with an active overlay")
    if ledger.seq != store.applied_ledger_seq + 1:
        raise OutOfOrderLedgerError(
            f"ledger seq {ledger.seq}, store at {store.applied_ledger_seq}"
        )
    results = [apply_op(store, tx) for tx in ledger.txs]
    store.applied_ledger_seq = ledger.seq
    return results


def replay_chain(ledgers: list, check_state: bool = True) -> TableStore:
    """Rebuild a store from a chain starting at genesis (the audit path)."""
    check = verify_chain(ledgers)
    if not check:
        raise ValueError(f"chain does not verify: {check}")
    store = TableStore()
    genesis = ledgers[0]
    if check_state and genesis.header.state_hash != state_hash(store):
        raise ValueError("genesis state hash does not match the empty store")
    for ledger in ledgers[1:]:
        apply_ledger(store, ledger)
        if check_state and ledger.header.state_hash != state_hash(store):
            raise ValueError(f"state hash mismatch after ledger {ledger.seq}")
    return store


# ---------------------------------------------------------------------------
# Pending overlay
# ---------------------------------------------------------------------------


def begin_pending(store: TableStore) -> PendingOverlay:
    if store._overlay is not None:
        raise OverlayError("an overlay is already active")
    overlay = PendingOverlay(store, state_hash(store))
    store._overlay = overlay
    return overlay


def commit_pending(store: TableStore) -> list:
    """Fold tentative ops into the base; returns the tx_ids that were applied."""
    overlay = store._overlay
    if overlay is None:
        raise OverlayError("no active overlay to commit")
    store._overlay = None
    return list(overlay.tx_ids)


def rollback_pending(store: TableStore) -> None:
    """Undo every tentative op; the store returns to base_state_hash exactly."""
    overlay = store._overlay
    if overlay is None:
        raise OverlayError("no active overlay to roll back")
    for undo in reversed(overlay._undo):
        undo()
    store._overlay = None
    restored = state_hash(store)
    if restored != overlay.base_state_hash:
        raise AssertionError("rollback failed to restore the base state")


# ---------------------------------------------------------------------------
# Read path
# ---------------------------------------------------------------------------


def query_select(
    store: TableStore, table: str, where: tuple, as_account: AccountId
) -> list:
    """Rows matching all equality predicates, ordered by row_id. Pure read."""
    t = store.tables.get(table)
    if t is None:
        raise QueryError(REJECT_NO_SUCH_TABLE, table)
    if not t.holds_perm(as_account, Perm.SELECT):
        raise QueryError(REJECT_PERMISSION_DENIED, table)
    reason = _check_where(t, tuple(where))
    if reason is not None:
        raise QueryError(reason, table)
    return [Row(rid, dict(t.rows[rid])) for rid in _match_rows(t, tuple(where))]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Checkpoint:
    ledger_seq: int
    snapshot: bytes
    snapshot_hash: bytes  # content state hash at ledger_seq


CHECKPOINT_FILE_FMT = "ckpt_{seq}.snap"


def make_checkpoint(store: TableStore) -> Checkpoint:
    if store._overlay is not None:
        raise OverlayError("cannot checkpoint with an active overlay")
    return Checkpoint(store.applied_ledger_seq, serialize_store(store), state_hash(store))


def restore_checkpoint(cp: Checkpoint) -> TableStore:
    try:
        store = deserialize_store(cp.snapshot)
    except CodecError as exc:
        raise CorruptCheckpointError(f"snapshot does not parse: {exc}") from None
    if state_hash(store) != cp.snapshot_hash:
        raise CorruptCheckpointError("snapshot hash mismatch")
    if store.applied_ledger_seq != cp.ledger_seq:
        raise CorruptCheckpointError(
            f"snapshot applied seq {store.applied_ledger_seq} != checkpoint seq {cp.ledger_seq}"
        )
    return store


def write_checkpoint_file(data_dir: Path, cp: Checkpoint) -> Path:
    path = Path(data_dir) / CHECKPOINT_FILE_FMT.format(seq=cp.ledger_seq)
    path.write_bytes(cp.snapshot_hash.hex().encode("ascii") + b"\n" + cp.snapshot)
    return path


def read_checkpoint_file(path: Path) -> Checkpoint:
    path = Path(path)
    name = path.name
    if not (name.startswith("ckpt_") and name.endswith(".snap")):
        raise CorruptCheckpointError(f"not a checkpoint file name: {name}")
    try:
        seq = int(name[len("ckpt_"):-len(".snap")])
    except ValueError:
        raise CorruptCheckpointError(f"bad checkpoint seq in name: {name}") from None
    data = path.read_bytes()
    nl = data.find(b"\n")
    if nl != 2 * HASH_LEN:
        raise CorruptCheckpointError("malformed snapshot hash line")
    try:
        digest = bytes.fromhex(data[:nl].decode("ascii"))
    except (UnicodeDecodeError, ValueError):
        raise CorruptCheckpointError("malformed snapshot hash line") from None
    return Checkpoint(seq, data[nl + 1:], digest)


def latest_checkpoint_path(data_dir: Path) -> Optional[Path]:
    best: Optional[Path] = None
    best_seq = -1
    for path in Path(data_dir).glob("ckpt_*.snap"):
        try:
            seq = int(path.name[len("ckpt_"):-len(".snap")])
        except ValueError:
            continue
        if seq > best_seq:
            best, best_seq = path, seq
    return best
