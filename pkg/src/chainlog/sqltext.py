"""Text form of the recorded operations: a small SQL dialect.

Supported statements:

    CREATE TABLE t (col INT, col TEXT, ...)
    DROP TABLE t
    INSERT INTO t (col, ...) VALUES (lit, ...)
    UPDATE t SET col = lit, ... [WHERE col = lit AND ...]
    DELETE FROM t [WHERE col = lit AND ...]
    SELECT * FROM t [WHERE col = lit AND ...]
    GRANT perm, ... ON t TO account

Keywords are case-insensitive; identifiers are case-sensitive. TEXT literals
are single-quoted with '' escaping the quote. Accounts are written either as
a 20-byte hex blob ``X'<40 hex digits>'`` or as a quoted label, which derives
a deterministic test account. A single trailing semicolon is tolerated.

``parse_sql`` and ``print_sql`` are inverses over the supported shapes:
printing any operation and reparsing it yields an equal value. Anything
outside the grammar fails with a named construct and a 1-based character
position, never a generic crash.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

from . import ledger as lgr
from . import signing
from .ledger import AccountId, ColumnType, Perm, SqlOperation
from .node import SelectQuery

Statement = Union[SqlOperation, SelectQuery]


class SqlSyntaxError(ValueError):
    """Parse failure; ``pos`` is a 1-based character offset into the input."""

    def __init__(self, message: str, pos: int) -> None:
        super().__init__(f"{message} (at position {pos})")
        self.message = message
        self.pos = pos


# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<blob>[Xx]'(?:[0-9A-Fa-f]*)')
  | (?P<string>'(?:[^']|'')*')
  | (?P<int>-?\d+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>[(),=*;])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str  # "blob" | "string" | "int" | "ident" | "punct" | "eof"
    text: str
    pos: int  # 1-based character position


def _tokenize(text: str) -> List[Token]:
    tokens: List[Token] = []
    i = 0
    while i < len(text):
        m = _TOKEN_RE.match(text, i)
        if m is None:
            if text[i] == "'":
                raise SqlSyntaxError("unterminated string literal", i + 1)
            raise SqlSyntaxError(f"unexpected character {text[i]!r}", i + 1)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append(Token(kind, m.group(), i + 1))
        i = m.end()
    tokens.append(Token("eof", "", len(text) + 1))
    return tokens


_KEYWORD_PERMS = {p.name: p for p in Perm}
_KEYWORD_TYPES = {t.name: t for t in ColumnType}


class _Parser:
    def __init__(self, text: str) -> None:
        self.tokens = _tokenize(text)
        self.i = 0

    # -- cursor helpers ------------------------------------------------------

    def peek(self) -> Token:
        return self.tokens[self.i]

    def next(self) -> Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def at_keyword(self, word: str) -> bool:
        tok = self.peek()
        return tok.kind == "ident" and tok.text.upper() == word

    def expect_keyword(self, word: str) -> Token:
        tok = self.next()
        if tok.kind != "ident" or tok.text.upper() != word:
            raise SqlSyntaxError(f"expected {word}, found {tok.text or 'end of input'!r}", tok.pos)
        return tok

    def expect_punct(self, ch: str) -> Token:
        tok = self.next()
        if tok.kind != "punct" or tok.text != ch:
            raise SqlSyntaxError(f"expected {ch!r}, found {tok.text or 'end of input'!r}", tok.pos)
        return tok

    def expect_name(self, what: str) -> str:
        tok = self.next()
        if tok.kind != "ident":
            raise SqlSyntaxError(f"expected {what} name, found {tok.text or 'end of input'!r}", tok.pos)
        if len(tok.text) > lgr.MAX_NAME_LEN:
            raise SqlSyntaxError(f"{what} name too long ({len(tok.text)} chars)", tok.pos)
        return tok.text

    # -- terminals ------------------------------------------------------------

    def literal(self) -> lgr.Literal:
        tok = self.next()
        if tok.kind == "int":
            value = int(tok.text)
        elif tok.kind == "string":
            value = _unquote(tok.text)
        else:
            raise SqlSyntaxError(
                f"expected a literal, found {tok.text or 'end of input'!r}", tok.pos
            )
        try:
            return lgr.check_literal(value)
        except ValueError as exc:
            raise SqlSyntaxError(str(exc), tok.pos) from None

    def account(self) -> AccountId:
        tok = self.next()
        if tok.kind == "blob":
            digits = tok.text[2:-1]
            if len(digits) != 2 * lgr.ACCOUNT_LEN:
                raise SqlSyntaxError(
                    f"account blob must be {2 * lgr.ACCOUNT_LEN} hex digits, got {len(digits)}",
                    tok.pos,
                )
            return AccountId(bytes.fromhex(digits))
        if tok.kind == "string":
            label = _unquote(tok.text)
            keypair = signing.account_keypair(label)
            return AccountId.from_public_key(keypair.public_key)
        raise SqlSyntaxError(
            f"expected an account (X'..hex..' or 'label'), found {tok.text or 'end of input'!r}",
            tok.pos,
        )

    def where_clause(self) -> Tuple[Tuple[str, lgr.Literal], ...]:
        """Optional WHERE col = lit AND ... ; absent clause means all rows."""
        if not self.at_keyword("WHERE"):
            return ()
        self.next()
        conds = []
        while True:
            col = self.expect_name("column")
            self.expect_punct("=")
            conds.append((col, self.literal()))
            if self.at_keyword("AND"):
                self.next()
                continue
            return tuple(conds)

    # -- statements ------------------------------------------------------------

    def statement(self) -> Statement:
        tok = self.peek()
        if tok.kind != "ident":
            raise SqlSyntaxError(
                f"expected a statement keyword, found {tok.text or 'end of input'!r}", tok.pos
            )
        word = tok.text.upper()
        if word == "CREATE":
            return self._create()
        if word == "DROP":
            return self._drop()
        if word == "INSERT":
            return self._insert()
        if word == "UPDATE":
            return self._update()
        if word == "DELETE":
            return self._delete()
        if word == "SELECT":
            return self._select()
        if word == "GRANT":
            return self._grant()
        raise SqlSyntaxError(f"unsupported statement {tok.text!r}", tok.pos)

    def _create(self) -> lgr.CreateTable:
        self.expect_keyword("CREATE")
        self.expect_keyword("TABLE")
        table = self.expect_name("table")
        self.expect_punct("(")
        columns = []
        while True:
            col = self.expect_name("column")
            tok = self.next()
            col_type = _KEYWORD_TYPES.get(tok.text.upper()) if tok.kind == "ident" else None
            if col_type is None:
                raise SqlSyntaxError(
                    f"unknown column type {tok.text or 'end of input'!r} (INT or TEXT)", tok.pos
                )
            columns.append((col, col_type))
            tok = self.next()
            if tok.kind == "punct" and tok.text == ",":
                continue
            if tok.kind == "punct" and tok.text == ")":
                break
            raise SqlSyntaxError(f"expected ',' or ')', found {tok.text or 'end of input'!r}", tok.pos)
        return self._finish(lgr.CreateTable, table=table, columns=tuple(columns))

    def _drop(self) -> lgr.DropTable:
        self.expect_keyword("DROP")
        self.expect_keyword("TABLE")
        table = self.expect_name("table")
        return self._finish(lgr.DropTable, table=table)

    def _insert(self) -> lgr.Insert:
        self.expect_keyword("INSERT")
        self.expect_keyword("INTO")
        table = self.expect_name("table")
        self.expect_punct("(")
        columns = []
        while True:
            columns.append(self.expect_name("column"))
            tok = self.next()
            if tok.kind == "punct" and tok.text == ",":
                continue
            if tok.kind == "punct" and tok.text == ")":
                break
            raise SqlSyntaxError(f"expected ',' or ')', found {tok.text or 'end of input'!r}", tok.pos)
        values_tok = self.expect_keyword("VALUES")
        self.expect_punct("(")
        values = []
        while True:
            values.append(self.literal())
            tok = self.next()
            if tok.kind == "punct" and tok.text == ",":
                continue
            if tok.kind == "punct" and tok.text == ")":
                break
            raise SqlSyntaxError(f"expected ',' or ')', found {tok.text or 'end of input'!r}", tok.pos)
        if len(columns) != len(values):
            raise SqlSyntaxError(
                f"{len(columns)} columns but {len(values)} values", values_tok.pos
            )
        if len(set(columns)) != len(columns):
            raise SqlSyntaxError("duplicate column in INSERT list", values_tok.pos)
        return self._finish(lgr.Insert, table=table, values=dict(zip(columns, values)))

    def _update(self) -> lgr.Update:
        self.expect_keyword("UPDATE")
        table = self.expect_name("table")
        set_tok = self.expect_keyword("SET")
        assignments = {}
        while True:
            col = self.expect_name("column")
            self.expect_punct("=")
            if col in assignments:
                raise SqlSyntaxError(f"duplicate column {col!r} in SET", set_tok.pos)
            assignments[col] = self.literal()
            if self.peek().kind == "punct" and self.peek().text == ",":
                self.next()
                continue
            break
        where = self.where_clause()
        return self._finish(lgr.Update, table=table, where=where, set_values=assignments)

    def _delete(self) -> lgr.Delete:
        self.expect_keyword("DELETE")
        self.expect_keyword("FROM")
        table = self.expect_name("table")
        where = self.where_clause()
        return self._finish(lgr.Delete, table=table, where=where)

    def _select(self) -> SelectQuery:
        self.expect_keyword("SELECT")
        tok = self.next()
        if not (tok.kind == "punct" and tok.text == "*"):
            raise SqlSyntaxError(
                f"unsupported projection {tok.text or 'end of input'!r}; only SELECT * is supported",
                tok.pos,
            )
        self.expect_keyword("FROM")
        table = self.expect_name("table")
        where = self.where_clause()
        self._end()
        return SelectQuery(table, where)

    def _grant(self) -> lgr.Grant:
        self.expect_keyword("GRANT")
        perms = set()
        while True:
            tok = self.next()
            perm = _KEYWORD_PERMS.get(tok.text.upper()) if tok.kind == "ident" else None
            if perm is None:
                raise SqlSyntaxError(
                    f"unknown permission {tok.text or 'end of input'!r} "
                    "(SELECT, INSERT, UPDATE, DELETE)",
                    tok.pos,
                )
            perms.add(perm)
            if self.peek().kind == "punct" and self.peek().text == ",":
                self.next()
                continue
            break
        self.expect_keyword("ON")
        table = self.expect_name("table")
        self.expect_keyword("TO")
        grantee = self.account()
        return self._finish(lgr.Grant, table=table, grantee=grantee, perms=frozenset(perms))

    def _finish(self, op_cls, **kwargs):
        self._end()
        try:
            return op_cls(**kwargs)
        except ValueError as exc:
            raise SqlSyntaxError(str(exc), 1) from None

    def _end(self) -> None:
        if self.peek().kind == "punct" and self.peek().text == ";":
            self.next()
        tok = self.peek()
        if tok.kind != "eof":
            raise SqlSyntaxError(f"unexpected trailing input {tok.text!r}", tok.pos)


def _unquote(token_text: str) -> str:
    return token_text[1:-1].replace("''", "'")


def parse_sql(text: str) -> Statement:
    """Parse one statement; raises SqlSyntaxError with a 1-based position."""
    if not text or not text.strip():
        raise SqlSyntaxError("empty statement", 1)
    return _Parser(text).statement()


# ---------------------------------------------------------------------------
# Pretty printer (the inverse of parse_sql up to value equality)
# ---------------------------------------------------------------------------


def _print_literal(value: lgr.Literal) -> str:
    if isinstance(value, str):
        return "'" + value.replace("'", "''") + "'"
    return str(value)


def _print_where(where: tuple) -> str:
    if not where:
        return ""
    return " WHERE " + " AND ".join(f"{col} = {_print_literal(v)}" for col, v in where)


_PERM_ORDER = (Perm.SELECT, Perm.INSERT, Perm.UPDATE, Perm.DELETE)


def print_sql(stmt: Statement) -> str:
    if isinstance(stmt, lgr.CreateTable):
        cols = ", ".join(f"{name} {ctype.name}" for name, ctype in stmt.columns)
        return f"CREATE TABLE {stmt.table} ({cols})"
    if isinstance(stmt, lgr.DropTable):
        return f"DROP TABLE {stmt.table}"
    if isinstance(stmt, lgr.Insert):
        cols = ", ".join(stmt.values)
        vals = ", ".join(_print_literal(v) for v in stmt.values.values())
        return f"INSERT INTO {stmt.table} ({cols}) VALUES ({vals})"
    if isinstance(stmt, lgr.Update):
        sets = ", ".join(f"{c} = {_print_literal(v)}" for c, v in stmt.set_values.items())
        return f"UPDATE {stmt.table} SET {sets}{_print_where(stmt.where)}"
    if isinstance(stmt, lgr.Delete):
        return f"DELETE FROM {stmt.table}{_print_where(stmt.where)}"
    if isinstance(stmt, SelectQuery):
        return f"SELECT * FROM {stmt.table}{_print_where(stmt.where)}"
    if isinstance(stmt, lgr.Grant):
        perms = ", ".join(p.name for p in _PERM_ORDER if p in stmt.perms)
        return f"GRANT {perms} ON {stmt.table} TO X'{stmt.grantee.id.hex()}'"
    raise TypeError(f"not a printable statement: {stmt!r}")
