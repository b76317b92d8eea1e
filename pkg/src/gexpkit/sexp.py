"""S-expression values, reader, canonical printer, and content digests.

The value space is small and fixed: symbols, strings, signed 64-bit
integers, booleans, keywords (``#:name``), and proper lists.  Reading
and canonical printing are exact inverses over this space, and every
content hash in the system is taken over canonical text, so the
printed format must never change.

Reader shorthand expands to plain list forms::

    'x    (quote x)            #~x   (gexp x)
    `x    (quasiquote x)       #$x   (ungexp x)
    ,x    (unquote x)          #$@x  (ungexp-splicing x)
    ,@x   (unquote-splicing x) #+x   (ungexp-native x)
                               #+@x  (ungexp-native-splicing x)

Comments run from ``;`` to end of line and are discarded: two sources
differing only in comments or whitespace read to equal values and
therefore hash identically.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1

_DELIMITERS = set(" \t\n\r()\";'`,")
_INTEGER_RE = re.compile(r"[+-]?[0-9]+\Z")

# Accepted on input only; the canonical printer emits these characters
# raw and escapes nothing but the quote and the backslash.
_STRING_ESCAPES = {"n": "\n", "t": "\t", "r": "\r"}


class ParseError(Exception):
    """Malformed input; carries the 1-based line and column."""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class Sexp:
    """Base class for the six value kinds."""


def symbol_text_ok(text: str) -> bool:
    """True when *text* survives a print/read round trip as a symbol."""
    if not text or text.startswith("#"):
        return False
    if any(c in _DELIMITERS for c in text):
        return False
    head = text[1:] if text[0] in "+-" else text
    # Digit-leading tokens always lex as numbers, never as symbols.
    if head and head[:1].isdigit():
        return False
    return True


@dataclass(frozen=True)
class Symbol(Sexp):
    name: str

    def __post_init__(self):
        if not symbol_text_ok(self.name):
            raise ValueError(f"invalid symbol text: {self.name!r}")


@dataclass(frozen=True)
class String(Sexp):
    value: str


@dataclass(frozen=True)
class Integer(Sexp):
    value: int

    def __post_init__(self):
        if type(self.value) is not int:
            raise ValueError(f"Integer wants an int, got {type(self.value).__name__}")
        if not INT64_MIN <= self.value <= INT64_MAX:
            raise ValueError(f"integer out of signed 64-bit range: {self.value}")


@dataclass(frozen=True)
class Boolean(Sexp):
    value: bool

    def __post_init__(self):
        if type(self.value) is not bool:
            raise ValueError("Boolean wants a bool")


@dataclass(frozen=True)
class Keyword(Sexp):
    name: str

    def __post_init__(self):
        if not self.name or any(c in _DELIMITERS for c in self.name):
            raise ValueError(f"invalid keyword text: {self.name!r}")


@dataclass(frozen=True)
class SList(Sexp):
    items: tuple[Sexp, ...]

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        for item in self.items:
            if not isinstance(item, Sexp):
                raise ValueError(f"list element is not a sexp: {item!r}")

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, index):
        return self.items[index]


def slist(*items: Sexp) -> SList:
    return SList(tuple(items))


_READER_PREFIXES = {
    "'": "quote",
    "`": "quasiquote",
}


class _Reader:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.line = 1
        self.col = 1

    def error(self, message, line=None, col=None):
        raise ParseError(message, self.line if line is None else line,
                         self.col if col is None else col)

    def at_eof(self):
        return self.pos >= len(self.text)

    def peek(self):
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def peek2(self):
        return self.text[self.pos + 1] if self.pos + 1 < len(self.text) else ""

    def advance(self):
        c = self.text[self.pos]
        self.pos += 1
        if c == "\n":
            self.line += 1
            self.col = 1
        else:
            self.col += 1
        return c

    def skip_blanks(self):
        while not self.at_eof():
            c = self.peek()
            if c in " \t\n\r":
                self.advance()
            elif c == ";":
                while not self.at_eof() and self.peek() != "\n":
                    self.advance()
            else:
                return

    def wrap(self, head: str) -> SList:
        return slist(Symbol(head), self.read_datum())

    def read_datum(self) -> Sexp:
        self.skip_blanks()
        if self.at_eof():
            self.error("unexpected end of input")
        c = self.peek()
        if c == "(":
            return self.read_list()
        if c == ")":
            self.error("unexpected )")
        if c == '"':
            return self.read_string()
        if c in _READER_PREFIXES:
            self.advance()
            return self.wrap(_READER_PREFIXES[c])
        if c == ",":
            self.advance()
            if self.peek() == "@":
                self.advance()
                return self.wrap("unquote-splicing")
            return self.wrap("unquote")
        if c == "#":
            nxt = self.peek2()
            if nxt == "~":
                self.advance()
                self.advance()
                return self.wrap("gexp")
            if nxt == "$":
                self.advance()
                self.advance()
                if self.peek() == "@":
                    self.advance()
                    return self.wrap("ungexp-splicing")
                return self.wrap("ungexp")
            if nxt == "+":
                self.advance()
                self.advance()
                if self.peek() == "@":
                    self.advance()
                    return self.wrap("ungexp-native-splicing")
                return self.wrap("ungexp-native")
        return self.read_token()

    def read_list(self) -> SList:
        open_line, open_col = self.line, self.col
        self.advance()
        items = []
        while True:
            self.skip_blanks()
            if self.at_eof():
                self.error("unterminated list", open_line, open_col)
            if self.peek() == ")":
                self.advance()
                return SList(tuple(items))
            items.append(self.read_datum())

    def read_string(self) -> String:
        open_line, open_col = self.line, self.col
        self.advance()
        chars = []
        while True:
            if self.at_eof():
                self.error("unterminated string", open_line, open_col)
            c = self.advance()
            if c == '"':
                return String("".join(chars))
            if c == "\\":
                if self.at_eof():
                    self.error("unterminated string", open_line, open_col)
                esc = self.advance()
                if esc in ('"', "\\"):
                    chars.append(esc)
                elif esc in _STRING_ESCAPES:
                    chars.append(_STRING_ESCAPES[esc])
                else:
                    self.error(f"unsupported string escape: \\{esc}")
            else:
                chars.append(c)

    def read_token(self) -> Sexp:
        start_line, start_col = self.line, self.col
        chars = []
        while not self.at_eof() and self.peek() not in _DELIMITERS:
            chars.append(self.advance())
        token = "".join(chars)
        if token == "#t":
            return Boolean(True)
        if token == "#f":
            return Boolean(False)
        if token.startswith("#:"):
            if len(token) == 2:
                self.error("empty keyword", start_line, start_col)
            return Keyword(token[2:])
        if token.startswith("#"):
            self.error(f"unsupported # syntax: {token}", start_line, start_col)
        if _INTEGER_RE.fullmatch(token):
            value = int(token)
            if not INT64_MIN <= value <= INT64_MAX:
                self.error(f"integer out of signed 64-bit range: {token}",
                           start_line, start_col)
            return Integer(value)
        head = token[1:] if token[0] in "+-" else token
        if head and head[:1].isdigit():
            self.error(f"invalid numeric literal: {token}", start_line, start_col)
        return Symbol(token)


def read(text: str) -> Sexp:
    """Parse exactly one datum.

    Anything beyond the datum other than whitespace and comments is an
    error; use read_all for form sequences.
    """
    reader = _Reader(text)
    datum = reader.read_datum()
    reader.skip_blanks()
    if not reader.at_eof():
        reader.error("trailing data after datum")
    return datum


def read_all(text: str) -> list[Sexp]:
    """Parse a whole file worth of data, in order."""
    reader = _Reader(text)
    out = []
    while True:
        reader.skip_blanks()
        if reader.at_eof():
            return out
        out.append(reader.read_datum())


def _print_into(value: Sexp, out: list[str]) -> None:
    if isinstance(value, SList):
        out.append("(")
        for i, item in enumerate(value.items):
            if i:
                out.append(" ")
            _print_into(item, out)
        out.append(")")
    elif isinstance(value, Symbol):
        out.append(value.name)
    elif isinstance(value, String):
        out.append('"')
        out.append(value.value.replace("\\", "\\\\").replace('"', '\\"'))
        out.append('"')
    elif isinstance(value, Integer):
        out.append(str(value.value))
    elif isinstance(value, Boolean):
        out.append("#t" if value.value else "#f")
    elif isinstance(value, Keyword):
        out.append("#:")
        out.append(value.name)
    else:
        raise TypeError(f"not a sexp: {value!r}")


def print_canonical(value: Sexp) -> str:
    """Render one datum on one line: single spaces, no abbreviations,
    strings escaped with \\\" and \\\\ only."""
    out: list[str] = []
    _print_into(value, out)
    return "".join(out)


@dataclass(frozen=True)
class Digest:
    """A SHA-256 digest (32 raw bytes)."""

    data: bytes

    def __post_init__(self):
        if len(self.data) != 32:
            raise ValueError("digest must be 32 bytes")

    @property
    def hex(self) -> str:
        return self.data.hex()


def sha256_digest(payload: bytes) -> Digest:
    return Digest(hashlib.sha256(payload).digest())


def hash_sexp(value: Sexp) -> Digest:
    """Digest of the UTF-8 canonical text of *value*."""
    return sha256_digest(print_canonical(value).encode("utf-8"))
