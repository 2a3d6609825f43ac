"""WHILE-language front end and crisp reference interpreter.

Concrete syntax::

    prog = WHILE xN != 0 DO prog END
         | prog prog                 (newline or ';' separated)
         | xN := xM                  (N != M)
         | xN := xN + 1
         | xN := xN - 1

``//`` starts a comment that runs to the end of the line.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass
from typing import Iterator, Mapping, Union

DEFAULT_ITERATION_CAP = 1_000_000


class ParseError(SyntaxError):
    """Grammar violation with a 1-based source position."""

    def __init__(self, message: str, line: int, column: int) -> None:
        super().__init__(f"{line}:{column}: {message}")
        self.message = message
        self.line = line
        self.column = column


class NonTermination(RuntimeError):
    """The crisp interpreter exceeded its iteration cap."""

    def __init__(self, cap: int, env: dict[int, float]) -> None:
        super().__init__(f"iteration cap of {cap} loop entries exceeded")
        self.cap = cap
        self.env = env


@dataclass(frozen=True)
class Assign:
    dst: int
    src: int


@dataclass(frozen=True)
class Inc:
    var: int


@dataclass(frozen=True)
class Dec:
    var: int


@dataclass(frozen=True)
class Seq:
    first: "Statement"
    second: "Statement"


@dataclass(frozen=True)
class While:
    cond: int
    body: "Statement"


Statement = Union[Assign, Inc, Dec, Seq, While]


@dataclass(frozen=True)
class Program:
    root: Statement

    def statements(self) -> list[Statement]:
        """Simple statements (Assign/Inc/Dec) in source order."""
        return [s for s in walk(self.root) if isinstance(s, (Assign, Inc, Dec))]

    def loops(self) -> list[While]:
        return [s for s in walk(self.root) if isinstance(s, While)]

    def variables(self) -> set[int]:
        out = set()
        for s in walk(self.root):
            if isinstance(s, Assign):
                out.update((s.dst, s.src))
            elif isinstance(s, (Inc, Dec)):
                out.add(s.var)
            elif isinstance(s, While):
                out.add(s.cond)
        return out


def walk(stmt: Statement) -> Iterator[Statement]:
    """Pre-order traversal; a loop precedes its body."""
    yield stmt
    if isinstance(stmt, Seq):
        yield from walk(stmt.first)
        yield from walk(stmt.second)
    elif isinstance(stmt, While):
        yield from walk(stmt.body)


def sequence(stmts: list[Statement]) -> Statement:
    """Right-nested Seq of ``stmts`` (which must be non-empty)."""
    out = stmts[-1]
    for s in reversed(stmts[:-1]):
        out = Seq(s, out)
    return out


def flatten(stmt: Statement) -> list[Statement]:
    if isinstance(stmt, Seq):
        return flatten(stmt.first) + flatten(stmt.second)
    return [stmt]


# --------------------------------------------------------------------------
# lexer

_TOKEN_RE = re.compile(
    r"""
    (?P<comment>//[^\n]*)
  | (?P<newline>\n)
  | (?P<ws>[ \t\r]+)
  | (?P<semi>;)
  | (?P<assign>:=)
  | (?P<ne>!=)
  | (?P<plus>\+)
  | (?P<minus>-)
  | (?P<number>[0-9]+)
  | (?P<word>[A-Za-z_][A-Za-z_0-9]*)
    """,
    re.VERBOSE,
)

_KEYWORDS = {"WHILE", "DO", "END"}
_VAR_RE = re.compile(r"x(0|[1-9][0-9]*)\Z")


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    line: int
    column: int


def tokenize(source: str) -> list[Token]:
    tokens: list[Token] = []
    line, line_start, pos = 1, 0, 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        col = pos - line_start + 1
        if m is None:
            raise ParseError(f"unexpected character {source[pos]!r}", line, col)
        kind = m.lastgroup
        text = m.group()
        if kind in ("newline", "semi"):
            tokens.append(Token("sep", text, line, col))
        elif kind == "word":
            if text in _KEYWORDS:
                tokens.append(Token(text, text, line, col))
            elif _VAR_RE.match(text):
                tokens.append(Token("var", text, line, col))
            else:
                raise ParseError(f"malformed variable name {text!r}", line, col)
        elif kind not in ("comment", "ws"):
            tokens.append(Token(kind, text, line, col))
        if kind == "newline":
            line += 1
            line_start = m.end()
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


# --------------------------------------------------------------------------
# parser


class _Parser:
    def __init__(self, tokens: list[Token]) -> None:
        self.tokens = tokens
        self.pos = 0

    @property
    def tok(self) -> Token:
        return self.tokens[self.pos]

    def error(self, message: str, tok: Token | None = None) -> ParseError:
        tok = tok or self.tok
        return ParseError(message, tok.line, tok.column)

    def expect(self, kind: str, what: str | None = None) -> Token:
        tok = self.tok
        if tok.kind != kind:
            found = "end of input" if tok.kind == "eof" else repr(tok.text)
            raise self.error(f"expected {what or kind}, found {found}")
        self.pos += 1
        return tok

    def skip_separators(self) -> None:
        while self.tok.kind == "sep":
            self.pos += 1

    def block(self, terminators: tuple[str, ...]) -> Statement:
        stmts: list[Statement] = []
        self.skip_separators()
        while self.tok.kind not in terminators:
            stmts.append(self.statement())
            if self.tok.kind not in terminators:
                if self.tok.kind != "sep":
                    raise self.error(f"expected end of statement, found {self.tok.text!r}")
                self.skip_separators()
        if not stmts:
            if self.tok.kind == "END":
                raise self.error("empty loop body")
            raise self.error("empty program")
        return sequence(stmts)

    def statement(self) -> Statement:
        tok = self.tok
        if tok.kind == "WHILE":
            self.pos += 1
            cond = _var_index(self.expect("var", "a variable"))
            self.expect("ne", "'!='")
            zero = self.expect("number", "'0'")
            if zero.text != "0":
                raise self.error("loop conditions must compare against 0", zero)
            self.expect("DO", "DO")
            body = self.block(("END", "eof"))
            if self.tok.kind != "END":
                raise self.error(f"WHILE opened at {tok.line}:{tok.column} has no matching END")
            self.pos += 1
            return While(cond, body)
        if tok.kind == "var":
            return self.simple()
        if tok.kind in ("END", "DO"):
            raise self.error(f"unbalanced {tok.kind}")
        raise self.error(f"unexpected token {tok.text!r}")

    def simple(self) -> Statement:
        dst_tok = self.expect("var")
        self.expect("assign", "':='")
        src_tok = self.expect("var", "a variable")
        dst, src = _var_index(dst_tok), _var_index(src_tok)
        if self.tok.kind in ("plus", "minus"):
            op = self.tok
            self.pos += 1
            one = self.expect("number", "'1'")
            if one.text != "1":
                raise self.error("only +1 and -1 are allowed", one)
            if dst != src:
                raise self.error(
                    "increment/decrement needs the same variable on both sides", src_tok
                )
            return Inc(dst) if op.kind == "plus" else Dec(dst)
        if dst == src:
            raise self.error("assignment needs different variables on both sides", src_tok)
        return Assign(dst, src)


def _var_index(tok: Token) -> int:
    return int(tok.text[1:])


def parse(source: str) -> Program:
    """Parse WHILE source text into a :class:`Program`.

    Raises :class:`ParseError` carrying line and column on any grammar
    violation.
    """
    parser = _Parser(tokenize(source))
    root = parser.block(("eof", "END"))
    if parser.tok.kind == "END":
        raise parser.error("unbalanced END")
    return Program(root)


# --------------------------------------------------------------------------
# formatter


def format_program(program: Program | Statement, indent: str = "    ") -> str:
    """Canonical source text; ``parse(format_program(p)) == p``."""
    root = program.root if isinstance(program, Program) else program
    lines: list[str] = []
    _format(root, 0, indent, lines)
    return "\n".join(lines) + "\n"


def _format(stmt: Statement, depth: int, indent: str, lines: list[str]) -> None:
    pad = indent * depth
    if isinstance(stmt, Seq):
        # Seq nesting is not visible in the text; parse() rebuilds it
        # right-nested, so left-nested input is normalized here.
        for s in flatten(stmt):
            _format(s, depth, indent, lines)
    elif isinstance(stmt, While):
        lines.append(f"{pad}WHILE x{stmt.cond} != 0 DO")
        _format(stmt.body, depth + 1, indent, lines)
        lines.append(f"{pad}END")
    elif isinstance(stmt, Assign):
        lines.append(f"{pad}x{stmt.dst} := x{stmt.src}")
    elif isinstance(stmt, Inc):
        lines.append(f"{pad}x{stmt.var} := x{stmt.var} + 1")
    elif isinstance(stmt, Dec):
        lines.append(f"{pad}x{stmt.var} := x{stmt.var} - 1")
    else:
        raise TypeError(f"not a statement: {stmt!r}")


def normalize(stmt: Statement) -> Statement:
    """Right-nest every Seq, which is the shape parse() produces."""
    if isinstance(stmt, Seq):
        return sequence([normalize(s) for s in flatten(stmt)])
    if isinstance(stmt, While):
        return While(stmt.cond, normalize(stmt.body))
    return stmt


# --------------------------------------------------------------------------
# crisp interpreter


def parse_inputs(inputs: Mapping) -> dict[int, float]:
    """Accept ``{"x1": 3}`` or ``{1: 3}`` style bindings."""
    out: dict[int, float] = {}
    for k, v in inputs.items():
        if isinstance(k, str):
            if not _VAR_RE.match(k):
                raise ValueError(f"invalid variable name {k!r}")
            k = int(k[1:])
        out[int(k)] = float(v)
    return out


def run_discrete(
    program: Program, inputs: Mapping, iteration_cap: int = DEFAULT_ITERATION_CAP
) -> dict[int, float]:
    """Execute ``program`` with crisp semantics.

    Returns the final environment (variable index -> value) holding x0,
    every program variable and every input; unset variables are 0.  Raises
    :class:`NonTermination` once more than ``iteration_cap`` loop iterations
    have been entered in total.
    """
    env = {k: 0.0 for k in sorted(program.variables() | {0})}
    env.update(parse_inputs(inputs))
    if any(v != int(v) for v in env.values()):
        warnings.warn(
            "non-integer inputs: crisp WHILE semantics may not terminate", stacklevel=2
        )
    budget = [iteration_cap]
    _exec(program.root, env, budget, iteration_cap)
    return env


def _exec(stmt: Statement, env: dict[int, float], budget: list[int], cap: int) -> None:
    if isinstance(stmt, Seq):
        _exec(stmt.first, env, budget, cap)
        _exec(stmt.second, env, budget, cap)
    elif isinstance(stmt, Assign):
        env[stmt.dst] = env.get(stmt.src, 0.0)
    elif isinstance(stmt, Inc):
        env[stmt.var] = env.get(stmt.var, 0.0) + 1
    elif isinstance(stmt, Dec):
        env[stmt.var] = env.get(stmt.var, 0.0) - 1
    elif isinstance(stmt, While):
        while env.get(stmt.cond, 0.0) != 0:
            budget[0] -= 1
            if budget[0] < 0:
                raise NonTermination(cap, dict(env))
            _exec(stmt.body, env, budget, cap)
    else:
        raise TypeError(f"not a statement: {stmt!r}")


MULTIPLICATION_SOURCE = """\
WHILE x2 != 0 DO
    x3 := x1
    WHILE x3 != 0 DO
        x0 := x0 + 1
        x3 := x3 - 1
    END
    x2 := x2 - 1
END
"""
