"""Embedded Lua interpreter (5.1-level subset).

A tree-walking interpreter covering the language baseline adaptation scripts
need: values (nil, booleans, numbers, strings, tables, functions), local and
multiple assignment, if/while/repeat/numeric and generic for, functions with
closures, varargs and multiple returns, method definitions and calls, the
standard operators with Lua coercion rules, metatables (__index, __newindex,
__call, __tostring) and pcall-style error handling.

The host loads modules into the global environment explicitly; nothing is
resolvable that was not provided (no io, no os). Statement execution polls an
optional interrupt callback so scripts stop cooperatively.

Not implemented (unneeded at this level): goto/labels, coroutine-based
generic-for iterators from the standard library beyond pairs/ipairs/next,
string patterns beyond plain find, and the full string.format verb set.
"""

from __future__ import annotations

import math
import threading
from typing import Any, Callable

LUA_NONE = object()  # marker distinct from Lua nil (None)


class LuaError(Exception):
    def __init__(self, value, line: int | None = None, traceback_hint: str = ""):
        self.value = value
        self.line = line
        message = lua_tostring(value)
        if line is not None:
            message = f"line {line}: {message}"
        if traceback_hint:
            message += f" ({traceback_hint})"
        super().__init__(message)


class ScriptInterrupted(LuaError):
    def __init__(self):
        super().__init__("script interrupted")


class LuaTable:
    __slots__ = ("hash", "metatable")

    def __init__(self, items: dict | None = None):
        self.hash: dict = dict(items or {})
        self.metatable: LuaTable | None = None

    def get(self, key):
        value = self.hash.get(normalize_key(key))
        if value is not None:
            return value
        if self.metatable is not None:
            index = self.metatable.hash.get("__index")
            if isinstance(index, LuaTable):
                return index.get(key)
            if callable(index) or isinstance(index, LuaFunction):
                return first(call_value(index, [self, key]))
        return None

    def set(self, key, value):
        if key is None:
            raise LuaError("table index is nil")
        if self.metatable is not None and normalize_key(key) not in self.hash:
            newindex = self.metatable.hash.get("__newindex")
            if newindex is not None:
                if isinstance(newindex, LuaTable):
                    newindex.set(key, value)
                    return
                call_value(newindex, [self, key, value])
                return
        key = normalize_key(key)
        if value is None:
            self.hash.pop(key, None)
        else:
            self.hash[key] = value

    def length(self) -> int:
        n = 0
        while (n + 1) in self.hash or float(n + 1) in self.hash:
            n += 1
        return n

    def __repr__(self):
        return f"table: 0x{id(self):x}"


def normalize_key(key):
    # Lua numbers are doubles; integral floats and ints index the same slot
    if isinstance(key, float) and key.is_integer():
        return int(key)
    if isinstance(key, bool):
        return key
    return key


class LuaFunction:
    __slots__ = ("params", "is_vararg", "body", "env", "name")

    def __init__(self, params, is_vararg, body, env, name="?"):
        self.params = params
        self.is_vararg = is_vararg
        self.body = body
        self.env = env
        self.name = name

    def __repr__(self):
        return f"function: {self.name}"


class Env:
    __slots__ = ("vars", "parent")

    def __init__(self, parent: "Env" | None = None):
        self.vars: dict[str, Any] = {}
        self.parent = parent

    def lookup(self, name: str):
        env = self
        while env is not None:
            if name in env.vars:
                return env.vars[name]
            env = env.parent
        return None

    def assign(self, name: str, value):
        env = self
        while env is not None:
            if name in env.vars:
                env.vars[name] = value
                return
            env = env.parent
        # undeclared: global scope
        root = self
        while root.parent is not None:
            root = root.parent
        root.vars[name] = value

    def declare(self, name: str, value):
        self.vars[name] = value


# -- lexer ---------------------------------------------------------------------

KEYWORDS = {
    "and", "break", "do", "else", "elseif", "end", "false", "for", "function",
    "if", "in", "local", "nil", "not", "or", "repeat", "return", "then",
    "true", "until", "while",
}

SYMBOLS = ["...", "..", "==", "~=", "<=", ">=", "<", ">", "=", "(", ")", "{", "}",
           "[", "]", ";", ":", ",", ".", "+", "-", "*", "/", "%", "^", "#"]


class Token:
    __slots__ = ("kind", "value", "line")

    def __init__(self, kind, value, line):
        self.kind = kind
        self.value = value
        self.line = line

    def __repr__(self):
        return f"{self.kind}:{self.value!r}@{self.line}"


def tokenize(source: str) -> list[Token]:
    tokens: list[Token] = []
    i = 0
    line = 1
    n = len(source)
    while i < n:
        c = source[i]
        if c == "\n":
            line += 1
            i += 1
            continue
        if c in " \t\r":
            i += 1
            continue
        if source.startswith("--", i):
            if source.startswith("--[[", i):
                end = source.find("]]", i + 4)
                if end < 0:
                    raise LuaError("unterminated long comment", line)
                line += source.count("\n", i, end)
                i = end + 2
                continue
            end = source.find("\n", i)
            i = n if end < 0 else end
            continue
        if source.startswith("[[", i):
            end = source.find("]]", i + 2)
            if end < 0:
                raise LuaError("unterminated long string", line)
            text = source[i + 2:end]
            if text.startswith("\n"):
                text = text[1:]
            tokens.append(Token("string", text, line))
            line += source.count("\n", i, end)
            i = end + 2
            continue
        if c in "\"'":
            quote = c
            i += 1
            out = []
            while i < n and source[i] != quote:
                ch = source[i]
                if ch == "\\":
                    i += 1
                    if i >= n:
                        break
                    esc = source[i]
                    mapping = {"n": "\n", "t": "\t", "r": "\r", "a": "\a", "b": "\b",
                               "f": "\f", "v": "\v", "\\": "\\", '"': '"', "'": "'", "\n": "\n"}
                    if esc in mapping:
                        out.append(mapping[esc])
                    elif esc.isdigit():
                        digits = esc
                        while len(digits) < 3 and i + 1 < n and source[i + 1].isdigit():
                            i += 1
                            digits += source[i]
                        out.append(chr(int(digits)))
                    else:
                        out.append(esc)
                    i += 1
                    continue
                if ch == "\n":
                    raise LuaError("unterminated string", line)
                out.append(ch)
                i += 1
            if i >= n:
                raise LuaError("unterminated string", line)
            i += 1
            tokens.append(Token("string", "".join(out), line))
            continue
        if c.isdigit() or (c == "." and i + 1 < n and source[i + 1].isdigit()):
            start = i
            if source.startswith("0x", i) or source.startswith("0X", i):
                i += 2
                while i < n and (source[i] in "0123456789abcdefABCDEF"):
                    i += 1
                tokens.append(Token("number", float(int(source[start:i], 16)), line))
                continue
            while i < n and (source[i].isdigit() or source[i] == "."):
                i += 1
            if i < n and source[i] in "eE":
                i += 1
                if i < n and source[i] in "+-":
                    i += 1
                while i < n and source[i].isdigit():
                    i += 1
            tokens.append(Token("number", float(source[start:i]), line))
            continue
        if c.isalpha() or c == "_":
            start = i
            while i < n and (source[i].isalnum() or source[i] == "_"):
                i += 1
            word = source[start:i]
            tokens.append(Token("keyword" if word in KEYWORDS else "name", word, line))
            continue
        for symbol in SYMBOLS:
            if source.startswith(symbol, i):
                tokens.append(Token("symbol", symbol, line))
                i += len(symbol)
                break
        else:
            raise LuaError(f"unexpected character {c!r}", line)
    tokens.append(Token("eof", None, line))
    return tokens


# -- parser -----------------------------------------------------------------------
# AST nodes are tuples: (kind, line, ...payload)


class Parser:
    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> Token:
        return self.tokens[self.pos]

    def next(self) -> Token:
        token = self.tokens[self.pos]
        self.pos += 1
        return token

    def check(self, kind, value=None) -> bool:
        token = self.peek()
        return token.kind == kind and (value is None or token.value == value)

    def accept(self, kind, value=None) -> Token | None:
        if self.check(kind, value):
            return self.next()
        return None

    def expect(self, kind, value=None) -> Token:
        token = self.next()
        if token.kind != kind or (value is not None and token.value != value):
            wanted = value or kind
            raise LuaError(f"expected {wanted!r}, got {token.value!r}", token.line)
        return token

    # blocks and statements

    def parse_chunk(self):
        body = self.parse_block()
        self.expect("eof")
        return body

    def parse_block(self, terminators=("eof",)):
        statements = []
        while True:
            token = self.peek()
            if token.kind == "eof":
                break
            if token.kind == "keyword" and token.value in ("end", "else", "elseif", "until"):
                break
            if self.accept("symbol", ";"):
                continue
            if token.kind == "keyword" and token.value == "return":
                self.next()
                exprs = []
                if not (self.peek().kind == "eof"
                        or (self.peek().kind == "keyword" and self.peek().value in ("end", "else", "elseif", "until"))
                        or self.check("symbol", ";")):
                    exprs = self.parse_exprlist()
                self.accept("symbol", ";")
                statements.append(("return", token.line, exprs))
                break
            statements.append(self.parse_statement())
        return statements

    def parse_statement(self):
        token = self.peek()
        line = token.line
        if token.kind == "keyword":
            if token.value == "local":
                self.next()
                if self.accept("keyword", "function"):
                    name = self.expect("name").value
                    func = self.parse_funcbody(line, name)
                    return ("localfunc", line, name, func)
                names = [self.expect("name").value]
                while self.accept("symbol", ","):
                    names.append(self.expect("name").value)
                exprs = []
                if self.accept("symbol", "="):
                    exprs = self.parse_exprlist()
                return ("local", line, names, exprs)
            if token.value == "if":
                self.next()
                branches = []
                cond = self.parse_expr()
                self.expect("keyword", "then")
                body = self.parse_block()
                branches.append((cond, body))
                while self.accept("keyword", "elseif"):
                    cond = self.parse_expr()
                    self.expect("keyword", "then")
                    branches.append((cond, self.parse_block()))
                else_body = None
                if self.accept("keyword", "else"):
                    else_body = self.parse_block()
                self.expect("keyword", "end")
                return ("if", line, branches, else_body)
            if token.value == "while":
                self.next()
                cond = self.parse_expr()
                self.expect("keyword", "do")
                body = self.parse_block()
                self.expect("keyword", "end")
                return ("while", line, cond, body)
            if token.value == "repeat":
                self.next()
                body = self.parse_block()
                self.expect("keyword", "until")
                cond = self.parse_expr()
                return ("repeat", line, body, cond)
            if token.value == "for":
                self.next()
                first_name = self.expect("name").value
                if self.accept("symbol", "="):
                    start = self.parse_expr()
                    self.expect("symbol", ",")
                    limit = self.parse_expr()
                    step = None
                    if self.accept("symbol", ","):
                        step = self.parse_expr()
                    self.expect("keyword", "do")
                    body = self.parse_block()
                    self.expect("keyword", "end")
                    return ("fornum", line, first_name, start, limit, step, body)
                names = [first_name]
                while self.accept("symbol", ","):
                    names.append(self.expect("name").value)
                self.expect("keyword", "in")
                exprs = self.parse_exprlist()
                self.expect("keyword", "do")
                body = self.parse_block()
                self.expect("keyword", "end")
                return ("forin", line, names, exprs, body)
            if token.value == "function":
                self.next()
                target = ("name", line, self.expect("name").value)
                is_method = False
                while True:
                    if self.accept("symbol", "."):
                        target = ("index", line, target, ("const", line, self.expect("name").value))
                        continue
                    if self.accept("symbol", ":"):
                        target = ("index", line, target, ("const", line, self.expect("name").value))
                        is_method = True
                    break
                func = self.parse_funcbody(line, "method" if is_method else "function", implicit_self=is_method)
                return ("assign", line, [target], [func])
            if token.value == "do":
                self.next()
                body = self.parse_block()
                self.expect("keyword", "end")
                return ("do", line, body)
            if token.value == "break":
                self.next()
                return ("break", line)
        # expression statement: call or assignment
        expr = self.parse_prefix_expr()
        if self.check("symbol", "=") or self.check("symbol", ","):
            targets = [expr]
            while self.accept("symbol", ","):
                targets.append(self.parse_prefix_expr())
            self.expect("symbol", "=")
            exprs = self.parse_exprlist()
            return ("assign", line, targets, exprs)
        if expr[0] not in ("call", "methodcall"):
            raise LuaError("syntax error: expression is not a statement", line)
        return ("exprstat", line, expr)

    def parse_funcbody(self, line, name, implicit_self=False):
        self.expect("symbol", "(")
        params = ["self"] if implicit_self else []
        is_vararg = False
        if not self.check("symbol", ")"):
            while True:
                if self.accept("symbol", "..."):
                    is_vararg = True
                    break
                params.append(self.expect("name").value)
                if not self.accept("symbol", ","):
                    break
        self.expect("symbol", ")")
        body = self.parse_block()
        self.expect("keyword", "end")
        return ("function", line, params, is_vararg, body, name)

    # expressions

    def parse_exprlist(self):
        exprs = [self.parse_expr()]
        while self.accept("symbol", ","):
            exprs.append(self.parse_expr())
        return exprs

    BINARY_PRECEDENCE = {
        "or": 1, "and": 2,
        "<": 3, ">": 3, "<=": 3, ">=": 3, "~=": 3, "==": 3,
        "..": 4, "+": 5, "-": 5, "*": 6, "/": 6, "%": 6,
        "^": 8,
    }
    RIGHT_ASSOC = {"..", "^"}
    UNARY_PRECEDENCE = 7

    def parse_expr(self, min_precedence=1):
        token = self.peek()
        line = token.line
        if token.kind == "keyword" and token.value == "not":
            self.next()
            operand = self.parse_expr(self.UNARY_PRECEDENCE)
            left = ("unop", line, "not", operand)
        elif token.kind == "symbol" and token.value == "-":
            self.next()
            operand = self.parse_expr(self.UNARY_PRECEDENCE)
            left = ("unop", line, "-", operand)
        elif token.kind == "symbol" and token.value == "#":
            self.next()
            operand = self.parse_expr(self.UNARY_PRECEDENCE)
            left = ("unop", line, "#", operand)
        else:
            left = self.parse_simple_expr()
        while True:
            token = self.peek()
            op = None
            if token.kind == "symbol" and token.value in self.BINARY_PRECEDENCE:
                op = token.value
            elif token.kind == "keyword" and token.value in ("and", "or"):
                op = token.value
            if op is None:
                return left
            precedence = self.BINARY_PRECEDENCE[op]
            if precedence < min_precedence:
                return left
            self.next()
            next_min = precedence if op in self.RIGHT_ASSOC else precedence + 1
            right = self.parse_expr(next_min)
            left = ("binop", token.line, op, left, right)

    def parse_simple_expr(self):
        token = self.peek()
        line = token.line
        if token.kind == "number":
            self.next()
            return ("const", line, token.value)
        if token.kind == "string":
            self.next()
            return ("const", line, token.value)
        if token.kind == "keyword" and token.value in ("nil", "true", "false"):
            self.next()
            return ("const", line, {"nil": None, "true": True, "false": False}[token.value])
        if token.kind == "symbol" and token.value == "...":
            self.next()
            return ("vararg", line)
        if token.kind == "keyword" and token.value == "function":
            self.next()
            return self.parse_funcbody(line, "anonymous")
        if token.kind == "symbol" and token.value == "{":
            return self.parse_table()
        return self.parse_prefix_expr()

    def parse_table(self):
        start = self.expect("symbol", "{")
        array_items = []
        hash_items = []
        while not self.check("symbol", "}"):
            if self.check("symbol", "["):
                self.next()
                key = self.parse_expr()
                self.expect("symbol", "]")
                self.expect("symbol", "=")
                hash_items.append((key, self.parse_expr()))
            elif self.peek().kind == "name" and self.tokens[self.pos + 1].kind == "symbol" \
                    and self.tokens[self.pos + 1].value == "=":
                name = self.next().value
                self.next()
                hash_items.append((("const", start.line, name), self.parse_expr()))
            else:
                array_items.append(self.parse_expr())
            if not (self.accept("symbol", ",") or self.accept("symbol", ";")):
                break
        self.expect("symbol", "}")
        return ("table", start.line, array_items, hash_items)

    def parse_prefix_expr(self):
        token = self.peek()
        line = token.line
        if self.accept("symbol", "("):
            inner = self.parse_expr()
            self.expect("symbol", ")")
            expr = ("paren", line, inner)
        else:
            name = self.expect("name")
            expr = ("name", name.line, name.value)
        while True:
            token = self.peek()
            if token.kind != "symbol":
                if token.kind == "string":  # f"literal" call sugar
                    self.next()
                    expr = ("call", token.line, expr, [("const", token.line, token.value)])
                    continue
                return expr
            if token.value == ".":
                self.next()
                key = self.expect("name").value
                expr = ("index", token.line, expr, ("const", token.line, key))
            elif token.value == "[":
                self.next()
                key = self.parse_expr()
                self.expect("symbol", "]")
                expr = ("index", token.line, expr, key)
            elif token.value == "(":
                self.next()
                args = [] if self.check("symbol", ")") else self.parse_exprlist()
                self.expect("symbol", ")")
                expr = ("call", token.line, expr, args)
            elif token.value == "{":
                table = self.parse_table()
                expr = ("call", token.line, expr, [table])
            elif token.value == ":":
                self.next()
                method = self.expect("name").value
                if self.check("string"):
                    string_token = self.next()
                    args = [("const", string_token.line, string_token.value)]
                elif self.check("symbol", "{"):
                    args = [self.parse_table()]
                else:
                    self.expect("symbol", "(")
                    args = [] if self.check("symbol", ")") else self.parse_exprlist()
                    self.expect("symbol", ")")
                expr = ("methodcall", token.line, expr, method, args)
            else:
                return expr


# -- runtime helpers -----------------------------------------------------------------


def lua_tostring(value) -> str:
    if value is None:
        return "nil"
    if value is True:
        return "true"
    if value is False:
        return "false"
    if isinstance(value, float):
        if value != value:
            return "nan"
        if value == math.inf:
            return "inf"
        if value == -math.inf:
            return "-inf"
        if value.is_integer() and abs(value) < 1e16:
            return str(int(value))
        return repr(value)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, str):
        return value
    if isinstance(value, LuaTable):
        if value.metatable is not None:
            handler = value.metatable.hash.get("__tostring")
            if handler is not None:
                return lua_tostring(first(call_value(handler, [value])))
        return repr(value)
    return repr(value)


def lua_tonumber(value):
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, str):
        text = value.strip()
        try:
            if text.lower().startswith("0x"):
                return float(int(text, 16))
            return float(text)
        except ValueError:
            return None
    return None


def lua_type(value) -> str:
    if value is None:
        return "nil"
    if isinstance(value, bool):
        return "boolean"
    if isinstance(value, (int, float)):
        return "number"
    if isinstance(value, str):
        return "string"
    if isinstance(value, LuaTable):
        return "table"
    return "function"


def truthy(value) -> bool:
    return value is not None and value is not False


def first(values):
    if isinstance(values, list):
        return values[0] if values else None
    return values


def _arith_operand(value, op, line):
    number = lua_tonumber(value)
    if number is None:
        raise LuaError(f"attempt to perform arithmetic ({op}) on a {lua_type(value)} value", line)
    return number


def call_value(func, args: list):
    """Call a Lua or native function; always returns a list of values."""
    if isinstance(func, LuaFunction):
        interp = _current_interpreter()
        if interp is None:
            raise LuaError("no interpreter active")
        return interp.call_function(func, args)
    if callable(func):
        result = func(*args)
        if isinstance(result, tuple):
            return list(result)
        if result is None:
            return []
        return [result]
    if isinstance(func, LuaTable) and func.metatable is not None:
        handler = func.metatable.hash.get("__call")
        if handler is not None:
            return call_value(handler, [func] + args)
    raise LuaError(f"attempt to call a {lua_type(func)} value")


_ACTIVE = threading.local()


def _current_interpreter():
    return getattr(_ACTIVE, "interp", None)


class BreakSignal(Exception):
    pass


class ReturnSignal(Exception):
    def __init__(self, values):
        self.values = values


class Interpreter:
    def __init__(self, globals_table: dict | None = None,
                 interrupt: Callable[[], bool] | None = None,
                 max_steps: int | None = None):
        self.globals = Env()
        self.globals.vars.update(globals_table or {})
        self.interrupt = interrupt
        self.max_steps = max_steps
        self.steps = 0

    # -- public API --

    def run(self, source: str, chunk_name: str = "script"):
        tokens = tokenize(source)
        block = Parser(tokens).parse_chunk()
        previous = _current_interpreter()
        _ACTIVE.interp = self
        try:
            self.exec_block(block, Env(self.globals), varargs=[])
        except ReturnSignal as signal:
            return signal.values
        finally:
            _ACTIVE.interp = previous
        return []

    def call_function(self, func: LuaFunction, args: list):
        env = Env(func.env)
        for i, param in enumerate(func.params):
            env.declare(param, args[i] if i < len(args) else None)
        varargs = args[len(func.params):] if func.is_vararg else []
        try:
            self.exec_block(func.body, env, varargs)
        except ReturnSignal as signal:
            return signal.values
        return []

    # -- execution --

    def _tick(self, line):
        self.steps += 1
        if self.max_steps is not None and self.steps > self.max_steps:
            raise LuaError("script exceeded the step budget", line)
        if self.interrupt is not None and (self.steps % 64 == 0) and self.interrupt():
            raise ScriptInterrupted()

    def exec_block(self, statements, env: Env, varargs: list):
        for statement in statements:
            self.exec_statement(statement, env, varargs)

    def exec_statement(self, node, env: Env, varargs: list):
        kind = node[0]
        line = node[1]
        self._tick(line)
        if kind == "local":
            _, _, names, exprs = node
            values = self.eval_exprlist(exprs, env, varargs, len(names))
            for name, value in zip(names, values):
                env.declare(name, value)
        elif kind == "localfunc":
            _, _, name, func_node = node
            env.declare(name, None)
            env.vars[name] = self.eval_expr(func_node, env, varargs)
        elif kind == "assign":
            _, _, targets, exprs = node
            values = self.eval_exprlist(exprs, env, varargs, len(targets))
            for target, value in zip(targets, values):
                self.assign_target(target, value, env, varargs)
        elif kind == "exprstat":
            self.eval_multi(node[2], env, varargs)
        elif kind == "if":
            _, _, branches, else_body = node
            for cond, body in branches:
                if truthy(self.eval_expr(cond, env, varargs)):
                    self.exec_block(body, Env(env), varargs)
                    return
            if else_body is not None:
                self.exec_block(else_body, Env(env), varargs)
        elif kind == "while":
            _, _, cond, body = node
            while truthy(self.eval_expr(cond, env, varargs)):
                self._tick(line)
                try:
                    self.exec_block(body, Env(env), varargs)
                except BreakSignal:
                    break
        elif kind == "repeat":
            _, _, body, cond = node
            while True:
                self._tick(line)
                scope = Env(env)
                try:
                    self.exec_block(body, scope, varargs)
                except BreakSignal:
                    break
                if truthy(self.eval_expr(cond, scope, varargs)):
                    break
        elif kind == "fornum":
            _, _, name, start_node, limit_node, step_node, body = node
            start = _arith_operand(self.eval_expr(start_node, env, varargs), "for", line)
            limit = _arith_operand(self.eval_expr(limit_node, env, varargs), "for", line)
            step = 1.0 if step_node is None else _arith_operand(self.eval_expr(step_node, env, varargs), "for", line)
            if step == 0:
                raise LuaError("'for' step is zero", line)
            i = start
            while (step > 0 and i <= limit) or (step < 0 and i >= limit):
                self._tick(line)
                scope = Env(env)
                scope.declare(name, i)
                try:
                    self.exec_block(body, scope, varargs)
                except BreakSignal:
                    break
                i += step
        elif kind == "forin":
            _, _, names, exprs, body = node
            values = self.eval_exprlist(exprs, env, varargs, 3)
            iterator, state, control = values[0], values[1], values[2]
            while True:
                self._tick(line)
                results = call_value(iterator, [state, control])
                results += [None] * (len(names) - len(results))
                if results[0] is None:
                    break
                control = results[0]
                scope = Env(env)
                for name, value in zip(names, results):
                    scope.declare(name, value)
                try:
                    self.exec_block(body, scope, varargs)
                except BreakSignal:
                    break
        elif kind == "do":
            self.exec_block(node[2], Env(env), varargs)
        elif kind == "break":
            raise BreakSignal()
        elif kind == "return":
            raise ReturnSignal(self.eval_exprlist(node[2], env, varargs, None))
        else:
            raise LuaError(f"unknown statement {kind}", line)

    def assign_target(self, target, value, env: Env, varargs):
        kind = target[0]
        if kind == "name":
            env.assign(target[2], value)
        elif kind == "index":
            container = self.eval_expr(target[2], env, varargs)
            key = self.eval_expr(target[3], env, varargs)
            if not isinstance(container, LuaTable):
                raise LuaError(f"attempt to index a {lua_type(container)} value", target[1])
            container.set(key, value)
        else:
            raise LuaError("cannot assign to this expression", target[1])

    # -- evaluation --

    def eval_exprlist(self, exprs, env, varargs, want: int | None):
        values: list = []
        for i, expr in enumerate(exprs):
            if i == len(exprs) - 1:
                values.extend(self.eval_multi(expr, env, varargs))
            else:
                values.append(self.eval_expr(expr, env, varargs))
        if want is not None:
            while len(values) < want:
                values.append(None)
            values = values[:want] if want else values
        return values

    def eval_multi(self, node, env, varargs) -> list:
        kind = node[0]
        if kind in ("call", "methodcall"):
            return self.eval_call(node, env, varargs)
        if kind == "vararg":
            return list(varargs)
        return [self.eval_expr(node, env, varargs)]

    def eval_expr(self, node, env: Env, varargs):
        kind = node[0]
        line = node[1]
        if kind == "const":
            return node[2]
        if kind == "name":
            return env.lookup(node[2])
        if kind == "paren":
            return self.eval_expr(node[2], env, varargs)
        if kind == "vararg":
            return varargs[0] if varargs else None
        if kind == "function":
            _, _, params, is_vararg, body, name = node
            return LuaFunction(params, is_vararg, body, env, name)
        if kind == "table":
            _, _, array_items, hash_items = node
            table = LuaTable()
            index = 1
            for i, item in enumerate(array_items):
                if i == len(array_items) - 1:
                    for value in self.eval_multi(item, env, varargs):
                        table.set(index, value)
                        index += 1
                else:
                    table.set(index, self.eval_expr(item, env, varargs))
                    index += 1
            for key_node, value_node in hash_items:
                table.set(self.eval_expr(key_node, env, varargs), self.eval_expr(value_node, env, varargs))
            return table
        if kind == "index":
            container = self.eval_expr(node[2], env, varargs)
            key = self.eval_expr(node[3], env, varargs)
            return self.index_value(container, key, line)
        if kind in ("call", "methodcall"):
            values = self.eval_call(node, env, varargs)
            return values[0] if values else None
        if kind == "binop":
            return self.eval_binop(node, env, varargs)
        if kind == "unop":
            _, _, op, operand_node = node
            operand = self.eval_expr(operand_node, env, varargs)
            if op == "not":
                return not truthy(operand)
            if op == "-":
                return -_arith_operand(operand, "-", line)
            if op == "#":
                if isinstance(operand, str):
                    return float(len(operand))
                if isinstance(operand, LuaTable):
                    return float(operand.length())
                raise LuaError(f"attempt to get length of a {lua_type(operand)} value", line)
        raise LuaError(f"unknown expression {kind}", line)

    def index_value(self, container, key, line):
        if isinstance(container, LuaTable):
            return container.get(key)
        if isinstance(container, str):
            string_lib = self.globals.lookup("string")
            if isinstance(string_lib, LuaTable):
                return string_lib.get(key)
            return None
        if container is None:
            raise LuaError(f"attempt to index a nil value (key {lua_tostring(key)!r})", line)
        raise LuaError(f"attempt to index a {lua_type(container)} value", line)

    def eval_call(self, node, env, varargs) -> list:
        line = node[1]
        self._tick(line)
        if node[0] == "call":
            func = self.eval_expr(node[2], env, varargs)
            args = self.eval_exprlist(node[3], env, varargs, None)
        else:
            receiver = self.eval_expr(node[2], env, varargs)
            func = self.index_value(receiver, node[3], line)
            if func is None:
                raise LuaError(f"method {node[3]!r} not found", line)
            args = [receiver] + self.eval_exprlist(node[4], env, varargs, None)
        try:
            return call_value(func, args)
        except LuaError as e:
            if e.line is None:
                raise LuaError(e.value, line) from e
            raise

    def eval_binop(self, node, env, varargs):
        _, line, op, left_node, right_node = node
        if op == "and":
            left = self.eval_expr(left_node, env, varargs)
            if not truthy(left):
                return left
            return self.eval_expr(right_node, env, varargs)
        if op == "or":
            left = self.eval_expr(left_node, env, varargs)
            if truthy(left):
                return left
            return self.eval_expr(right_node, env, varargs)
        left = self.eval_expr(left_node, env, varargs)
        right = self.eval_expr(right_node, env, varargs)
        if op == "..":
            for operand in (left, right):
                if not isinstance(operand, (str, int, float)) or isinstance(operand, bool):
                    raise LuaError(f"attempt to concatenate a {lua_type(operand)} value", line)
            return lua_tostring(left) + lua_tostring(right)
        if op == "==":
            return lua_equals(left, right)
        if op == "~=":
            return not lua_equals(left, right)
        if op in ("<", "<=", ">", ">="):
            if isinstance(left, str) and isinstance(right, str):
                pass
            elif lua_tonumber(left) is not None and lua_tonumber(right) is not None \
                    and not isinstance(left, str) and not isinstance(right, str):
                left, right = lua_tonumber(left), lua_tonumber(right)
            else:
                raise LuaError(f"attempt to compare {lua_type(left)} with {lua_type(right)}", line)
            return {"<": left < right, "<=": left <= right, ">": left > right, ">=": left >= right}[op]
        left_num = _arith_operand(left, op, line)
        right_num = _arith_operand(right, op, line)
        if op == "+":
            return left_num + right_num
        if op == "-":
            return left_num - right_num
        if op == "*":
            return left_num * right_num
        if op == "/":
            if right_num == 0:
                return math.inf if left_num > 0 else (-math.inf if left_num < 0 else math.nan)
            return left_num / right_num
        if op == "%":
            if right_num == 0:
                return math.nan
            return left_num - math.floor(left_num / right_num) * right_num
        if op == "^":
            return math.pow(left_num, right_num)
        raise LuaError(f"unknown operator {op}", line)


def lua_equals(left, right) -> bool:
    if isinstance(left, bool) or isinstance(right, bool):
        return left is right
    if isinstance(left, (int, float)) and isinstance(right, (int, float)):
        return float(left) == float(right)
    if type(left) is not type(right):
        return False
    if isinstance(left, LuaTable):
        return left is right
    return left == right


# -- standard library (whitelisted subset) -----------------------------------------


def _pairs(table, *_):
    if not isinstance(table, LuaTable):
        raise LuaError("bad argument to 'pairs' (table expected)")
    keys = list(table.hash.keys())

    def iterator(state, control):
        try:
            if control is None:
                index = 0
            else:
                index = keys.index(normalize_key(control)) + 1
        except ValueError:
            index = len(keys)
        while index < len(keys):
            key = keys[index]
            if key in table.hash:
                value = table.hash[key]
                lua_key = float(key) if isinstance(key, int) and not isinstance(key, bool) else key
                return (lua_key, value)
            index += 1
        return (None,)

    return (iterator, table, None)


def _ipairs(table, *_):
    if not isinstance(table, LuaTable):
        raise LuaError("bad argument to 'ipairs' (table expected)")

    def iterator(state, control):
        index = int(control or 0) + 1
        value = table.get(index)
        if value is None:
            return (None,)
        return (float(index), value)

    return (iterator, table, 0.0)


def _next(table, key=None):
    values = _pairs(table)[0](table, key)
    return tuple(values)


def _select(what, *args):
    if what == "#":
        return float(len(args))
    index = int(lua_tonumber(what) or 0)
    if index < 1:
        raise LuaError("bad argument to 'select'")
    return tuple(args[index - 1:])


def _unpack(table, start=None, stop=None):
    if not isinstance(table, LuaTable):
        raise LuaError("bad argument to 'unpack' (table expected)")
    i = int(start or 1)
    j = int(stop or table.length())
    return tuple(table.get(k) for k in range(i, j + 1))


def _pcall(func, *args):
    try:
        values = call_value(func, list(args))
        return tuple([True] + values)
    except ScriptInterrupted:
        raise
    except LuaError as e:
        return (False, e.value)
    except Exception as e:  # host errors surface as messages
        return (False, str(e))


def _error(message, _level=None):
    raise LuaError(message)


def _assert(value, message=None, *rest):
    if not truthy(value):
        raise LuaError(message if message is not None else "assertion failed!")
    return tuple([value] + ([message] if message is not None else []) + list(rest))


def _string_format(fmt, *args):
    if not isinstance(fmt, str):
        raise LuaError("bad argument to 'format'")
    out = []
    arg_index = 0
    i = 0
    while i < len(fmt):
        c = fmt[i]
        if c != "%":
            out.append(c)
            i += 1
            continue
        j = i + 1
        while j < len(fmt) and fmt[j] in "-+ #0123456789.":
            j += 1
        if j >= len(fmt):
            raise LuaError("invalid format string")
        verb = fmt[j]
        spec = fmt[i:j + 1]
        if verb == "%":
            out.append("%")
        else:
            arg = args[arg_index] if arg_index < len(args) else None
            arg_index += 1
            if verb in "di":
                out.append((spec[:-1] + "d") % int(lua_tonumber(arg) or 0))
            elif verb in "eEfgG":
                out.append((spec[:-1] + verb) % float(lua_tonumber(arg) or 0.0))
            elif verb == "x":
                out.append((spec[:-1] + "x") % int(lua_tonumber(arg) or 0))
            elif verb == "s":
                out.append((spec[:-1] + "s") % lua_tostring(arg))
            elif verb == "q":
                out.append('"' + lua_tostring(arg).replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n") + '"')
            else:
                raise LuaError(f"unsupported format verb %{verb}")
        i = j + 1
    return "".join(out)


def _norm_index(i, length, default):
    if i is None:
        i = default
    i = int(i)
    if i < 0:
        i = max(length + i + 1, 1)
    elif i == 0:
        i = 1
    return i


def _string_sub(s, i=None, j=None):
    length = len(s)
    start = _norm_index(i, length, 1)
    end = j
    if end is None:
        end = -1
    end = int(end)
    if end < 0:
        end = length + end + 1
    else:
        end = min(end, length)
    if start > end:
        return ""
    return s[start - 1:end]


def _string_find(s, pattern, init=None, plain=None):
    if not truthy(plain):
        # only plain find is supported; escape-free patterns behave the same
        for ch in "^$*+?.([%-":
            if ch in pattern:
                raise LuaError("string.find: only plain find is supported (pass plain=true)")
    start = int(init or 1) - 1
    index = s.find(pattern, start)
    if index < 0:
        return None
    return (float(index + 1), float(index + len(pattern)))


def _string_rep(s, n, sep=None):
    n = int(lua_tonumber(n) or 0)
    if n <= 0:
        return ""
    if sep:
        return (s + sep) * (n - 1) + s
    return s * n


def _string_byte(s, i=None, j=None):
    i = int(i or 1)
    j = int(j or i)
    return tuple(float(ord(c)) for c in s[i - 1:j])


def _string_char(*codes):
    return "".join(chr(int(c)) for c in codes)


def _table_insert(table, a, b=LUA_NONE):
    if not isinstance(table, LuaTable):
        raise LuaError("bad argument to 'insert'")
    if b is LUA_NONE:
        table.set(table.length() + 1, a)
        return
    pos = int(lua_tonumber(a) or 0)
    length = table.length()
    for k in range(length, pos - 1, -1):
        table.set(k + 1, table.get(k))
    table.set(pos, b)


def _table_remove(table, pos=None):
    if not isinstance(table, LuaTable):
        raise LuaError("bad argument to 'remove'")
    length = table.length()
    if length == 0:
        return None
    index = int(pos) if pos is not None else length
    removed = table.get(index)
    for k in range(index, length):
        table.set(k, table.get(k + 1))
    table.set(length, None)
    return removed


def _table_concat(table, sep=None, i=None, j=None):
    sep = sep or ""
    start = int(i or 1)
    stop = int(j or table.length())
    return sep.join(lua_tostring(table.get(k)) for k in range(start, stop + 1))


def _table_sort(table, comp=None):
    import functools

    length = table.length()
    items = [table.get(k) for k in range(1, length + 1)]
    if comp is None:
        items.sort(key=functools.cmp_to_key(lambda a, b: -1 if a < b else (1 if b < a else 0)))
    else:
        items.sort(key=functools.cmp_to_key(
            lambda a, b: -1 if truthy(first(call_value(comp, [a, b]))) else 1))
    for k, value in enumerate(items, start=1):
        table.set(k, value)


def _setmetatable(table, metatable):
    if not isinstance(table, LuaTable):
        raise LuaError("bad argument to 'setmetatable'")
    table.metatable = metatable
    return table


def _getmetatable(table):
    if isinstance(table, LuaTable):
        return table.metatable
    return None


def _rawget(table, key):
    return table.hash.get(normalize_key(key))


def _rawset(table, key, value):
    table.hash[normalize_key(key)] = value
    return table


class LuaCoroutine:
    """Thread-backed coroutine with resume/yield rendezvous."""

    def __init__(self, func):
        self.func = func
        self.status = "suspended"
        self._to_coroutine: list = []
        self._to_caller: list = []
        self._cond = threading.Condition()
        self._thread: threading.Thread | None = None
        self._done = False
        self._error: LuaError | None = None

    def _body(self):
        try:
            results = call_value(self.func, self._to_coroutine)
            with self._cond:
                self._to_caller = results
                self._done = True
                self.status = "dead"
                self._cond.notify_all()
        except LuaError as e:
            with self._cond:
                self._error = e
                self._done = True
                self.status = "dead"
                self._cond.notify_all()

    def resume(self, args: list) -> list:
        with self._cond:
            if self.status == "dead":
                return [False, "cannot resume dead coroutine"]
            if self.status == "running":
                return [False, "cannot resume non-suspended coroutine"]
            self.status = "running"
            self._to_coroutine = args
            if self._thread is None:
                interp = _current_interpreter()

                def run():
                    _ACTIVE.interp = interp
                    _ACTIVE.coroutine = self
                    self._body()

                self._thread = threading.Thread(target=run, daemon=True)
                self._thread.start()
            else:
                self._cond.notify_all()
            while not self._done and self.status == "running":
                self._cond.wait()
            if self._error is not None:
                error, self._error = self._error, None
                return [False, error.value]
            out = self._to_caller
            self._to_caller = []
            return [True] + out

    def do_yield(self, values: list) -> list:
        with self._cond:
            self._to_caller = values
            self.status = "suspended"
            self._cond.notify_all()
            while self.status != "running":
                self._cond.wait()
            out = self._to_coroutine
            self._to_coroutine = []
            return out


def _coroutine_create(func):
    return LuaCoroutine(func)


def _coroutine_resume(co, *args):
    if not isinstance(co, LuaCoroutine):
        raise LuaError("bad argument to 'resume'")
    return tuple(co.resume(list(args)))


def _coroutine_yield(*values):
    co = getattr(_ACTIVE, "coroutine", None)
    if co is None:
        raise LuaError("attempt to yield from outside a coroutine")
    return tuple(co.do_yield(list(values)))


def _coroutine_status(co):
    return co.status


def _coroutine_wrap(func):
    co = LuaCoroutine(func)

    def wrapped(*args):
        out = co.resume(list(args))
        if not out[0]:
            raise LuaError(out[1] if len(out) > 1 else "coroutine error")
        return tuple(out[1:])

    return wrapped


def make_table(items: dict) -> LuaTable:
    return LuaTable(items)


def baseline_env(print_fn: Callable[[str], None] | None = None) -> dict:
    """Whitelisted module set: coroutine, debug, math, package, string and
    table, plus the base functions. io and os stay absent."""

    def lua_print(*args):
        text = "\t".join(lua_tostring(a) for a in args)
        if print_fn is not None:
            print_fn(text)

    string_table = make_table({
        "format": _string_format, "len": lambda s: float(len(s)),
        "sub": _string_sub, "upper": lambda s: s.upper(), "lower": lambda s: s.lower(),
        "rep": _string_rep, "reverse": lambda s: s[::-1],
        "find": _string_find, "byte": _string_byte, "char": _string_char,
    })
    env = {
        "print": lua_print,
        "tostring": lambda v=None: lua_tostring(v),
        "tonumber": lambda v=None, base=None: (
            float(int(v, int(base))) if base is not None and isinstance(v, str) else lua_tonumber(v)),
        "type": lambda v=None: lua_type(v),
        "pairs": _pairs,
        "ipairs": _ipairs,
        "next": _next,
        "select": _select,
        "unpack": _unpack,
        "pcall": _pcall,
        "error": _error,
        "assert": _assert,
        "rawget": _rawget,
        "rawset": _rawset,
        "setmetatable": _setmetatable,
        "getmetatable": _getmetatable,
        "string": string_table,
        "table": make_table({
            "insert": _table_insert, "remove": _table_remove,
            "concat": _table_concat, "sort": _table_sort,
            "getn": lambda t: float(t.length()),
        }),
        "math": make_table({
            "pi": math.pi, "huge": math.inf,
            "floor": lambda x: float(math.floor(lua_tonumber(x))),
            "ceil": lambda x: float(math.ceil(lua_tonumber(x))),
            "abs": lambda x: abs(lua_tonumber(x)),
            "max": lambda *a: max(lua_tonumber(x) for x in a),
            "min": lambda *a: min(lua_tonumber(x) for x in a),
            "sqrt": lambda x: math.sqrt(lua_tonumber(x)),
            "pow": lambda x, y: math.pow(lua_tonumber(x), lua_tonumber(y)),
            "fmod": lambda x, y: math.fmod(lua_tonumber(x), lua_tonumber(y)),
            "random": _math_random,
            "randomseed": lambda x=None: None,
        }),
        "coroutine": make_table({
            "create": _coroutine_create, "resume": _coroutine_resume,
            "yield": _coroutine_yield, "status": _coroutine_status,
            "wrap": _coroutine_wrap,
        }),
        "debug": make_table({
            "traceback": lambda msg=None, *_: lua_tostring(msg) if msg is not None else "stack traceback:",
            "getinfo": lambda *_: LuaTable({"currentline": -1.0, "short_src": "script"}),
        }),
        "package": make_table({"loaded": LuaTable()}),
    }
    return env


_random = None


def _math_random(m=None, n=None):
    global _random
    if _random is None:
        import random as _rnd

        _random = _rnd.Random()
    if m is None:
        return _random.random()
    if n is None:
        return float(_random.randint(1, int(m)))
    return float(_random.randint(int(m), int(n)))


def python_to_lua(value):
    """JSON-shaped Python values to Lua values; None entries vanish (nil)."""
    if isinstance(value, dict):
        return LuaTable({normalize_key(k): python_to_lua(v) for k, v in value.items() if v is not None})
    if isinstance(value, list):
        return LuaTable({i + 1: python_to_lua(v) for i, v in enumerate(value) if v is not None})
    if isinstance(value, bool) or value is None:
        return value
    if isinstance(value, (int, float)):
        return float(value)
    return value


def lua_to_python(value):
    if isinstance(value, LuaTable):
        keys = list(value.hash.keys())
        length = value.length()
        if length and all(isinstance(k, int) and 1 <= k <= length for k in keys):
            return [lua_to_python(value.get(i)) for i in range(1, length + 1)]
        return {str(k): lua_to_python(v) for k, v in value.hash.items()}
    if isinstance(value, float) and value.is_integer():
        return int(value)
    return value
