"""Canonical S-expression and DOT renderings of lineage trees.

Grammar::

    node  := "(" "node" field* node* ")"
    field := ":id" ATOM | ":r" NUMBER | ":dr" NUMBER | ":mod" STRING
           | ":status" ("success" | "failed" | "pruned")
           | ":reason" STRING | ":retained" "true"

Rewards are printed with six decimals so that render -> parse -> render is
byte-stable. ``;`` starts a comment that runs to end of line.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from evoforest.features import modification_key
from evoforest.forest import AlgorithmNode, Forest, PhyloTree, Status

_REQUIRED = ("id", "r", "dr", "mod", "status")
_NODE_ID_RE = re.compile(r"^n(\d+)$")
_ATOM_STOP = set("()\";") | set(" \t\r\n")


class ParseError(ValueError):
    def __init__(self, message: str, position: int) -> None:
        super().__init__(f"{message} at offset {position}")
        self.message = message
        self.position = position


def fmt_reward(value: float) -> str:
    text = f"{value:.6f}"
    return "0.000000" if text == "-0.000000" else text


def _quote(text: str) -> str:
    escaped = text.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n").replace("\t", "\\t")
    return f'"{escaped}"'


def _visible(tree: PhyloTree, include_pruned: bool) -> set[str]:
    if include_pruned:
        return set(tree.nodes)
    # a pruned node stays visible only while it still has visible descendants
    keep: set[str] = set()

    def visit(nid: str) -> bool:
        shown = any([visit(c) for c in tree.children.get(nid, [])])
        if shown or tree.nodes[nid].status != Status.PRUNED or nid == tree.root_id:
            keep.add(nid)
            return True
        return False

    visit(tree.root_id)
    return keep


def _header(node: AlgorithmNode) -> str:
    parts = [
        f"(node :id {node.id}",
        f":r {fmt_reward(node.reward)}",
        f":dr {fmt_reward(node.delta_reward)}",
        f":mod {_quote(node.modification_summary)}",
        f":status {node.status.value}",
    ]
    if node.status != Status.SUCCESS:
        parts.append(f":reason {_quote(node.reason)}")
    if node.retained:
        parts.append(":retained true")
    return " ".join(parts)


def to_sexpr(tree: PhyloTree, include_pruned: bool = False) -> str:
    """Render ``tree`` in the canonical grammar, children in creation order."""
    visible = _visible(tree, include_pruned)
    lines: list[str] = []

    def emit(nid: str, indent: int) -> None:
        kids = [c for c in tree.children.get(nid, []) if c in visible]
        lines.append("  " * indent + _header(tree.nodes[nid]))
        for c in kids:
            emit(c, indent + 1)
        lines[-1] += ")"

    emit(tree.root_id, 0)
    return "\n".join(lines)


def forest_to_sexpr(forest: Forest, include_pruned: bool = False) -> str:
    chunks = []
    for tree in forest.trees.values():
        chunks.append(f"; tree {tree.id} origin={tree.origin.value} label={_quote(tree.label)}")
        chunks.append(to_sexpr(tree, include_pruned))
    return "\n".join(chunks) + "\n"


def to_dot(tree: PhyloTree, include_pruned: bool = True) -> str:
    visible = _visible(tree, include_pruned)
    out = [f'digraph "{tree.id}" {{']
    for node in tree:
        if node.id not in visible:
            continue
        style = {Status.SUCCESS: "", Status.FAILED: ", color=red", Status.PRUNED: ", style=dashed"}[node.status]
        out.append(f'  "{node.id}" [label="{node.id}\\nr={fmt_reward(node.reward)}"{style}];')
    for node in tree:
        if node.parent_id is not None and node.id in visible:
            out.append(f'  "{node.parent_id}" -> "{node.id}";')
    out.append("}")
    return "\n".join(out) + "\n"


# -- parsing ---------------------------------------------------------------


@dataclass
class _Tok:
    kind: str  # "(" | ")" | "atom" | "str"
    text: str
    pos: int


_ESCAPES = {"\\": "\\", '"': '"', "n": "\n", "t": "\t"}


def _tokenize(text: str) -> list[_Tok]:
    toks: list[_Tok] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch == ";":
            while i < n and text[i] != "\n":
                i += 1
        elif ch in "()":
            toks.append(_Tok(ch, ch, i))
            i += 1
        elif ch == '"':
            start = i
            i += 1
            buf = []
            while True:
                if i >= n:
                    raise ParseError("unterminated string", start)
                c = text[i]
                if c == '"':
                    i += 1
                    break
                if c == "\\":
                    if i + 1 >= n:
                        raise ParseError("unterminated string", start)
                    esc = text[i + 1]
                    if esc not in _ESCAPES:
                        raise ParseError(f"invalid escape \\{esc}", i)
                    buf.append(_ESCAPES[esc])
                    i += 2
                else:
                    buf.append(c)
                    i += 1
            toks.append(_Tok("str", "".join(buf), start))
        else:
            start = i
            while i < n and text[i] not in _ATOM_STOP:
                i += 1
            toks.append(_Tok("atom", text[start:i], start))
    return toks


@dataclass
class _RawNode:
    pos: int
    fields: dict[str, _Tok]
    children: list[_RawNode]


class _Parser:
    def __init__(self, text: str) -> None:
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self) -> _Tok | None:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def next(self) -> _Tok:
        tok = self.peek()
        if tok is None:
            raise ParseError("unexpected end of input", len(self.text))
        self.i += 1
        return tok

    def node(self, open_tok: _Tok) -> _RawNode:
        head = self.peek()
        if head is None:
            raise ParseError("unterminated expression", open_tok.pos)
        if head.kind != "atom" or head.text != "node":
            raise ParseError("expected 'node'", head.pos)
        self.i += 1
        raw = _RawNode(open_tok.pos, {}, [])
        while True:
            tok = self.peek()
            if tok is None:
                raise ParseError("unterminated expression", open_tok.pos)
            if tok.kind == ")":
                self.i += 1
                break
            if tok.kind == "(":
                self.i += 1
                raw.children.append(self.node(tok))
                continue
            if tok.kind == "atom" and tok.text.startswith(":"):
                self.i += 1
                name = tok.text[1:]
                if name in raw.fields:
                    raise ParseError(f"duplicate field :{name}", tok.pos)
                value = self.peek()
                if value is None:
                    raise ParseError("unterminated expression", open_tok.pos)
                if value.kind in "()":
                    raise ParseError(f"missing value for :{name}", tok.pos)
                self.i += 1
                raw.fields[name] = value
                continue
            raise ParseError(f"unexpected token {tok.text!r}", tok.pos)
        for name in _REQUIRED:
            if name not in raw.fields:
                raise ParseError(f"missing field :{name}", raw.pos)
        return raw

    def top(self) -> _RawNode:
        tok = self.peek()
        if tok is None:
            raise ParseError("empty input", 0)
        if tok.kind != "(":
            raise ParseError(f"expected '(' but found {tok.text!r}", tok.pos)
        self.i += 1
        raw = self.node(tok)
        extra = self.peek()
        if extra is not None:
            raise ParseError(f"trailing input {extra.text!r}", extra.pos)
        return raw


def _number(tok: _Tok, name: str) -> float:
    if tok.kind != "atom":
        raise ParseError(f":{name} expects a number", tok.pos)
    try:
        value = float(tok.text)
    except ValueError:
        raise ParseError(f":{name} expects a number, got {tok.text!r}", tok.pos) from None
    if value != value:
        raise ParseError(f":{name} is NaN", tok.pos)
    return value


def _string(tok: _Tok, name: str) -> str:
    if tok.kind != "str":
        raise ParseError(f":{name} expects a string", tok.pos)
    return tok.text


def parse_sexpr(text: str, tree_id: str = "t0") -> PhyloTree:
    """Parse one canonical tree expression. Node code is not part of the grammar."""
    raw_root = _Parser(text).top()
    nodes: dict[str, AlgorithmNode] = {}
    children: dict[str, list[str]] = {}
    order = 0

    def build(raw: _RawNode, parent: str | None, depth: int) -> str:
        nonlocal order
        known = set(_REQUIRED) | {"reason", "retained"}
        for name, tok in raw.fields.items():
            if name not in known:
                raise ParseError(f"unknown field :{name}", tok.pos)
        id_tok = raw.fields["id"]
        if id_tok.kind != "atom":
            raise ParseError(":id expects a symbol", id_tok.pos)
        nid = id_tok.text
        if nid in nodes:
            raise ParseError(f"duplicate node id {nid!r}", id_tok.pos)
        status_tok = raw.fields["status"]
        try:
            status = Status(status_tok.text)
        except ValueError:
            raise ParseError(f"unknown status {status_tok.text!r}", status_tok.pos) from None
        retained = False
        if "retained" in raw.fields:
            rt = raw.fields["retained"]
            if rt.kind != "atom" or rt.text != "true":
                raise ParseError(":retained expects 'true'", rt.pos)
            retained = True
        reason = _string(raw.fields["reason"], "reason") if "reason" in raw.fields else ""
        summary = _string(raw.fields["mod"], "mod")
        m = _NODE_ID_RE.match(nid)
        nodes[nid] = AlgorithmNode(
            id=nid,
            parent_id=parent,
            code="",
            modification_summary=summary,
            modification_key=modification_key(summary),
            reward=_number(raw.fields["r"], "r"),
            delta_reward=_number(raw.fields["dr"], "dr"),
            status=status,
            reason=reason,
            depth=depth,
            seq=int(m.group(1)) if m else order,
            retained=retained,
        )
        order += 1
        children[nid] = []
        for child in raw.children:
            children[nid].append(build(child, nid, depth + 1))
        return nid

    root_id = build(raw_root, None, 0)
    tree = PhyloTree(id=tree_id, root_id=root_id, nodes=nodes, children=children, label=tree_id)
    tree.validate()
    return tree
