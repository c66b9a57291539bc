"""SQL parsing, gold schema extraction, and canonical ASTs for exact match.

Parsing is delegated to sqlglot with a SQLite variant in which double-quoted
tokens are string literals (the convention of Spider/Bird gold queries) and
backticks / brackets quote identifiers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import sqlglot
from sqlglot import exp
from sqlglot.dialects.sqlite import SQLite
from sqlglot.errors import ParseError, TokenError

from .catalog import CatalogError, SchemaCatalog, SchemaElementId, SchemaSet, normalize_identifier


class GoldSQLite(SQLite):
    class Tokenizer(SQLite.Tokenizer):
        QUOTES = ["'", '"']
        IDENTIFIERS = ["`", ("[", "]")]


DIALECT = GoldSQLite
_SET_OPS = (exp.Union, exp.Intersect, exp.Except)
_QUERY_NODES = (exp.Select, *_SET_OPS)


class SqlParseError(ValueError):
    def __init__(self, message: str, offset: int | None):
        suffix = f" at offset {offset}" if offset is not None else ""
        super().__init__(f"{message}{suffix}")
        self.offset = offset


class UnsupportedStatementError(SqlParseError):
    def __init__(self, message: str):
        super().__init__(message, None)


class ResolutionError(CatalogError):
    """A column or table reference that cannot be bound to the catalog."""

    def __init__(self, message: str, identifier: str):
        super().__init__(message)
        self.identifier = identifier


class AmbiguityError(ResolutionError):
    pass


@dataclass(frozen=True, eq=False)
class SqlAst:
    """A parsed SELECT query (possibly a set operation of SELECTs)."""

    text: str
    expression: exp.Expression

    def table_bindings(self) -> dict[str, str]:
        """Map every table alias (or bare table name) to the table it binds, lowercased."""
        out = {}
        for t in self.expression.find_all(exp.Table):
            out[t.alias_or_name.lower()] = t.name.lower()
        return out

    def has_top_level_order_by(self) -> bool:
        return self.expression.args.get("order") is not None

    def sql(self) -> str:
        return self.expression.sql(dialect=DIALECT)


@dataclass(frozen=True, eq=False)
class CanonicalAst:
    expression: exp.Expression
    key: str

    def __eq__(self, other) -> bool:
        if isinstance(other, CanonicalAst):
            return self.key == other.key
        return NotImplemented

    def __hash__(self) -> int:
        return hash(self.key)

    def __repr__(self) -> str:
        return f"CanonicalAst({self.key!r})"


def _offset(text: str, line: int | None, col: int | None) -> int | None:
    if line is None or col is None:
        return None
    lines = text.split("\n")
    return sum(len(ln) + 1 for ln in lines[: line - 1]) + col


def parse_sql(text: str) -> SqlAst:
    if not text or not text.strip():
        raise SqlParseError("empty SQL text", 0)
    try:
        statements = [s for s in sqlglot.parse(text, read=DIALECT) if s is not None]
    except ParseError as exc:
        first = exc.errors[0] if exc.errors else {}
        raise SqlParseError(
            f"syntax error: {first.get('description', str(exc))}",
            _offset(text, first.get("line"), first.get("col")),
        ) from exc
    except TokenError as exc:
        raise SqlParseError(f"tokenizer error: {exc}", None) from exc
    if len(statements) != 1:
        raise UnsupportedStatementError(f"expected one statement, found {len(statements)}")
    root = statements[0]
    if not isinstance(root, _QUERY_NODES):
        raise UnsupportedStatementError(f"unsupported statement kind {root.key.upper()}")
    if root.find(exp.With) is not None or root.find(exp.CTE) is not None:
        raise UnsupportedStatementError("common table expressions are not supported")
    if root.find(exp.Window) is not None:
        raise UnsupportedStatementError("window functions are not supported")
    return SqlAst(text=text, expression=root)


# ----------------------------------------------------------------------------
# scopes

@dataclass
class _Source:
    alias: str
    table: str | None  # None for a derived table
    node: exp.Expression
    outputs: tuple[str, ...] = ()  # derived-table output names


@dataclass
class _Scope:
    select: exp.Select
    parent: _Scope | None
    sources: list[_Source] = field(default_factory=list)
    columns: list[exp.Column] = field(default_factory=list)
    projection_aliases: set[str] = field(default_factory=set)
    renamed: dict[str, str] = field(default_factory=dict)

    def lookup(self, qualifier: str) -> _Source | None:
        q = qualifier.lower()
        for s in self.sources:
            if s.alias == q:
                return s
        for s in self.sources:
            if s.table == q and not any(o.alias == q for o in self.sources if o is not s):
                return s
        return None


def _lower(name: str) -> str:
    return normalize_identifier(name)


def _from_items(select: exp.Select) -> list[exp.Expression]:
    items = []
    frm = select.args.get("from_") or select.args.get("from")
    if frm is not None:
        items.append(frm.this)
        items.extend(frm.expressions or [])
    for j in select.args.get("joins") or []:
        items.append(j.this)
    return items


def _output_names(query: exp.Expression) -> tuple[str, ...]:
    while isinstance(query, exp.Subquery):
        query = query.this
    if isinstance(query, _SET_OPS):
        return _output_names(query.left)
    if not isinstance(query, exp.Select):
        return ()
    return tuple(_lower(p.alias_or_name) for p in query.expressions if p.alias_or_name)


def _local_nodes(node: exp.Expression):
    """Yield descendants of ``node`` that belong to the same scope.

    Nested queries are yielded (so the caller can recurse) but not entered.
    """
    stack = [child for child in _children(node)]
    while stack:
        cur = stack.pop()
        yield cur
        if isinstance(cur, (*_QUERY_NODES, exp.Subquery)):
            continue
        stack.extend(_children(cur))


def _children(node: exp.Expression):
    for value in node.args.values():
        if isinstance(value, exp.Expression):
            yield value
        elif isinstance(value, list):
            for v in value:
                if isinstance(v, exp.Expression):
                    yield v


def _walk_query(query: exp.Expression, parent: _Scope | None, out: list[_Scope]) -> None:
    if isinstance(query, exp.Subquery):
        _walk_query(query.this, parent, out)
        return
    if isinstance(query, _SET_OPS):
        _walk_query(query.left, parent, out)
        _walk_query(query.right, parent, out)
        # ORDER BY / LIMIT of a compound select live on the set-operation node
        for key in ("order", "limit", "offset"):
            if query.args.get(key) is not None:
                _collect(query.args[key], parent, out, owner=None)
        return
    if not isinstance(query, exp.Select):
        return
    scope = _Scope(select=query, parent=parent)
    out.append(scope)
    derived = []
    for item in _from_items(query):
        if isinstance(item, exp.Table) and isinstance(item.this, exp.Identifier):
            scope.sources.append(_Source(alias=_lower(item.alias_or_name), table=_lower(item.name), node=item))
        elif isinstance(item, (exp.Subquery, *_QUERY_NODES)):
            alias = _lower(item.alias) if item.alias else f"__derived{len(derived)}"
            scope.sources.append(_Source(alias=alias, table=None, node=item, outputs=_output_names(item)))
            derived.append(item)
        else:
            raise UnsupportedStatementError(f"unsupported FROM item {item.sql(dialect=DIALECT)!r}")
    for p in query.expressions:
        if isinstance(p, exp.Alias):
            scope.projection_aliases.add(_lower(p.alias))
    for d in derived:
        # derived tables see only the enclosing scope's parent (no lateral joins)
        _walk_query(d, parent, out)
    for key, value in query.args.items():
        if key in ("from_", "from"):
            continue
        if key == "joins":
            for j in value or []:
                for jk, jv in j.args.items():
                    if jk == "this":
                        continue
                    _collect(jv, scope, out, owner=scope)
            continue
        _collect(value, scope, out, owner=scope)


def _collect(value, scope: _Scope | None, out: list[_Scope], owner: _Scope | None) -> None:
    values = value if isinstance(value, list) else [value]
    for v in values:
        if not isinstance(v, exp.Expression):
            continue
        nodes = [v, *_local_nodes(v)] if not isinstance(v, (*_QUERY_NODES, exp.Subquery)) else [v]
        for n in nodes:
            if isinstance(n, (*_QUERY_NODES, exp.Subquery)):
                _walk_query(n, scope, out)
            elif isinstance(n, exp.Column) and owner is not None:
                # owner is None for compound ORDER BY, whose names refer to outputs
                owner.columns.append(n)


def _scopes(ast: SqlAst | exp.Expression) -> list[_Scope]:
    expression = ast.expression if isinstance(ast, (SqlAst, CanonicalAst)) else ast
    out: list[_Scope] = []
    _walk_query(expression, None, out)
    return out


# ----------------------------------------------------------------------------
# gold schema extraction

def _resolve_unqualified(name: str, scope: _Scope, catalog: SchemaCatalog, column: exp.Column):
    """Return (element or None, found) for an unqualified column in the scope chain."""
    s: _Scope | None = scope
    while s is not None:
        hits = set()
        derived_hit = False
        for src in s.sources:
            if src.table is not None:
                if catalog.has_table(src.table) and catalog.table(src.table).has_column(name):
                    hits.add(SchemaElementId(src.table, name))
            elif name in src.outputs:
                derived_hit = True
        if len(hits) > 1 or (hits and derived_hit):
            raise AmbiguityError(f"ambiguous column {column.sql(dialect=DIALECT)!r}", name)
        if hits:
            return hits.pop(), True
        if derived_hit:
            return None, True
        if s is scope and name in s.projection_aliases:
            return None, True
        s = s.parent
    return None, False


def extract_schema_set(ast: SqlAst, catalog: SchemaCatalog) -> SchemaSet:
    """Tables and columns a query references, resolved against ``catalog``."""
    elements: set[SchemaElementId] = set()
    for scope in _scopes(ast):
        for src in scope.sources:
            if src.table is None:
                continue
            if not catalog.has_table(src.table):
                raise ResolutionError(f"unknown table {src.table!r} in {catalog.db_id!r}", src.table)
            elements.add(SchemaElementId(src.table))

        for proj in scope.select.expressions:
            if isinstance(proj, exp.Star):
                for src in scope.sources:
                    if src.table is not None:
                        elements.update(SchemaElementId(src.table, c.name) for c in catalog.table(src.table).columns)
            elif isinstance(proj, exp.Column) and isinstance(proj.this, exp.Star):
                src = scope.lookup(proj.table)
                if src is None:
                    raise ResolutionError(f"unknown table qualifier {proj.table!r}", proj.table)
                if src.table is not None:
                    elements.update(SchemaElementId(src.table, c.name) for c in catalog.table(src.table).columns)

        for j in scope.select.args.get("joins") or []:
            for ident in j.args.get("using") or []:
                name = _lower(ident.name)
                for src in scope.sources:
                    if src.table is not None and catalog.table(src.table).has_column(name):
                        elements.add(SchemaElementId(src.table, name))

        for col in scope.columns:
            if isinstance(col.this, exp.Star):
                continue
            name = _lower(col.name)
            if col.table:
                s: _Scope | None = scope
                src = None
                while s is not None and src is None:
                    src = s.lookup(col.table)
                    s = s.parent
                if src is None:
                    raise ResolutionError(f"unknown table qualifier {col.table!r} for column {name!r}", col.table)
                if src.table is None:
                    if name not in src.outputs:
                        raise ResolutionError(f"derived table {src.alias!r} has no column {name!r}", name)
                    continue
                if not catalog.table(src.table).has_column(name):
                    raise ResolutionError(f"table {src.table!r} has no column {name!r}", f"{src.table}.{name}")
                elements.add(SchemaElementId(src.table, name))
            else:
                element, found = _resolve_unqualified(name, scope, catalog, col)
                if not found:
                    raise ResolutionError(f"column {name!r} does not resolve in {catalog.db_id!r}", name)
                if element is not None:
                    elements.add(element)
    result = SchemaSet(elements)
    result.validate(catalog)
    return result


def gold_schema(sql: str, catalog: SchemaCatalog) -> SchemaSet:
    return extract_schema_set(parse_sql(sql), catalog)


# ----------------------------------------------------------------------------
# canonical form

def _normalize_identifiers(root: exp.Expression) -> None:
    for ident in root.find_all(exp.Identifier):
        name = " ".join(str(ident.this).split()).lower()
        ident.set("this", name)
        ident.set("quoted", not name.replace("_", "a").isalnum())


def _rebind_scope(scope: _Scope) -> None:
    counts: dict[str, int] = {}
    for src in scope.sources:
        if src.table is not None:
            counts[src.table] = counts.get(src.table, 0) + 1
    renamed: dict[str, str] = {}
    seen: dict[str, int] = {}
    for src in scope.sources:
        if src.table is None:
            continue
        if counts[src.table] == 1:
            renamed[src.alias] = src.table
            src.node.set("alias", None)
        else:
            seen[src.table] = seen.get(src.table, 0) + 1
            new = f"{src.table}_{seen[src.table]}"
            renamed[src.alias] = new
            src.node.set("alias", exp.TableAlias(this=exp.to_identifier(new)))

    def target_for(qualifier: str) -> str | None:
        s: _Scope | None = scope
        while s is not None:
            src = s.lookup(qualifier)
            if src is not None:
                if src.table is None:
                    return src.alias
                return s.renamed.get(src.alias, src.table)
            s = s.parent
        return None

    scope.renamed = renamed
    only = scope.sources[0] if len(scope.sources) == 1 else None
    for col in scope.columns:
        if col.table:
            new = target_for(col.table)
            if new is not None:
                col.set("table", exp.to_identifier(new))
        elif only is not None and not isinstance(col.this, exp.Star):
            name = _lower(col.name)
            if name in scope.projection_aliases:
                continue
            new = renamed.get(only.alias, only.alias) if only.table is not None else only.alias
            col.set("table", exp.to_identifier(new))
    for proj in scope.select.expressions:
        if isinstance(proj, exp.Column) and isinstance(proj.this, exp.Star) and proj.table:
            new = target_for(proj.table)
            if new is not None:
                proj.set("table", exp.to_identifier(new))


def _conjuncts(node: exp.Expression) -> list[exp.Expression]:
    while isinstance(node, exp.Paren):
        node = node.this
    if isinstance(node, exp.And):
        return _conjuncts(node.left) + _conjuncts(node.right)
    return [node]


def _sort_conjunctions(node: exp.Expression) -> exp.Expression:
    """Recursively order the operands of every AND chain by their SQL text."""

    def visit(n: exp.Expression) -> exp.Expression:
        if isinstance(n, exp.And) or (isinstance(n, exp.Paren) and isinstance(_unparen(n), exp.And)):
            parts = [p.transform(visit, copy=False) for p in _conjuncts(n)]
            parts.sort(key=lambda p: p.sql(dialect=DIALECT))
            return exp.and_(*parts, copy=False)
        return n

    return node.transform(visit, copy=False)


def _unparen(n: exp.Expression) -> exp.Expression:
    while isinstance(n, exp.Paren):
        n = n.this
    return n


def canonicalize(ast: SqlAst | CanonicalAst) -> CanonicalAst:
    """Alias-free, lowercased form with AND chains in WHERE/HAVING sorted.

    Select-list order and literal spellings are preserved.
    """
    root = ast.expression.copy()
    for scope in _scopes(root):
        _rebind_scope(scope)
    _normalize_identifiers(root)
    for clause in list(root.find_all(exp.Where, exp.Having)):
        clause.set("this", _sort_conjunctions(_unparen(clause.this)))
    return CanonicalAst(expression=root, key=root.sql(dialect=DIALECT))


def ast_match(a: SqlAst, b: SqlAst) -> bool:
    return canonicalize(a) == canonicalize(b)
