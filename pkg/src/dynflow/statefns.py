"""Named state functions used in graph descriptions.

Graph documents are JSON, so Cond predicates, Isu updates and Group/Ungroup/
Flatmap state functions are referenced by name plus parameters, e.g.
``{"fn": "less_than", "field": "t", "bound": "len", "true": "loop", "false": "exit"}``.
Functions that need instance structure read it from ``state.aux``.
"""


class StateFnError(ValueError):
    pass


def _aux_lookup(state, attr, index=()):
    if state.aux is None:
        raise StateFnError(f"{state!r} carries no aux structure (needed for {attr!r})")
    try:
        v = getattr(state.aux, attr) if not isinstance(state.aux, dict) else state.aux[attr]
    except (AttributeError, KeyError):
        raise StateFnError(f"aux of {state!r} has no {attr!r}") from None
    for f in index:
        v = v[state.get(f)]
    return v


def _bound(state, bound):
    return state.get(bound) if isinstance(bound, str) else int(bound)


# predicates: state -> port name ---------------------------------------------


def make_predicate(cfg):
    fn = cfg.get("fn")
    if fn == "less_than":
        field, bound, t, f = cfg["field"], cfg["bound"], cfg["true"], cfg["false"]
        return lambda s: t if s.get(field) < _bound(s, bound) else f
    if fn == "by_field":
        field, ports = cfg["field"], list(cfg["ports"])

        def by_field(s):
            v = s.get(field)
            if not 0 <= v < len(ports):
                raise StateFnError(f"{field}={v} has no port among {ports}")
            return ports[v]

        return by_field
    if fn == "key_mod":
        field, ports = cfg.get("field", "instance_id"), list(cfg["ports"])
        return lambda s: ports[s.get(field) % len(ports)]
    if fn == "aux_flag":
        attr, index, t, f = cfg["attr"], cfg.get("index", []), cfg["true"], cfg["false"]
        return lambda s: t if _aux_lookup(s, attr, index) else f
    if fn == "const":
        port = cfg["port"]
        return lambda s: port
    raise StateFnError(f"unknown predicate {fn!r}")


def predicate_ports(cfg):
    """Ports a predicate can return, for validation against a Cond's successors."""
    fn = cfg.get("fn")
    if fn in ("less_than", "aux_flag"):
        return {cfg["true"], cfg["false"]}
    if fn in ("by_field", "key_mod"):
        return set(cfg["ports"])
    if fn == "const":
        return {cfg["port"]}
    raise StateFnError(f"unknown predicate {fn!r}")


# invertible updates: (f, f_inv) -------------------------------------------


def make_update(cfg):
    fn = cfg.get("fn")
    if fn == "increment":
        field, by = cfg["field"], int(cfg.get("by", 1))
        return (
            lambda s: s.replace(**{field: s.get(field) + by}),
            lambda s: s.replace(**{field: s.get(field) - by}),
        )
    if fn == "to_parent":
        field, via, attr = cfg.get("field", "node"), cfg.get("via", "from"), cfg.get("attr", "parent")

        def up(s):
            n = s.get(field)
            return s.replace(**{field: _aux_lookup(s, attr)[n], via: n})

        def down(s):
            return s.replace(**{field: s.get(via)}).drop(via)

        return up, down
    raise StateFnError(f"unknown state update {fn!r}")


# group merge, counts, expansion --------------------------------------------


def make_merge(cfg):
    fn = cfg.get("fn", "project")
    if fn != "project":
        raise StateFnError(f"unknown merge function {fn!r}")
    fields, rename = list(cfg["fields"]), dict(cfg.get("rename", {}))

    def merge(s):
        m = s.project(fields)
        if rename:
            names = tuple(rename.get(n, n) for n in m.names)
            m = type(s)._raw(m.instance_id, names, m.values, m.aux)
        return m

    return merge


def make_count(cfg):
    fn = cfg.get("fn")
    if fn == "const":
        value = int(cfg["value"])
        return lambda s: value
    if fn == "aux":
        attr, index, as_len = cfg["attr"], cfg.get("index", []), cfg.get("len", False)

        def count(s):
            v = _aux_lookup(s, attr, index)
            return len(v) if as_len else int(v)

        return count
    raise StateFnError(f"unknown count function {fn!r}")


def make_expand(cfg):
    """state -> list of derived states, from a list of field dicts in aux."""
    fn = cfg.get("fn", "aux")
    if fn == "range":
        field, count = cfg["field"], make_count(cfg["count"])
        drop = cfg.get("drop", [])
        return lambda s: [s.drop(*drop).replace(**{field: i}) for i in range(count(s))]
    if fn != "aux":
        raise StateFnError(f"unknown expansion {fn!r}")
    attr, index, drop = cfg["attr"], cfg.get("index", []), cfg.get("drop", [])

    def expand(s):
        base = s.drop(*drop) if drop else s
        return [base.replace(**d) for d in _aux_lookup(s, attr, index)]

    return expand
