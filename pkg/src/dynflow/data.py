"""Seeded dataset generators and loaders.

Token layout for list reduction: digits ``0-9`` are ids ``0-9`` and the four
operation tokens follow as ids ``10-13`` in the order of :data:`OPS`. The
operation token comes first, then the digits.
"""
import gzip
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

OPS = ("mean", "alt_mean", "range", "len")
OP_TOKEN = {op: 10 + i for i, op in enumerate(OPS)}
LIST_VOCAB = 14
MAX_DIGITS = 9


class ParseError(ValueError):
    def __init__(self, message, pos):
        super().__init__(f"{message} at position {pos}")
        self.pos = pos


class IdxFormatError(ValueError):
    pass


def round_half_away(x):
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def list_reduction_value(op, digits):
    """Unrounded result of ``op`` on ``digits``."""
    if op == "mean":
        return sum(digits) / len(digits)
    if op == "alt_mean":
        even, odd = digits[0::2], digits[1::2]
        return sum(even) / len(even) - sum(odd) / len(odd)
    if op == "range":
        return max(digits) - min(digits)
    if op == "len":
        return len(digits)
    raise ValueError(f"unknown operation {op!r}")


def list_reduction_label(op, digits):
    return round_half_away(list_reduction_value(op, digits)) % 10


@dataclass(frozen=True)
class ListReductionInstance:
    op: str
    digits: tuple
    label: int

    @property
    def tokens(self):
        return (OP_TOKEN[self.op],) + tuple(self.digits)

    def __len__(self):
        return len(self.digits) + 1


def gen_list_reduction(n, seed):
    """``n`` instances with 1-9 digits (alt_mean needs at least 2)."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        op = OPS[int(rng.integers(len(OPS)))]
        k = int(rng.integers(2 if op == "alt_mean" else 1, MAX_DIGITS + 1))
        digits = tuple(int(d) for d in rng.integers(0, 10, size=k))
        out.append(ListReductionInstance(op, digits, list_reduction_label(op, digits)))
    return out


def bucket_by_length(instances, batch_size, rng=None):
    """Reorder so consecutive runs of ``batch_size`` share similar lengths.

    Buckets are shuffled as units when ``rng`` is given. Only the pump order
    changes.
    """
    idx = sorted(range(len(instances)), key=lambda i: (len(instances[i]), i))
    buckets = [idx[i:i + batch_size] for i in range(0, len(idx), batch_size)]
    if rng is not None:
        rng.shuffle(buckets)
    return [instances[i] for b in buckets for i in b]


# trees --------------------------------------------------------------------------


@dataclass
class TreeInstance:
    """Binary tree in post-order: children precede parents, the root is last.

    ``children[i]`` is ``()`` for a leaf and ``(left, right)`` otherwise;
    ``tokens[i]`` is the word id of a leaf and ``-1`` for internal nodes.
    """

    children: tuple
    tokens: tuple
    labels: tuple
    words: tuple = ()

    @property
    def root(self):
        return len(self.children) - 1

    @property
    def leaves(self):
        return [i for i, c in enumerate(self.children) if not c]

    @property
    def parent(self):
        p = [-1] * len(self.children)
        for i, c in enumerate(self.children):
            for ch in c:
                p[ch] = i
        return p

    @property
    def label(self):
        return self.labels[self.root]

    def __len__(self):
        return len(self.children)


def _tree_from_nested(nested, make_leaf):
    children, tokens, labels, words = [], [], [], []

    def visit(node):
        if node[1] is None:
            tok, lab, word = make_leaf(node)
            children.append(())
            tokens.append(tok)
            labels.append(lab)
            words.append(word)
            return len(children) - 1
        left, right = visit(node[1]), visit(node[2])
        children.append((left, right))
        tokens.append(-1)
        labels.append(node[0])
        words.append("")
        return len(children) - 1

    visit(nested)
    return TreeInstance(tuple(children), tuple(tokens), tuple(labels), tuple(words))


def sentiment_rule(left, right):
    """Planted composition rule on 5 classes (0 very negative .. 4 very positive).

    A strongly negative child (0) negates the other side; otherwise the
    result is the clipped sum of the centred children.
    """
    if left == 0 and right != 0:
        return 4 - right
    if right == 0 and left != 0:
        return 4 - left
    return min(4, max(0, (left - 2) + (right - 2) + 2))


def word_sentiment(token):
    return token % 5


def gen_trees(n, depth_range=(1, 4), vocab=50, seed=0):
    """Random binary trees whose labels follow :func:`sentiment_rule`."""
    lo, hi = depth_range
    if not 1 <= lo <= hi:
        raise ValueError("depth_range must satisfy 1 <= lo <= hi")
    rng = np.random.default_rng(seed)

    def grow(depth, force):
        if depth == 0 or (not force and rng.random() < 0.3):
            return ("leaf", int(rng.integers(vocab)))
        return ("node", grow(depth - 1, False), grow(depth - 1, False))

    out = []
    for _ in range(n):
        shape = grow(int(rng.integers(lo, hi + 1)), True)

        def label(t):
            if t[0] == "leaf":
                return (word_sentiment(t[1]), None, None, t[1])
            left, right = label(t[1]), label(t[2])
            return (sentiment_rule(left[0], right[0]), left, right)

        out.append(_tree_from_nested(label(shape), lambda nd: (nd[3], nd[0], f"w{nd[3]}")))
    return out


def parse_sexpr(text, vocab=None):
    """Parse one ``(label (label word) (label word))`` tree.

    ``vocab`` maps words to ids and grows as new words appear; omitted, ids
    are assigned in order of first appearance.
    """
    vocab = {} if vocab is None else vocab
    pos = 0

    def skip():
        nonlocal pos
        while pos < len(text) and text[pos].isspace():
            pos += 1

    def atom():
        nonlocal pos
        start = pos
        while pos < len(text) and not text[pos].isspace() and text[pos] not in "()":
            pos += 1
        if start == pos:
            raise ParseError("expected a token", pos)
        return text[start:pos]

    def node():
        nonlocal pos
        skip()
        if pos >= len(text) or text[pos] != "(":
            raise ParseError("expected '('", pos)
        pos += 1
        skip()
        lab_pos = pos
        lab = atom()
        if not lab.isdigit():
            raise ParseError(f"label {lab!r} is not an integer", lab_pos)
        skip()
        if pos < len(text) and text[pos] == "(":
            left = node()
            right = node()
            skip()
            if pos >= len(text) or text[pos] != ")":
                raise ParseError("expected ')' (trees must be binary)", pos)
            pos += 1
            return (int(lab), left, right)
        word = atom()
        skip()
        if pos >= len(text) or text[pos] != ")":
            raise ParseError("expected ')'", pos)
        pos += 1
        return (int(lab), None, None, word)

    tree = node()
    skip()
    if pos != len(text):
        raise ParseError("trailing characters", pos)

    def leaf(nd):
        word = nd[3]
        return vocab.setdefault(word, len(vocab)), nd[0], word

    return _tree_from_nested(tree, leaf)


def format_sexpr(tree):
    def fmt(i):
        c = tree.children[i]
        if not c:
            return f"({tree.labels[i]} {tree.words[i]})"
        return f"({tree.labels[i]} {fmt(c[0])} {fmt(c[1])})"

    return fmt(tree.root)


def load_sst_format(path, vocab=None):
    vocab = {} if vocab is None else vocab
    with open(path) as f:
        return [parse_sexpr(line.strip(), vocab) for line in f if line.strip()]


# graphs -------------------------------------------------------------------------

EDGE_TYPES = ("is_a", "is_a_rev", "fears", "fears_rev")
# node annotations
TOK_PAD, TOK_SPECIES, TOK_ENTITY, TOK_QUERY = 0, 1, 2, 3
GRAPH_VOCAB = 4


@dataclass
class GraphInstance:
    """Typed directed graph; ``edges`` holds ``(src, dst, edge type)`` triples."""

    num_nodes: int
    annotations: tuple
    edges: tuple
    label: int
    num_edge_types: int = len(EDGE_TYPES)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.num_nodes


def babi15_answer(g):
    """Two-hop traversal: query --is_a--> species --fears--> answer."""
    q = g.annotations.index(TOK_QUERY)
    isa = [d for s, d, t in g.edges if s == q and t == 0]
    if len(isa) != 1:
        raise ValueError("query must have exactly one is_a edge")
    feared = [d for s, d, t in g.edges if s == isa[0] and t == 2]
    if len(feared) != 1:
        raise ValueError("species must fear exactly one species")
    return feared[0]


def gen_babi15_like(n, num_nodes=8, seed=0, species=4, entities=4):
    """Type-hierarchy deduction graphs padded with isolated nodes to ``num_nodes``.

    The core graph of ``species + entities`` nodes depends only on the seed,
    so padding never changes labels.
    """
    core = species + entities
    if num_nodes < max(8, core):
        raise ValueError(f"num_nodes must be at least {max(8, core)}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        perm = [int(i) for i in rng.permutation(core)]
        sp, en = perm[:species], perm[species:]
        fears = {}
        for i, s in enumerate(sp):
            others = [o for o in sp if o != s]
            fears[s] = others[int(rng.integers(len(others)))]
        isa = {e: sp[int(rng.integers(species))] for e in en}
        q = en[int(rng.integers(entities))]
        edges = []
        for e, s in isa.items():
            edges += [(e, s, 0), (s, e, 1)]
        for s, t in fears.items():
            edges += [(s, t, 2), (t, s, 3)]
        order = rng.permutation(len(edges))
        edges = tuple(edges[int(i)] for i in order)
        ann = [TOK_PAD] * num_nodes
        for s in sp:
            ann[s] = TOK_SPECIES
        for e in en:
            ann[e] = TOK_ENTITY
        ann[q] = TOK_QUERY
        out.append(GraphInstance(num_nodes, tuple(ann), edges, fears[isa[q]]))
    return out


# MNIST --------------------------------------------------------------------------


@dataclass(frozen=True)
class VectorInstance:
    x: np.ndarray
    label: int

    def __len__(self):
        return 1


def _open(path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def _read_idx(path, magic, dims):
    with _open(path) as f:
        data = f.read()
    if len(data) < 4 + 4 * dims:
        raise IdxFormatError(f"{path}: file too short for an IDX header")
    got = struct.unpack(">I", data[:4])[0]
    if got != magic:
        raise IdxFormatError(f"{path}: magic number 0x{got:08x}, expected 0x{magic:08x}")
    shape = struct.unpack(">" + "I" * dims, data[4:4 + 4 * dims])
    body = data[4 + 4 * dims:]
    need = int(np.prod(shape))
    if len(body) != need:
        raise IdxFormatError(f"{path}: header declares {need} bytes of data, file has {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(shape)


def load_mnist_idx(images_path, labels_path):
    images = _read_idx(images_path, 0x00000803, 3)
    labels = _read_idx(labels_path, 0x00000801, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return [VectorInstance(flat[i], int(labels[i])) for i in range(len(labels))]


def write_idx(path, array, magic):
    """Write a uint8 array as IDX (used to fabricate fixtures)."""
    a = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(">" + "I" * a.ndim, *a.shape))
        f.write(a.tobytes())


def gen_vectors(n, dim=20, classes=4, seed=0, noise=0.5, task_seed=0):
    """Gaussian clusters, a small stand-in for MNIST.

    Cluster centres come from ``task_seed`` so that splits drawn with
    different ``seed`` values share one task.
    """
    centres = np.random.default_rng(task_seed).standard_normal((classes, dim)) * 2.0
    rng = np.random.default_rng(seed)
    ys = rng.integers(classes, size=n)
    return [VectorInstance(centres[y] + noise * rng.standard_normal(dim), int(y)) for y in ys]


# export -------------------------------------------------------------------------


def _jsonable(inst):
    d = asdict(inst) if not isinstance(inst, VectorInstance) else {"x": inst.x.tolist(), "label": inst.label}
    d["type"] = type(inst).__name__
    return d


def export_jsonl(instances, path):
    with open(path, "w") as f:
        for inst in instances:
            f.write(json.dumps(_jsonable(inst), sort_keys=True) + "\n")
    return len(instances)
