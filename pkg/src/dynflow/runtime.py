"""Multi-threaded message-passing runtime.

Every IR node lives on exactly one worker thread. A worker owns an MPSC inbox
(any thread may put, only the worker gets) and a local two-level priority
queue: each loop iteration moves everything currently in the inbox into the
local queue, then handles one message, backward before forward and FIFO within
each class. The calling thread acts as the controller: it pumps instances
while fewer than ``max_active_keys`` are in flight and retires an instance
once every message it pumped has come back as a backward message.
"""
import json
import logging
import queue
import threading
import time
import traceback
from collections import Counter, defaultdict, deque
from dataclasses import dataclass, field

from . import optim
from .ir import BACKWARD, CONTROLLER, FORWARD, Message, StateFieldError, build_graph
from .nodes import Ppt, make_node

log = logging.getLogger(__name__)

_STOP = "stop"
_BARRIER = "barrier"


class RuntimeAbort(RuntimeError):
    pass


class DeadlockError(RuntimeAbort):
    def __init__(self, message, caches):
        super().__init__(message)
        self.caches = caches


class WorkerError(RuntimeAbort):
    def __init__(self, node_id, exc, tb):
        super().__init__(f"node {node_id!r} failed: {exc!r}\n{tb}")
        self.node_id = node_id
        self.original = exc


class ThrottleError(AssertionError):
    pass


@dataclass
class TrainConfig:
    threads: int = 1
    max_active_keys: int = 1
    min_update_frequency: int = 1
    muf_overrides: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=lambda: {"name": "sgd", "lr": 0.1})
    seed: int = 0
    placement: dict = field(default_factory=dict)
    diagnostics: bool = False
    debug: bool = False
    deadlock_timeout: float = 60.0

    def muf_for(self, node_id, replica_of=None):
        o = self.muf_overrides
        return int(o.get(node_id, o.get(replica_of, self.min_update_frequency)))


@dataclass
class EpochReport:
    epoch: int
    wall_s: float
    train_loss: float
    train_acc: float
    valid_acc: float
    inst_per_s: float
    mean_staleness: float
    instances: int
    staleness: dict = field(default_factory=dict)
    max_in_flight: int = 0
    updates: dict = field(default_factory=dict)
    valid_loss: float = float("nan")
    valid_inst_per_s: float = 0.0


def default_placement(graph, threads):
    """Each PPT gets the next worker round-robin; other nodes join a neighbour."""
    place = {}
    ppts = [n for n in graph.order if graph.nodes[n]["kind"] in ("linear", "embedding", "gru")]
    for i, n in enumerate(ppts):
        place[n] = i % threads
    pending = [n for n in graph.order if n not in place]
    for _ in range(len(pending) + 1):
        left = []
        for n in pending:
            near = [m for m in graph.predecessors(n) + graph.successors(n) if m in place]
            if near:
                place[n] = place[near[0]]
            else:
                left.append(n)
        if not left:
            break
        pending = left
    for n in graph.nodes:
        place.setdefault(n, 0)
    return place


class _Diag:
    """Per-node diagnostic record, written only by the owning worker."""

    __slots__ = ("fwd_emitted", "bwd_received", "events")

    def __init__(self):
        self.fwd_emitted = Counter()
        self.bwd_received = Counter()
        self.events = []


def _event_key(node, state):
    """Cache key for the event log; fan-out nodes key their outputs, so fall back to the full state."""
    if node.key_fn is not None:
        try:
            return node.key_fn(state)
        except StateFieldError:
            pass
    return (state.instance_id,) + state.values


class Worker:
    def __init__(self, index, runtime):
        self.index = index
        self.rt = runtime
        self.inbox = queue.SimpleQueue()
        self.hosted = set()
        self.sent = 0
        self.received = 0
        self.processed = Counter()
        self.priority_violations = 0
        self.thread = threading.Thread(target=self._run, name=f"dynflow-worker-{index}", daemon=True)

    def _run(self):
        rt = self.rt
        nodes, diag = rt.nodes, rt.diag
        inbox = self.inbox
        bwd, fwd, ctl = deque(), deque(), deque()
        get_nowait, Empty = inbox.get_nowait, queue.Empty
        diagnostics = rt.config.diagnostics
        while True:
            try:
                while True:
                    item = get_nowait()
                    if item[0] is None:
                        ctl.append(item)
                        continue
                    self.received += 1
                    if item[2].direction is BACKWARD:
                        bwd.append(item)
                    else:
                        fwd.append(item)
            except Empty:
                pass
            if bwd:
                item = bwd.popleft()
            elif fwd:
                item = fwd.popleft()
            elif ctl:
                _, cmd, arg = ctl.popleft()
                if cmd == _STOP:
                    return
                if cmd == _BARRIER:
                    rt.controller_q.put((None, _BARRIER, self.index))
                continue
            else:
                item = inbox.get()
                if item[0] is None:
                    ctl.append(item)
                    continue
                self.received += 1
                if item[2].direction is BACKWARD:
                    bwd.append(item)
                else:
                    fwd.append(item)
                continue
            node_id, port, msg = item
            if msg.direction is FORWARD and bwd:
                self.priority_violations += 1
            try:
                node = nodes[node_id]
                if diagnostics:
                    d = diag[node_id]
                    if msg.direction is BACKWARD and msg.train:
                        d.bwd_received[msg.state] += 1
                    key = _event_key(node, msg.state)
                    d.events.append((node_id, msg.direction.value, key, time.perf_counter(), self.index))
                outs = node.process(port, msg)
                self.processed[msg.direction] += 1
                for out_port, out in outs:
                    if diagnostics and out.direction is FORWARD and out.train:
                        diag[node_id].fwd_emitted[out.state] += 1
                    self.sent += 1
                    rt.route(node_id, out_port, out)
            except Exception as exc:  # surfaced on the controller thread
                rt.controller_q.put((None, "error", (node_id, exc, traceback.format_exc())))


class Runtime:
    """Hosts the nodes of one graph on worker threads and drives epochs.

    ``pump`` maps ``(instance, instance_id, train)`` to the list of
    ``(entry port, payload, state)`` the controller sends for that instance;
    ``label_entries`` names the entry ports whose messages are acknowledged
    even in evaluation mode.
    """

    def __init__(self, graph, config, pump, label_entries=("label",)):
        self.graph = build_graph(graph)
        self.config = config
        self.pump = pump
        self.label_entries = frozenset(label_entries)
        threads = max(1, int(config.threads))
        place = default_placement(self.graph, threads)
        for n, w in (config.placement or {}).items():
            if n not in self.graph.nodes:
                raise ValueError(f"placement names unknown node {n!r}")
            if not 0 <= int(w) < threads:
                raise ValueError(f"placement of {n!r} on worker {w} but only {threads} threads")
            place[n] = int(w)
        self.placement = place
        opt = self.optimizer = optim.make_optimizer(config.optimizer)
        self.nodes = {}
        for nid, spec in self.graph.nodes.items():
            self.nodes[nid] = make_node(
                nid,
                spec,
                optimizer=opt,
                seed=config.seed,
                min_update_frequency=config.muf_for(nid, spec.get("replica_of")),
                debug=config.debug,
            )
        self.diag = defaultdict(_Diag)
        for nid in self.nodes:
            self.diag[nid] = _Diag()
        self.controller_diag = _Diag()
        self.controller_q = queue.SimpleQueue()
        self.workers = [Worker(i, self) for i in range(threads)]
        for nid, w in place.items():
            self.workers[w].hosted.add(nid)
        self._inbox_of = {nid: self.workers[w].inbox for nid, w in place.items()}
        self._route_fwd = dict(self.graph.fwd)
        self._route_bwd = dict(self.graph.bwd)
        self.controller_sent = 0
        self.controller_received = 0
        self.throttle_samples = []
        self.completion_log = []
        self._next_iid = 0
        self._started = False
        self._closed = False
        self.epoch = 0

    # lifecycle -----------------------------------------------------------------

    def start(self):
        if not self._started:
            for w in self.workers:
                w.thread.start()
            self._started = True
        return self

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.shutdown()

    def shutdown(self, timeout=10.0):
        """Poison every worker, join threads and drop whatever is still queued."""
        if self._closed:
            return
        self._closed = True
        if self._started:
            for w in self.workers:
                w.inbox.put((None, _STOP, None))
            for w in self.workers:
                w.thread.join(timeout)
                if w.thread.is_alive():
                    log.error("worker %d did not stop within %.1fs", w.index, timeout)
        for w in self.workers:
            while True:
                try:
                    w.inbox.get_nowait()
                except queue.Empty:
                    break

    # messaging ---------------------------------------------------------------------

    def route(self, node_id, port, msg):
        if self._closed:
            raise RuntimeAbort("runtime is shut down")
        if msg.direction is FORWARD:
            dst, dport = self._route_fwd[(node_id, port)]
        else:
            dst, dport = self._route_bwd[(node_id, port)]
        if dst == CONTROLLER:
            self.controller_q.put((CONTROLLER, dport, msg))
        else:
            self._inbox_of[dst].put((dst, dport, msg))

    def _barrier(self):
        for w in self.workers:
            w.inbox.put((None, _BARRIER, None))
        waiting = {w.index for w in self.workers}
        deadline = time.monotonic() + self.config.deadlock_timeout
        while waiting:
            try:
                item = self.controller_q.get(timeout=max(0.01, deadline - time.monotonic()))
            except queue.Empty:
                raise DeadlockError("workers did not reach the barrier", self.cache_contents()) from None
            if item[0] is None and item[1] == _BARRIER:
                waiting.discard(item[2])
            elif item[0] is None and item[1] == "error":
                raise WorkerError(*item[2])
            else:
                raise RuntimeAbort(f"unexpected message at barrier: {item!r}")

    # controller ----------------------------------------------------------------------

    def drive(self, instances, train=True):
        """Push every instance through the graph; returns the wall time in seconds."""
        self.start()
        mak = max(1, int(self.config.max_active_keys))
        active = {}
        it = iter(instances)
        exhausted = False
        q = self.controller_q
        diag = self.config.diagnostics
        cdiag = self.controller_diag
        timeout = self.config.deadlock_timeout
        t0 = time.perf_counter()
        while True:
            while not exhausted and len(active) < mak:
                try:
                    inst = next(it)
                except StopIteration:
                    exhausted = True
                    break
                iid = self._next_iid
                self._next_iid += 1
                sends = self.pump(inst, iid, train)
                expect = len(sends) if train else sum(1 for p, _, _ in sends if p in self.label_entries)
                if expect == 0:
                    raise RuntimeAbort(f"instance {iid} pumps nothing that returns to the controller")
                active[iid] = expect
                for port, payload, state in sends:
                    msg = Message(FORWARD, payload, state, train)
                    if diag and train:
                        cdiag.fwd_emitted[state] += 1
                    self.controller_sent += 1
                    self.route(CONTROLLER, port, msg)
                self.completion_log.append(("start", iid))
            if len(active) > mak:
                raise ThrottleError(f"{len(active)} instances in flight with max_active_keys={mak}")
            self.throttle_samples.append(len(active))
            if exhausted and not active:
                break
            try:
                item = q.get(timeout=timeout)
            except queue.Empty:
                raise DeadlockError(
                    f"no progress for {timeout}s with {len(active)} active instances", self.cache_contents()
                ) from None
            if item[0] is None:
                if item[1] == "error":
                    raise WorkerError(*item[2])
                continue
            _, port, msg = item
            self.controller_received += 1
            if diag and msg.train:
                cdiag.bwd_received[msg.state] += 1
            iid = msg.state.instance_id
            if iid not in active:
                raise RuntimeAbort(f"completion for unknown instance {iid} on port {port!r}")
            active[iid] -= 1
            if active[iid] == 0:
                del active[iid]
                self.completion_log.append(("done", iid))
        return time.perf_counter() - t0

    # epochs ---------------------------------------------------------------------------

    def ppts(self):
        return {nid: n for nid, n in self.nodes.items() if isinstance(n, Ppt)}

    def loss_nodes(self):
        return [n for n in self.nodes.values() if n.kind == "loss"]

    def _collect_records(self):
        recs = []
        for n in self.loss_nodes():
            recs.extend(n.records)
            n.records = []
        return recs

    def train_pass(self, instances):
        """Training pass plus the quiesced end-of-epoch steps (flush, replica sync)."""
        for n in self.ppts().values():
            n.staleness.reset()
        wall = self.drive(instances, train=True)
        self._barrier()
        leftover = self.cache_contents()
        if leftover:
            raise RuntimeAbort(f"non-empty caches after a completed epoch: {leftover}")
        for n in self.ppts().values():
            n.block.flush()
        self.sync_replicas()
        return wall

    def evaluate(self, instances):
        """Forward-only pass; returns ``(accuracy, mean loss, wall seconds)``."""
        self._collect_records()
        wall = self.drive(instances, train=False)
        self._barrier()
        recs = self._collect_records()
        rows = sum(r[3] for r in recs)
        if not rows:
            return float("nan"), float("nan"), wall
        return sum(r[2] for r in recs) / rows, sum(r[1] for r in recs) / rows, wall

    def run_epoch(self, train_instances, valid_instances=None):
        train_instances = list(train_instances)
        self._collect_records()
        wall = self.train_pass(train_instances)
        recs = self._collect_records()
        rows = sum(r[3] for r in recs) or 1
        report = optim.staleness_report(self.ppts())
        valid_acc, valid_loss, vwall = (float("nan"), float("nan"), 0.0)
        if valid_instances is not None:
            valid_instances = list(valid_instances)
            valid_acc, valid_loss, vwall = self.evaluate(valid_instances)
        self.epoch += 1
        return EpochReport(
            epoch=self.epoch,
            wall_s=wall,
            train_loss=sum(r[1] for r in recs) / rows,
            train_acc=sum(r[2] for r in recs) / rows,
            valid_acc=valid_acc,
            inst_per_s=len(train_instances) / wall if wall > 0 else float("inf"),
            mean_staleness=optim.mean_staleness(report),
            instances=len(train_instances),
            staleness=report,
            max_in_flight=max(self.throttle_samples, default=0),
            updates={nid: n.block.update_counter for nid, n in self.ppts().items()},
            valid_loss=valid_loss,
            valid_inst_per_s=(len(valid_instances) / vwall) if valid_instances and vwall > 0 else 0.0,
        )

    def sync_replicas(self):
        """Average every replica group; call only while quiesced."""
        for members in self.graph.replicas.values():
            optim.average_blocks([self.nodes[m].block for m in members])

    # diagnostics ------------------------------------------------------------------------

    def cache_contents(self):
        out = {}
        for nid, n in self.nodes.items():
            c = n.cache_contents()
            if c:
                out[nid] = c
        return out

    def message_counts(self):
        sent = self.controller_sent + sum(w.sent for w in self.workers)
        received = self.controller_received + sum(w.received for w in self.workers)
        return {"sent": sent, "received": received}

    def state_multisets(self):
        """``{node: (forward states emitted, backward states received)}`` over training traffic.

        Evaluation messages never return gradients, so they are not counted.
        """
        out = {nid: (d.fwd_emitted, d.bwd_received) for nid, d in self.diag.items()}
        out[CONTROLLER] = (self.controller_diag.fwd_emitted, self.controller_diag.bwd_received)
        return out

    def write_event_log(self, path):
        events = sorted((e for d in self.diag.values() for e in d.events), key=lambda e: e[3])
        with open(path, "w") as f:
            for node_id, direction, key, t, worker in events:
                f.write(json.dumps({"node": node_id, "dir": direction, "key": list(key) if key else None, "t": t, "worker": worker}) + "\n")
        return len(events)

    def parameters(self):
        return {nid: n.block.snapshot() for nid, n in self.ppts().items()}
