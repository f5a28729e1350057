"""Back-of-envelope throughput and bandwidth estimate for a graph network step."""
from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class ThroughputModel:
    hidden: float
    nodes: float
    edges: float
    edge_types: float
    steps: float
    device_flops: float = 1e12
    overhead: float = 0.5
    bits_per_scalar: float = 32

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ValueError(f"{k} must be positive, got {v}")


def estimate(m):
    """Forward/backward op counts per propagation step, samples/s and bits/s.

    The dominant cost per step is the larger of the node update
    (``2 N H^2`` multiply-adds) and the per-type edge transforms
    (``E H^2 / C``); a backward pass costs three forward passes.
    """
    core = max(2 * m.nodes * m.hidden ** 2, m.edges * m.hidden ** 2 / m.edge_types)
    fwdop = 2 * core
    bwdop = 6 * core
    denom = (fwdop + bwdop) * m.steps
    if denom == 0:
        raise ZeroDivisionError("degenerate model: zero operations per sample")
    samples = m.overhead * m.device_flops / denom
    bandwidth = m.bits_per_scalar * samples * max(m.nodes, m.edges) * m.hidden
    return {"fwdop": fwdop, "bwdop": bwdop, "samples_per_s": samples, "bandwidth_bits_per_s": bandwidth}


def sig(x, digits=2):
    """``x`` rounded to ``digits`` significant figures."""
    return float(f"{x:.{digits - 1}e}")
