"""
Discovery message-count experiment.

N nodes with empty participant sets start at the same virtual instant, run
discovery and key agreement for the group and then for one channel, and the
run records how many JOINs and JOIN_RESPONSEs were put on the wire until every
node holds the same k_g and k_ch.
"""

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Optional

from lcmsec.bench.nodes import issue_identities, run_until_converged, sim_sessions
from lcmsec.bench.report import DISCOVERY_COLUMNS, BenchReport
from lcmsec.core.configstore import TimingConfig
from lcmsec.core.const import BENCH_DISCOVERY_CHANNEL, BENCH_DISCOVERY_TIME_BOUND_MS, BENCH_GROUP
from lcmsec.core.exceptions import BenchException
from lcmsec.core.transport import SimNet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiscoveryRun:
    nodes: int
    seed: int
    loss: float
    mu_ms: float
    sigma_ms: float
    converged: bool
    time_ms: Optional[float]
    joins: int
    join_responses: int
    restarts: int

    def row(self) -> dict:
        return dict(
            nodes=self.nodes,
            seed=self.seed,
            loss=self.loss,
            mu_ms=self.mu_ms,
            sigma_ms=self.sigma_ms,
            converged=self.converged,
            time_ms=self.time_ms,
            joins=self.joins,
            join_responses=self.join_responses,
            restarts=self.restarts,
        )


def run_discovery(nodes: int, seed: int = 0, mu_ms: float = 25.0, sigma_ms: float = 5.0, loss: float = 0.0,
                  bound_ms: float = BENCH_DISCOVERY_TIME_BOUND_MS, timing: Optional[TimingConfig] = None,
                  channel: str = BENCH_DISCOVERY_CHANNEL) -> DiscoveryRun:
    """One simulated run; the same arguments always give the same counts"""
    if nodes < 2:
        raise BenchException("at least two nodes are needed for a key agreement")
    net = SimNet(seed, loss, mu_ms, sigma_ms)
    _, identities = issue_identities(nodes, BENCH_GROUP, [channel])
    sessions = sim_sessions(net, identities, BENCH_GROUP, [channel], timing)
    for session in sessions:
        session.start()
    converged_at = run_until_converged(net, sessions, bound_ms)
    stats = Counter()
    for session in sessions:
        stats.update(session.discovery_stats())
    for session in sessions:
        session.close()
    run = DiscoveryRun(
        nodes=nodes,
        seed=seed,
        loss=loss,
        mu_ms=mu_ms,
        sigma_ms=sigma_ms,
        converged=converged_at is not None,
        time_ms=converged_at,
        joins=stats["join_sent"],
        join_responses=stats["join_response_sent"],
        restarts=stats["restarts"],
    )
    if run.converged:
        logger.info(f"{nodes} nodes seed {seed}: converged at {converged_at:.1f} ms, "
                    f"{run.joins} JOINs, {run.join_responses} JOIN_RESPONSEs")
    else:
        logger.warning(f"{nodes} nodes seed {seed}: no convergence within {bound_ms} ms")
    return run


def sweep(node_counts: Iterable[int], runs: int = 1, seed: int = 0, mu_ms: float = 25.0, sigma_ms: float = 5.0,
          loss: float = 0.0, bound_ms: float = BENCH_DISCOVERY_TIME_BOUND_MS,
          timing: Optional[TimingConfig] = None) -> BenchReport:
    """One row per (node count, seed) over seeds seed .. seed + runs - 1"""
    if runs <= 0:
        raise BenchException("runs must be positive")
    report = BenchReport(DISCOVERY_COLUMNS, dict(runs=runs, seed=seed, mu_ms=mu_ms, sigma_ms=sigma_ms, loss=loss))
    for nodes in node_counts:
        for s in range(seed, seed + runs):
            report.add_row(**run_discovery(nodes, s, mu_ms, sigma_ms, loss, bound_ms, timing).row())
    return report
