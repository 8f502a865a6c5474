"""
Resource monitoring for rawtobit training and evaluation runs
Process memory, CPU and throughput snapshots with threshold alerts
"""

import logging
import time
from collections import deque
from dataclasses import asdict, dataclass
from datetime import datetime
from typing import Dict, List, Optional

import psutil

logger = logging.getLogger(__name__)

CRITICAL_FACTOR = 1.5


@dataclass
class ResourceSnapshot:
    """Process metrics at one point of a run"""
    timestamp: datetime
    step: int
    rss_mb: float
    cpu_percent: float
    system_memory_percent: float
    iterations_per_second: float


@dataclass
class Alert:
    """Alert for monitoring thresholds"""
    level: str  # WARNING, CRITICAL
    message: str
    timestamp: datetime
    metric: str
    value: float
    threshold: float


class TrainingMonitor:
    """
    Samples the current process with psutil and keeps a bounded history
    """

    def __init__(self, alert_thresholds: Optional[Dict[str, float]] = None, history: int = 1440):
        self.process = psutil.Process()
        self.alerts: deque = deque(maxlen=1000)
        self.snapshots: deque = deque(maxlen=history)
        self.step_times: deque = deque(maxlen=1000)
        self.steps = 0
        self.started = time.time()

        self.thresholds = {
            'rss_mb': 16384,
            'cpu_percent': 800,
        }
        if alert_thresholds:
            self.thresholds.update(alert_thresholds)
        # primes psutil's cpu counter; the first reading is always 0
        self.process.cpu_percent(interval=None)

    def record_step(self) -> None:
        self.steps += 1
        self.step_times.append(time.time())

    def _iterations_per_second(self) -> float:
        if len(self.step_times) < 2:
            return 0.0
        elapsed = self.step_times[-1] - self.step_times[0]
        return (len(self.step_times) - 1) / elapsed if elapsed > 0 else 0.0

    def sample(self) -> ResourceSnapshot:
        """Take a snapshot, store it and check it against the thresholds"""
        try:
            rss_mb = self.process.memory_info().rss / 1024 / 1024
            cpu = self.process.cpu_percent(interval=None)
            system_memory = psutil.virtual_memory().percent
        except psutil.Error as e:
            logger.error(f"Error collecting metrics: {e}")
            rss_mb = cpu = system_memory = 0.0

        snapshot = ResourceSnapshot(
            timestamp=datetime.now(),
            step=self.steps,
            rss_mb=rss_mb,
            cpu_percent=cpu,
            system_memory_percent=system_memory,
            iterations_per_second=self._iterations_per_second(),
        )
        self.snapshots.append(snapshot)
        self._check_alerts(snapshot)
        return snapshot

    def _check_alerts(self, snapshot: ResourceSnapshot) -> None:
        checks = [
            ('rss_mb', snapshot.rss_mb, self.thresholds['rss_mb']),
            ('cpu_percent', snapshot.cpu_percent, self.thresholds['cpu_percent']),
        ]
        for metric_name, value, threshold in checks:
            if value > threshold:
                level = "CRITICAL" if value > threshold * CRITICAL_FACTOR else "WARNING"
                alert = Alert(
                    level=level,
                    message=f"{metric_name} is {value:.2f}, above threshold {threshold}",
                    timestamp=snapshot.timestamp,
                    metric=metric_name,
                    value=value,
                    threshold=threshold,
                )
                self.alerts.append(alert)
                logger.warning(f"ALERT: {alert.message}")

    def get_alerts(self, level: Optional[str] = None) -> List[Alert]:
        if level:
            return [a for a in self.alerts if a.level == level]
        return list(self.alerts)

    def report(self) -> Dict:
        """Summary of the run so far"""
        if not self.snapshots:
            return {"message": "No metrics available", "steps": self.steps}

        snapshots = list(self.snapshots)
        return {
            "steps": self.steps,
            "elapsed_seconds": round(time.time() - self.started, 2),
            "snapshots": len(snapshots),
            "averages": {
                "rss_mb": round(sum(s.rss_mb for s in snapshots) / len(snapshots), 2),
                "cpu_percent": round(sum(s.cpu_percent for s in snapshots) / len(snapshots), 2),
            },
            "peak_rss_mb": round(max(s.rss_mb for s in snapshots), 2),
            "latest": {**asdict(snapshots[-1]), "timestamp": snapshots[-1].timestamp.isoformat()},
            "alerts_summary": {
                "total": len(self.alerts),
                "critical": len(self.get_alerts("CRITICAL")),
                "warning": len(self.get_alerts("WARNING")),
            },
        }
