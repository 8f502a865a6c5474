"""
Tests for the training resource monitor
"""

import time

import psutil
import pytest

from monitoring import TrainingMonitor


class TestTrainingMonitor:
    """psutil snapshots, alerts and the run report"""

    def test_empty_report(self):
        report = TrainingMonitor().report()
        assert report["message"] == "No metrics available"
        assert report["steps"] == 0

    def test_sample(self):
        monitor = TrainingMonitor()
        for _ in range(3):
            monitor.record_step()
        snapshot = monitor.sample()
        assert snapshot.step == 3
        assert snapshot.rss_mb > 0
        assert 0 <= snapshot.system_memory_percent <= 100

    def test_iterations_per_second(self):
        monitor = TrainingMonitor()
        monitor.record_step()
        time.sleep(0.01)
        monitor.record_step()
        assert monitor.sample().iterations_per_second > 0

    def test_threshold_alerts(self):
        monitor = TrainingMonitor(alert_thresholds={"rss_mb": 0.001})
        monitor.sample()
        alerts = monitor.get_alerts()
        assert len(alerts) == 1
        assert alerts[0].metric == "rss_mb"
        assert alerts[0].level == "CRITICAL"
        assert monitor.get_alerts("WARNING") == []

    def test_no_alerts_under_threshold(self):
        monitor = TrainingMonitor(alert_thresholds={"rss_mb": 1e9, "cpu_percent": 1e9})
        monitor.sample()
        assert monitor.get_alerts() == []

    def test_history_is_bounded(self):
        monitor = TrainingMonitor(history=2)
        for _ in range(5):
            monitor.sample()
        assert len(monitor.snapshots) == 2

    def test_report(self):
        monitor = TrainingMonitor(alert_thresholds={"rss_mb": 0.001})
        monitor.record_step()
        monitor.sample()
        monitor.sample()
        report = monitor.report()
        assert report["steps"] == 1
        assert report["snapshots"] == 2
        assert report["peak_rss_mb"] >= report["averages"]["rss_mb"]
        assert report["alerts_summary"] == {"total": 2, "critical": 2, "warning": 0}
        assert isinstance(report["latest"]["timestamp"], str)

    def test_psutil_failure_is_logged(self, monkeypatch):
        monitor = TrainingMonitor()

        def broken():
            raise psutil.AccessDenied()

        monkeypatch.setattr(psutil, "virtual_memory", broken)
        snapshot = monitor.sample()
        assert snapshot.rss_mb == 0.0


@pytest.mark.parametrize("value, level", [(12.0, "WARNING"), (20.0, "CRITICAL")])
def test_alert_levels(value, level):
    monitor = TrainingMonitor(alert_thresholds={"rss_mb": 1e9, "cpu_percent": 1e9})
    snapshot = monitor.sample()
    monitor.thresholds["cpu_percent"] = 10.0
    snapshot.cpu_percent = value
    monitor._check_alerts(snapshot)
    assert [a.level for a in monitor.get_alerts()] == [level]
