"""StatsD telemetry for training runs and ablation suites."""

import time

from .losses import LossReport


class MetricsClient:
    """Sends training metrics to a StatsD server."""

    def __init__(self, host: str, port: int = 8125) -> None:
        try:
            import statsd
        except ImportError:
            raise SystemExit(
                "Error: statsd package not installed. "
                'Install it with: uv pip install -e ".[metrics]"'
            )

        self._client = statsd.StatsClient(host, port, prefix="psigan")
        self._start_time = time.monotonic()

    def iteration(self, report: LossReport, lr: float) -> None:
        """Record one training iteration's loss components."""
        self._client.incr("train.iterations")
        self._client.gauge("train.lr", lr)
        for name, value in report.as_dict().items():
            self._client.gauge(f"loss.{name}", value)

    def non_finite(self, names: list[str]) -> None:
        """Record an aborted step."""
        self._client.incr("train.nonfinite")
        for name in names:
            self._client.incr(f"train.nonfinite.{name}")

    def checkpoint_saved(self) -> None:
        self._client.incr("checkpoint.saved")

    def suite_entry(self, status: str) -> None:
        """Record a suite entry outcome (completed, skipped or failed)."""
        self._client.incr(f"suite.entry.{status}")

    def end_run(self, total_iterations: int) -> None:
        """Send run summary metrics."""
        duration = time.monotonic() - self._start_time
        self._client.gauge("run.duration", round(duration))
        self._client.gauge("run.iterations", total_iterations)
        if duration > 0:
            per_minute = round(total_iterations / (duration / 60), 1)
            self._client.gauge("run.iterations_per_minute", per_minute)


class NoOpMetricsClient:
    """No-op metrics client used when StatsD is not configured."""

    def iteration(self, report: LossReport, lr: float) -> None:
        pass

    def non_finite(self, names: list[str]) -> None:
        pass

    def checkpoint_saved(self) -> None:
        pass

    def suite_entry(self, status: str) -> None:
        pass

    def end_run(self, total_iterations: int) -> None:
        pass


def create_metrics_client(
    host: str | None, port: int = 8125
) -> MetricsClient | NoOpMetricsClient:
    """Factory: returns a real client if host is provided, otherwise no-op."""
    if host is None:
        return NoOpMetricsClient()
    return MetricsClient(host, port)
