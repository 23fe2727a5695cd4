"""
Performance monitor for training and inference stages.
Tracks wall time and resident memory, drives tqdm progress bars.
"""

import logging
import os
import time
from contextlib import contextmanager
from datetime import datetime
from typing import Any, Dict, Optional

import pandas as pd
import psutil
from tqdm import tqdm

logger = logging.getLogger(__name__)


class PerformanceMonitor:
    """Monitor and report on stage performance"""

    def __init__(self, show_progress: bool = True):
        self.metrics: Dict[str, Dict[str, Any]] = {}
        self.show_progress = show_progress

    @contextmanager
    def track_operation(self, operation_name: str, total_items: Optional[int] = None):
        """Context manager yielding a progress updater for one stage"""
        start_time = time.time()
        start_memory = self._get_memory_usage()

        progress_bar = None
        if total_items and self.show_progress:
            progress_bar = tqdm(total=total_items, desc=operation_name, unit='it', leave=False)

        def update_progress(n: int = 1, **postfix):
            if progress_bar:
                progress_bar.update(n)
                if postfix:
                    progress_bar.set_postfix(postfix)

        try:
            yield update_progress
        finally:
            duration = time.time() - start_time
            memory_delta = self._get_memory_usage() - start_memory

            self.metrics[operation_name] = {
                'duration_seconds': duration,
                'memory_delta_mb': memory_delta,
                'items_processed': total_items,
                'items_per_second': total_items / duration if total_items and duration > 0 else None,
                'timestamp': datetime.now().isoformat()
            }

            if progress_bar:
                progress_bar.close()

            logger.info(
                f"{operation_name}: {duration:.2f}s, Memory: {memory_delta:+.1f}MB"
                + (f", Speed: {total_items / duration:.1f} it/s" if total_items and duration > 0 else "")
            )

    def _get_memory_usage(self) -> float:
        """Current process resident memory in MB"""
        process = psutil.Process(os.getpid())
        return process.memory_info().rss / 1024 / 1024

    def summary_frame(self) -> pd.DataFrame:
        """All tracked stages as a table"""
        if not self.metrics:
            return pd.DataFrame(columns=['operation', 'duration_seconds', 'memory_delta_mb'])
        frame = pd.DataFrame.from_dict(self.metrics, orient='index')
        frame.index.name = 'operation'
        return frame.reset_index()

    def create_performance_summary(self) -> str:
        """Human-readable summary of all tracked operations"""
        lines = [
            "=" * 60,
            "PERFORMANCE SUMMARY",
            "=" * 60,
        ]
        total_duration = 0.0
        for operation, metrics in self.metrics.items():
            total_duration += metrics['duration_seconds']
            lines.append(f"{operation}: {metrics['duration_seconds']:.2f}s, "
                         f"memory {metrics['memory_delta_mb']:+.1f}MB")
        lines.extend(["-" * 60, f"Total Duration: {total_duration:.2f}s"])
        return "\n".join(lines)
