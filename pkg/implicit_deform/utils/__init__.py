"""Cross-cutting helpers: errors and logging, configuration, artifacts, performance tracking."""
