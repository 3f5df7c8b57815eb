"""Service layer: workspace artifact registry, HTTP API, and pipeline glue."""
