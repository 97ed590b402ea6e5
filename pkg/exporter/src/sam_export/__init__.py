"""Everything-mode proposal exporter: manifests consumable by the main pipeline."""

__version__ = "0.1.0"
