"""featexport: dump image datasets into streamdet's on-disk formats."""

from .export import (
    ExportManifest,
    ExportSummary,
    ManifestError,
    build_backbone,
    canonical_class_ids,
    export,
    load_manifest,
)

__all__ = [
    "ExportManifest",
    "ExportSummary",
    "ManifestError",
    "build_backbone",
    "canonical_class_ids",
    "export",
    "load_manifest",
]
