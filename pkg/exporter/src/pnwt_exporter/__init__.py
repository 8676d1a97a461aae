"""Convert torchvision conv stacks into PNWT weight files."""

from .export import (
    ExportManifest,
    UnsupportedLayerError,
    conv_stack,
    export,
    read_pnwt_structs,
    write_manifest,
    write_pnwt,
)

__version__ = "0.1.0"
