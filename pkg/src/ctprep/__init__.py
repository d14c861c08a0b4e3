"""ct-prep: batch preparation of clinical head-CT series for deep learning.

The library half of the package. Each stage is importable on its own:
DICOM parsing (`dicom_io`), volume assembly and NIfTI I/O (`volume`),
exclusion triage (`triage`), template registration (`registration`),
cluster-based registration QC (`qc`), geometric/intensity standardization
(`standardize`), and the manifest-driven orchestration (`pipeline`). The
`ctprep` console script in `cli` drives the same code.
"""

from .config import PipelineConfig, load_config
from .errors import (ConfigError, CorruptManifest, CtPrepError,
                     DegenerateOrientation, DegenerateVolume,
                     EmNonConvergence, InconsistentGeometry, MissingPixelData,
                     NoHeadFound, NonConvergence, NotDicom,
                     SingleSliceNoSpacing, TooFewSamples, TruncatedFile,
                     UndecidedCluster, UnsupportedTransferSyntax,
                     UnsupportedVariant)
from .pipeline import ExclusionReport, RunPaths, RunResult, run
from .registration import (AffineTransform, RegistrationConfig,
                           RegistrationResult, TemplateBank, make_affine,
                           mutual_information, register, select_template)
from .standardize import CropBox, find_head_box, standardize_volume, window_scale
from .triage import TriageVerdict, triage_series
from .volume import Volume, assemble, read_nifti, write_nifti

__version__ = "0.1.0"

__all__ = [
    "AffineTransform",
    "ConfigError",
    "CorruptManifest",
    "CropBox",
    "CtPrepError",
    "DegenerateOrientation",
    "DegenerateVolume",
    "EmNonConvergence",
    "ExclusionReport",
    "InconsistentGeometry",
    "MissingPixelData",
    "NoHeadFound",
    "NonConvergence",
    "NotDicom",
    "PipelineConfig",
    "RegistrationConfig",
    "RegistrationResult",
    "RunPaths",
    "RunResult",
    "SingleSliceNoSpacing",
    "TemplateBank",
    "TooFewSamples",
    "TriageVerdict",
    "TruncatedFile",
    "UndecidedCluster",
    "UnsupportedTransferSyntax",
    "UnsupportedVariant",
    "Volume",
    "assemble",
    "find_head_box",
    "load_config",
    "make_affine",
    "mutual_information",
    "read_nifti",
    "register",
    "run",
    "select_template",
    "standardize_volume",
    "triage_series",
    "window_scale",
    "write_nifti",
]
