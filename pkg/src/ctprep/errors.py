"""Exception types raised across the pipeline.

Every error that aborts work on a single scan derives from CtPrepError so the
batch driver can catch one type, record the failure in the manifest, and move
on to the next scan.
"""


class CtPrepError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(CtPrepError):
    """Bad or missing configuration (maps to CLI exit code 1)."""


# --- DICOM parsing ---------------------------------------------------------

class NotDicom(CtPrepError):
    """File does not start with a DICOM preamble or a plausible bare tag."""


class UnsupportedTransferSyntax(CtPrepError):
    """Compressed or otherwise unsupported transfer syntax / pixel encoding."""


class TruncatedFile(CtPrepError):
    """Element header or value runs past the end of the file."""


class MissingPixelData(CtPrepError):
    """Dataset ended without a pixel data element."""


class InconsistentGeometry(CtPrepError):
    """Slices within one series disagree on rows/cols/pixel spacing."""


# --- volume assembly / NIfTI -----------------------------------------------

class SingleSliceNoSpacing(CtPrepError):
    """Single-slice series without a slice thickness tag to supply spacing."""


class UnsupportedVariant(CtPrepError):
    """NIfTI file is not the single-file little-endian float32 variant."""


# --- triage -----------------------------------------------------------------

class DegenerateOrientation(CtPrepError):
    """Slice normal has no strictly dominant axis component."""


# --- registration -----------------------------------------------------------

class NonConvergence(CtPrepError):
    """Optimizer exhausted its budget with the similarity below the floor."""


class DegenerateVolume(CtPrepError):
    """Volume has constant intensity; the similarity metric is undefined."""


# --- registration QC --------------------------------------------------------

class TooFewSamples(CtPrepError):
    """Not enough transforms to fit the clustering model."""


class EmNonConvergence(CtPrepError):
    """EM failed to converge on every restart for some component count."""


class UndecidedCluster(CtPrepError):
    """A cluster has no valid/invalid decision recorded."""


# --- standardization --------------------------------------------------------

class NoHeadFound(CtPrepError):
    """No voxel reaches the bone threshold; cannot locate the head."""


# --- pipeline ----------------------------------------------------------------

class CorruptManifest(CtPrepError):
    """Manifest line is not valid JSON or lacks required keys."""
