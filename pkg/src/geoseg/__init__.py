"""geoseg: build and evaluate aerial-imagery segmentation datasets.

The package turns a region polygon, a tile imagery service, and vector
ground truth into a tiled training dataset (images, class masks, a JSON
manifest with train/test splits and diversity-based repetition counts),
then scores predicted masks with buffered-IoU metrics, confusion
matrices, and cross-epoch trend reports. See the `geoseg` CLI for the
stage-by-stage workflow.
"""

__version__ = "0.1.0"

from .errors import (ConfigError, DataError, GeosegError, NetworkError,
                     PipelineError)

__all__ = [
    "ConfigError", "DataError", "GeosegError", "NetworkError",
    "PipelineError", "__version__",
]
