"""Visual pattern mining on frozen convolutional features.

Discovers patterns as sparse combinations of final-layer filters, localizes
them by a reverse (deconvolution) pass, and evaluates the result with
object-proposal metrics and a classification proxy.
"""

from .kernels import (
    ConvKernel,
    PoolSwitches,
    ShapeError,
    conv2d_forward,
    global_max_pool,
    maxpool2d,
    relu,
    unpool2d,
)
from .backbone import (
    BackboneSpec,
    ConvLayer,
    ForwardTrace,
    MaxPoolLayer,
    ReluLayer,
    forward,
    load_weights,
    save_weights,
)
from .filterbank import builtin_filterbank
from .mining import (
    PatternMiner,
    ThresholdBinarizer,
    VisualPattern,
    binarize,
    detect,
    extract_patterns,
    fit_thresholds,
    head_forward,
    head_loss,
    train_head,
)
from .localize import BBox, bbox_of, deconv_filter, intersect_regions, localize_pattern, region_of
from .metrics import SoftmaxHead, abo, iou, mabo, pattern_features, recall_at
from .synth import DatasetManifest, MotifSpec, generate, read_image, read_manifest, write_image

__version__ = "0.1.0"
