"""Dense per-pixel features from patch-based backends, unsupervised object
detection and weakly supervised pixel classifiers."""

from ._featpipe import (
    Backend,
    BackendError,
    ClassifierError,
    ConfigError,
    FmapError,
    ImageDecodeError,
    PixelClassifier,
    Server,
    StoreError,
    TransformSet,
    benchmark,
    blob_image,
    box_iou,
    callback_backend,
    color_fixture,
    corloc,
    interiority_fixture,
    load_config,
    make_backend,
    miou,
    pca_rgb,
    predict,
    read_fmap,
    read_image,
    read_labels,
    train_classifier,
    unsupervised,
    upsample,
    write_blob_dataset,
    write_fmap,
    write_labels,
    write_png,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
