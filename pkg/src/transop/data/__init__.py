from .preprocess import (
    augment,
    center_crop_pad,
    clip_hu,
    normalize,
    prepare_for_model,
    preprocess,
    resample,
    strip_skull,
)
from .records import ClinicalRecord, DatasetSplit, read_clinical_table, split_dataset, write_clinical_table
from .synth import synth_generate
from .volume import Volume, read_volume, write_volume

__all__ = [
    "ClinicalRecord",
    "DatasetSplit",
    "Volume",
    "augment",
    "center_crop_pad",
    "clip_hu",
    "normalize",
    "prepare_for_model",
    "preprocess",
    "read_clinical_table",
    "read_volume",
    "resample",
    "split_dataset",
    "strip_skull",
    "synth_generate",
    "write_clinical_table",
    "write_volume",
]
