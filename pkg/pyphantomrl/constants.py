"""Fixed tables and constants shared across the pipeline."""

from enum import IntEnum
from typing import Dict, List, Tuple


class Vocabulary:
    """Closed report vocabulary (version 1).

    Ids are part of the on-disk contract: checkpoints store embedding rows in
    this order, so entries may only ever be appended.
    """

    VERSION = 1
    PAD = 0
    UNK = 1

    WORDS: Tuple[str, ...] = (
        "<pad>",
        "<unk>",
        "no",
        "effusion",
        "opacity",
        "left",
        "right",
        "small",
        "large",
        "cardiomegaly",
        "device",
        "lungs",
        "clear",
        "in",
        "lung",
        "the",
        "present",
        "heart",
        ".",
        "enlarged",
        "is",
        "seen",
        "support",
        "a",
        "round",
    )

    TOKEN_TO_ID: Dict[str, int] = {word: index for index, word in enumerate(WORDS)}

    @classmethod
    def size(cls) -> int:
        """Number of entries including PAD and UNK."""
        return len(cls.WORDS)


class Finding(IntEnum):
    """Label classes, in label-vector order."""

    EFFUSION = 0
    CARDIOMEGALY = 1
    OPACITY = 2
    DEVICE = 3


FINDING_NAMES: List[str] = [finding.name.lower() for finding in Finding]
K_LABELS = len(Finding)

# Words whose presence in a non-negated sentence marks the finding as positive.
FINDING_KEYWORDS: Dict[Finding, Tuple[str, ...]] = {
    Finding.EFFUSION: ("effusion",),
    Finding.CARDIOMEGALY: ("cardiomegaly", "enlarged"),
    Finding.OPACITY: ("opacity",),
    Finding.DEVICE: ("device",),
}

NEGATION = "no"
SENTENCE_END = "."


class PostureRange:
    """Ranges used when the generator samples a posture, and the regressor clamp."""

    SCALE = (0.85, 1.15)
    TRANSLATION = 0.10
    ROTATION = 0.15

    CLAMP_SCALE = (0.5, 1.5)
    CLAMP_TRANSLATION = 0.5
    CLAMP_ROTATION = 3.141592653589793


class CheckpointFormat:
    """Binary checkpoint container constants."""

    MAGIC = b"CXRL"
    VERSION = 1
    # magic + version (u32) + header length (u32)
    PREAMBLE_BYTES = 12


class ExitCode(IntEnum):
    """Process exit codes returned by the CLI."""

    OK = 0
    FAILURE = 1
    USAGE = 2
    CONFIG = 3
    IO = 4
    DIVERGENCE = 5
    DATASET_MISMATCH = 6
    LOCKED = 7


DATASET_VERSION = 1
MANIFEST_NAME = "manifest.txt"
META_NAME = "meta.jsonl"
LOCK_NAME = ".pyphantomrl.lock"

TRAINING_LOG_COLUMNS = [
    "step",
    "mean_r_align",
    "mean_r_diag",
    "mean_r_consist",
    "mean_total",
    "grad_norm",
    "seconds",
]

SCORE_COLUMNS = ["index", "r_align", "r_diag", "r_consist", "total"]

ABLATION_ROWS = ["anchor", "+r_align", "+r_diag", "+r_consist", "combined"]
VARIANT_ROWS = ["w/o ACE", "w/o comparative"]
