"""Partial BNN constants."""

MAX_PIXEL_VALUE = 0xFF
IMAGE_SIZE = 48
IMAGE_PIXELS = IMAGE_SIZE * IMAGE_SIZE
NUM_CLASSES = 7
NUM_GROUPS = 5

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1

RHO_INIT = -5.0
PROB_FLOOR = 1e-12

DEFAULT_SEED = 1234

CHECKPOINT_MAGIC = b"PBNN"
CHECKPOINT_VERSION = 1
DTYPE_TAG_FLOAT32 = 1

REPORT_SCHEMA_VERSION = 1

# SeedSequence stream tags derived from the run seed
STREAM_INIT = 0
STREAM_SAMPLE = 1
STREAM_SHUFFLE = 2
