# Constants for SigCAM Lab

# File paths
CONFIG_FILE = "config/settings.yaml"
DEFAULT_DATA_DIR = "data/synth"
DEFAULT_OUTPUT_DIR = "runs"

# Binary formats
DATASET_BLOB_MAGIC = b"SYNS"
DATASET_BLOB_VERSION = 1
DATASET_MANIFEST_NAME = "manifest.csv"
CHECKPOINT_MAGIC = b"CAMB"
CHECKPOINT_VERSION = 1
DTYPE_TAG_F32 = 1

# Numerics
DENOMINATOR_EPS = 1e-8
FIDELITY_MIN_SCORE = 1e-12

# Synthetic dataset defaults
DEFAULT_NUM_CLASSES = 4
DEFAULT_IMAGE_SIZE = 32
DEFAULT_SPLIT_SIZES = {"train": 2000, "val": 400, "test": 400}
SPLIT_IDS = {"train": 0, "val": 1, "test": 2}
MOTIFS = [
    "disk",
    "ring",
    "square",
    "cross",
    "triangle",
    "stripes_patch",
    "checker_patch",
    "diagonal_bar",
]

# Backbone
BACKBONE_CHANNELS = (16, 32, 64)
BACKBONE_KERNEL = 3

# Optimizer defaults
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Localization evaluation
GT_LOC_THRESHOLD = 0.2
GT_LOC_IOU = 0.5
MBA_IOU_THRESHOLDS = (0.3, 0.5, 0.7)
MBA_THRESHOLD_STEP = 0.001

# Distortion lab grids (multiples of std(w) for shift, max|w| for collapse)
SHIFT_DELTA_MULTIPLIERS = (0.1, 0.5, 1.0, 5.0)
COLLAPSE_DELTA_MULTIPLIERS = (1.0, 2.0, 5.0)

# CAM methods and branches
CAM_METHODS = ["cam", "gradcam", "gradcampp", "xgradcam", "layercam", "scorecam"]
BRANCHES = ["softmax", "sigmoid"]
POS_WEIGHT_MODES = ["none", "half", "balanced"]

# Report columns (one row per method/branch/nwc/pos_weight_mode)
REPORT_KEY_COLUMNS = ["method", "branch", "nwc", "pos_weight_mode"]
REPORT_METRIC_COLUMNS = [
    "top1_cls",
    "top1_loc",
    "gt_loc",
    "mbav2",
    "pxap",
    "avg_drop",
    "inc_conf",
]
