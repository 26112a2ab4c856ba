LOGGER_NAME = "coelab"
LOG_LEVEL = "INFO"

# Element precision
DEFAULT_DTYPE = "f64"
DTYPES = {"f32": "<f4", "f64": "<f8"}

# CLI exit codes
EXIT_OK = 0
EXIT_VERIFICATION_FAILED = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3

# Run directory layout
METRICS_FILE = "metrics.jsonl"
FINAL_CHECKPOINT = "final.ckpt"
RESOLVED_CONFIG_FILE = "config.resolved.json"
CHECKPOINT_PATTERN = "step_{step:06d}.ckpt"
METADATA_KEY = "__meta__"

HEATMAP_HEADER = ["layer", "prev_expert", "next_expert", "count", "row_normalized"]
HEATMAP_PATTERN = "coactivation_layer{layer}.csv"
ROUTING_SUMMARY_FILE = "routing_summary.json"
GRID_REPORT_FILE = "grid_report.json"

# Verification
GRADCHECK_STEP = 1e-5
GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_DENOMINATOR_FLOOR = 1e-8
GRADCHECK_INIT_STD = 0.2
GRADCHECK_BATCH_SIZE = 2
GRADCHECK_SEQ_LEN = 8

# Byte-level corpus
BYTE_VOCAB_SIZE = 256
