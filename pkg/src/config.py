"""Configuration settings for the SDN WLAN simulator and controller."""

import os
from pathlib import Path

from dotenv import load_dotenv

# Load .env from project root (parent of src directory)
_project_root = Path(__file__).parent.parent
load_dotenv(_project_root / ".env")

# Service mode
CMI_PORT = int(os.getenv("SDNWLAN_CMI_PORT", "6633"))
CMI_HOST = os.getenv("SDNWLAN_CMI_HOST", "127.0.0.1")

# Output locations
OUTPUT_DIR = Path(os.getenv("SDNWLAN_OUTPUT_DIR", str(_project_root / "output")))
LOGS_DIR = Path(os.getenv("SDNWLAN_LOG_DIR", str(_project_root / "logs")))
SCENARIO_DIR = _project_root / "scenarios"

# Debug settings
CHECK_INVARIANTS = os.getenv("SDNWLAN_CHECK_INVARIANTS", "0") == "1"
LOG_LEVEL = os.getenv("SDNWLAN_LOG_LEVEL", "WARNING")

# CMI protocol
CMI_VERSION = 1
MAX_FRAME_BYTES = 1 << 20  # 1 MiB body cap

# Controller settings
RETRANSMIT_TIMEOUT_US = 50_000
MAX_ATTEMPTS = 3
RSSI_HISTORY_LEN = 8
AUDIT_INTERVAL_US = 10_000  # Control RTT probe period in simulation
DEFAULT_SLICE = "default"

# Radio model
PL0_DB = 40.0
D0_M = 1.0
PATH_LOSS_EXPONENT = 3.0
ASSOC_THRESHOLD_DBM = -82.0
WIRELESS_CAPACITY_MBPS = 50.0
CHANNELS = (1, 6, 11)
MAX_ASSOCIATED = 64
DEFAULT_TX_POWER_DBM = 20.0

# Data plane overheads and buffers
IPSEC_OVERHEAD_BYTES = 64
N3_HEADER_BYTES = 36
N2_ENVELOPE_BYTES = 40
HANDOVER_BUFFER_PACKETS = 256
QUEUE_CAP_PACKETS = 100
DRR_MTU_BYTES = 1500
BUCKET_DEPTH_BYTES = 2 * 1500

# Management frame sizes (bytes)
PROBE_REQUEST_BYTES = 64
PROBE_RESPONSE_BYTES = 128
ASSOC_FRAME_BYTES = 64
SBI_MESSAGE_BYTES = 64
IKE_MESSAGE_BYTES = 256

# Simulation timing
MOBILITY_TICK_US = 100_000
STATS_INTERVAL_US = 200_000
SCAN_WINDOW_US = 20_000
RESCAN_BACKOFF_US = 10_000
PROBE_AGGREGATION_US = 1_000
SERIES_BIN_US = 100_000

# Application defaults
ADMISSION_THRESHOLD = 8
ADMISSION_HYSTERESIS = 2
HO_HYSTERESIS_DB = 3.0
HO_CONSECUTIVE_REPORTS = 2
EXACT_COLORING_MAX_NODES = 10

# Default per-UE QoS provisioning
DEFAULT_QOS_RATE_MBPS = 10.0
DEFAULT_QOS_PRIORITY = 1
DEFAULT_QOS_LATENCY_US = 20_000

# Default link parameters: (capacity_mbps, prop_delay_us)
DEFAULT_LINKS = {
    "ap_wae": (1000.0, 100),
    "cmi": (100.0, 500),
    "n2": (1000.0, 500),
    "n3": (100.0, 500),
    "dn": (10_000.0, 100),
    "ac": (100.0, 500),  # split-MAC shared AP-side aggregation link to the controller
    "ac_upf": (1000.0, 500),
}
WIRELESS_PROP_DELAY_US = 1
