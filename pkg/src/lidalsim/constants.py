"""Physical constants and the default system parameters.

All values are SI. Times in seconds, lengths in meters, powers in watts.
"""

import math

C = 299_792_458.0  # speed of light, m/s

# room
ROOM_LENGTH = 8.0
ROOM_WIDTH = 4.0
ROOM_HEIGHT = 3.0
RHO_WALLS = 0.8
RHO_CEILING = 0.8
RHO_FLOOR = 0.3

# furniture and people
FURNITURE_REFLECTIVITY = 0.55
DESK_DIMS = (1.54, 0.76, 0.75)
BOOKSHELF_DIMS = (3.0, 0.8, 2.0)
TARGET_DIMS = (0.15, 0.48, 1.70)  # depth (x), width (y), height
TARGET_RHO_MEAN = 0.72
TARGET_RHO_STD = 0.3

# transmitters
UNIT_POSITIONS = (
    (1.0, 1.0, 3.0), (1.0, 3.0, 3.0), (1.0, 5.0, 3.0), (1.0, 7.0, 3.0),
    (3.0, 1.0, 3.0), (3.0, 3.0, 3.0), (3.0, 5.0, 3.0), (3.0, 7.0, 3.0),
)
TX_POWER = 18.0
TX_SEMI_ANGLE = 75.0  # degrees
TX_ELEVATION = 90.0
TX_AZIMUTH = 0.0
PULSE_WIDTH = 2e-9

# MIMO receiver
MIMO_PD_AREA = 20e-6
RESPONSIVITY = 0.4
MIMO_ACCEPTANCE = 43.8  # degrees
CPC_INDEX = 1.7
MIMO_NOISE_DENSITY = 2.5e-12  # A/sqrt(Hz)
ZONE_RADIUS = 1.25

# MISO imaging receiver
IMG_POSITION = (2.0, 4.0, 3.0)
IMG_APERTURE_AREA = 2e-4
IMG_PIXEL_AREA = 1.56e-6
IMG_NOISE_DENSITY = 2.6e-12
IMG_FOV = 72.0  # degrees
IMG_COLS = 8   # along x
IMG_ROWS = 16  # along y
N_GROUPS = 8
PIXEL_SIZE = 0.5  # floor footprint edge, the spatial resolution

# timing
BIN_DURATION = 1e-11
SAMPLE_PERIOD = 1e-10
SLOT_WIDTH = 2e-9
SAMPLES_PER_SLOT = 20
RANGE_RESOLUTION = C * SLOT_WIDTH / 2.0  # ~0.3 m
NOISE_BANDWIDTH = 500e6
SNAPSHOT_RATE = 5.0  # snapshots per second
TARGET_SPEED = 0.5

# imaging receiver samples per pixel: 20 * (0.5 / 0.3) rounded up
PIXEL_SAMPLES = math.ceil(SAMPLES_PER_SLOT * PIXEL_SIZE / 0.3)

# ANN training
EPOCHS = 500
MU_R = 0.05
VALIDATION_FRACTION = 0.2
OUTPUT_THRESHOLD = 0.5
