# Event-vision task variant: moving-bar sensor, T windows with LIF hard reset at boundaries

from config import D_CAP, V_TH, V_RESET

SENSOR_WIDTH = 32
SENSOR_HEIGHT = 32
INPUT_SHAPE = (2, SENSOR_HEIGHT, SENSOR_WIDTH)  # polarity channels
NUM_CLASSES = 2  # bar moving left / right

T_STEPS = 2
BETA = 0.5
RESET_MODE = 'hard'
D_CAP_DYNAMIC = D_CAP
V_TH_DYNAMIC = V_TH
V_RESET_DYNAMIC = V_RESET

# Frame accumulation
FRAME_CLIP = 255
FRAME_SCALE = 1.0 / FRAME_CLIP

# Moving-bar generator
BAR_WIDTH = 3
DURATION_US = 100_000
EVENTS_PER_COLUMN = 4
BAR_SAMPLES = 256
