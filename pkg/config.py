# Neuron defaults (IF with soft reset, static tasks run one window)
D_CAP = 4
BETA = 1.0
V_TH = 1.0
V_RESET = 0.0
RESET_MODE = 'soft'
T_STEPS = 1

# Surrogate window is [SURROGATE_LOWER, D]
SURROGATE_LOWER = 0.0

# Numerics
DTYPE = 'float32'
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

# Toy E-SpikeFormer topology: stem, 2 stages x 2 blocks
INPUT_SHAPE = (1, 32, 32)
NUM_CLASSES = 3
STAGES = 'conv:32:2,transformer:64:2'
HEADS = 4
GAMMA = 2.0
MLP_RATIO = 2.0
SEP_RATIO = 2.0
SEP_KERNEL = 3
MODEL_SEED = 0

# Optimizer (AdamW)
LR = 1e-3
WEIGHT_DECAY = 0.01
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
EPOCHS = 30
BATCH_SIZE = 32

# Masked image modeling
PATCH_SIZE = 4
MASK_RATIO = 0.6
PATCH_STD_FLOOR = 1e-6
DECODER_WIDTH = 128
DECODER_DEPTH = 2
DECODER_HEADS = 4
MIM_STEPS = 200
RANK_EVERY = 10

# Energy model [J per op]
E_AC = 0.9e-12
E_MAC = 4.6e-12

# Async executor: pending events of one micro-step per queue <= factor * producer neurons / D
QUEUE_BOUND_FACTOR = 16
MAX_CHUNK = None  # events drained per scheduling step; None draws from the whole queue

# Equivalence tolerances
LOGIT_RTOL = 1e-4
ASYNC_RTOL = 1e-5
LOGIT_ATOL = 1e-9

# Synthetic data
BLOB_SAMPLES = 384
BLOB_NOISE = 0.05
TEST_FRACTION = 0.25
