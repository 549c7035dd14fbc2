"""Project-wide constants for kiop.

Defaults that are not stated by the method itself are documented here as
implementation choices; every one of them is exposed through the config schema.
"""

# ========================================
# Prompt geometry
# ========================================
DEFAULT_TWO_MODEL_SIDES = (32, 36, 128)
"""Image hole 32, Prompt Core out to 36, Prompt Periphery out to 128."""

DEFAULT_CHANNELS = 3

CHECKPOINT_MAGIC = b"KIOP1"
"""Header magic of the prompt checkpoint format."""

WEIGHTS_MAGIC = b"KIOPW1"
"""Header magic of the flat model-weight container."""

# ========================================
# Synthesis
# ========================================
DEFAULT_Z_DIM = 256
DEFAULT_SYNTH_STEPS = 20
DEFAULT_SYNTH_BATCH = 64
DEFAULT_LR_GENERATOR = 1e-3
DEFAULT_LR_LATENT = 1e-3
DEFAULT_LR_DISCRIMINATOR = 1e-3
DEFAULT_TEMPERATURE = 0.1
"""Contrastive temperature tau."""

DISCRIMINATOR_HIDDEN = 256
DISCRIMINATOR_EMBED = 128

AUGMENT_SCALE = (0.6, 1.0)
"""Area range of the random resized crop."""

AUGMENT_RATIO = (3.0 / 4.0, 4.0 / 3.0)
AUGMENT_FLIP_P = 0.5

MAX_BANK_NEGATIVES = 256
"""Cap on bank samples used as contrastive negatives per step."""

SYNTH_MAX_ATTEMPTS = 2
"""A diverged round is re-seeded once; the second failure is fatal."""

# ========================================
# Knowledge storing
# ========================================
DEFAULT_ALPHA = 1.0
DEFAULT_BETA = 1.0
DEFAULT_PROMPT_LR = 1e-3
DEFAULT_ITERATIONS = 200
DEFAULT_STORING_BATCH = 64

# ========================================
# Evaluation
# ========================================
DEFAULT_EVAL_BATCH = 256
SWEEP_CORE_SIDES = (36, 48, 64, 128)
"""Prompt Core sides explored by the core-size sweep."""

# ========================================
# Seeds
# ========================================
SEED_OFFSET_MAPPING = 1009
SEED_OFFSET_SYNTHESIS = 2003
SEED_OFFSET_STORING = 3001
"""Offsets deriving per-stage seeds from the global seed when unset."""
