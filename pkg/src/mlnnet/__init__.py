"""MLN-net: single-source domain-generalized microcalcification segmentation.

Intensity-domain augmentation, a Swin-Unet whose every LayerNorm is replaced
by a bank of per-domain LN parameters, multi-branch Dice training, and
test-time branch selection by LN-statistic signatures.
"""
from .augment import DomainDef, default_domain_spec, expand_domains
from .branch_select import SelectOptions, select_branch, select_branches
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, IntegrityError, MLNError, NumericError
from .network import MLNSwinUnet, NetConfig
from .phantom import PhantomConfig, generate_dataset, generate_phantom
from .training import TrainConfig, dice_loss, train

__version__ = "0.1.0"
