"""ltpeft - prompt-tuned frozen transformers and a two-expert mixture for long-tailed classification."""

from .backbone import ViTConfig as ViTConfig
from .backbone import encode as encode
from .backbone import vit_forward as vit_forward
from .cli import app as app
from .cli import main as main
from .config import RunConfig as RunConfig
from .data import DatasetSpec as DatasetSpec
from .data import generate_dataset as generate_dataset
from .errors import LtpeftError as LtpeftError
from .losses import GclConfig as GclConfig
from .moe import run_phase3 as run_phase3
from .trainer import TrainConfig as TrainConfig
from .trainer import pretrain_backbone as pretrain_backbone
from .trainer import run_joint as run_joint
from .trainer import run_phase1 as run_phase1
from .trainer import run_phase2 as run_phase2
from .version import __version__ as __version__
