"""Hide k secret images in one cover image with prep/hiding/reveal CNNs."""
from .image_data import (BatchIterator, DatasetSplit, ImageRecord, StegoBatch, batch_iterator,
                         build_dataset, load_image, split_dataset)
from .stego_net import (BranchSpec, NetworkSpec, StegoNet, decode_all, encode_forward,
                        init_params, prep_forward, reveal_forward)
from .training import (Checkpoint, LossReport, Trainer, add_noise, full_loss, grad_check,
                       lr_schedule, reveal_loss, train)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig

__version__ = "0.1.0"
