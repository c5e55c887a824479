"""Named experiment scales.

``full`` is the desk-scale reproduction protocol (32x32 frames, 2,000
training sequences); ``tiny`` is a 16x16 variant sized to finish on one CPU
core in minutes.
"""
from dataclasses import dataclass

from .network import NetworkConfig


@dataclass(frozen=True)
class Profile:
    name: str
    size: int
    train_count: int
    val_count: int
    test_count: int
    source_iters: int
    target_iters: int
    num_layers: int
    channels: int
    filter_size: int
    subscale_factor: int
    input_len: int = 10
    predict_len: int = 10
    batch_size: int = 8
    val_every: int = 250
    patience: int = 5

    def network(self, num_sources=0, filter_size=None):
        return NetworkConfig(num_layers=self.num_layers, channels=self.channels,
                             filter_size=filter_size or self.filter_size,
                             subscale_factor=self.subscale_factor, input_len=self.input_len,
                             predict_len=self.predict_len, num_sources=num_sources,
                             frame_height=self.size, frame_width=self.size)


FULL = Profile("full", size=32, train_count=2000, val_count=400, test_count=600, source_iters=3000,
               target_iters=5000, num_layers=4, channels=64, filter_size=5, subscale_factor=4)
TINY = Profile("tiny", size=16, train_count=500, val_count=100, test_count=150, source_iters=1500,
               target_iters=1500, num_layers=2, channels=16, filter_size=3, subscale_factor=4)
PROFILES = {"full": FULL, "tiny": TINY}
