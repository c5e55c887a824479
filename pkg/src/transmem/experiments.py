"""Reusable pieces of the benchmark protocols: build datasets for a profile,
pretrain sources, and train/evaluate targets in each mode."""
from dataclasses import dataclass

from .datasets import gen_advecting_blobs, gen_moving_glyphs
from .network import NetworkConfig
from .train import SourceModel, TrainConfig, evaluate_params, gate_table, train


@dataclass
class Splits:
    train: object
    val: object
    test: object


def glyph_splits(profile, num_glyphs, seed):
    kw = dict(size=profile.size, seq_len=profile.input_len + profile.predict_len, input_len=profile.input_len)
    return Splits(gen_moving_glyphs(seed, num_glyphs, profile.train_count, split="train", **kw),
                  gen_moving_glyphs(seed, num_glyphs, profile.val_count, split="val", **kw),
                  gen_moving_glyphs(seed, num_glyphs, profile.test_count, split="test", **kw))


def blob_splits(profile, aridity, seed):
    kw = dict(size=profile.size, seq_len=profile.input_len + profile.predict_len,
              input_len=profile.input_len, aridity=aridity)
    return Splits(gen_advecting_blobs(seed, profile.train_count, split="train", **kw),
                  gen_advecting_blobs(seed, profile.val_count, split="val", **kw),
                  gen_advecting_blobs(seed, profile.test_count, split="test", **kw))


def pretrain_source(profile, splits, seed, name="", iters=None, filter_size=None):
    cfg = TrainConfig(mode="scratch", seed=seed, max_iters=iters or profile.source_iters,
                      batch_size=profile.batch_size, val_every=profile.val_every, patience=profile.patience)
    res = train(cfg, profile.network(filter_size=filter_size), splits.train, splits.val)
    return SourceModel.from_checkpoint(res.checkpoint, name), res


def train_target(profile, splits, mode, seed, sources=(), beta=0.1, iters=None, filter_size=None):
    cfg = TrainConfig(mode=mode, seed=seed, beta=beta, max_iters=iters or profile.target_iters,
                      batch_size=profile.batch_size, val_every=profile.val_every, patience=profile.patience)
    return train(cfg, profile.network(filter_size=filter_size), splits.train, splits.val, sources)


def evaluate_result(result, splits, csi_threshold=None):
    """Test-split report for the best-on-validation parameters of ``result``."""
    ckpt = result.checkpoint
    net = NetworkConfig.from_dict(ckpt.config["network"])
    return evaluate_params(ckpt.model_params(), net, splits.test, csi_threshold)


def gate_means(result, frames):
    ckpt = result.checkpoint
    net = NetworkConfig.from_dict(ckpt.config["network"])
    return gate_table(ckpt.model_params(), net, frames)[1]
