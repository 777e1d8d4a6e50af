import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(0)


TINY = dict(d_model=16, blocks=1, heads=2, sparse_heads=2, h=32, steps=4, warmup=2, batch_size=4,
            diffusion_steps=4, episode_length=30, rollouts_per_motion=3, keep=2,
            scenarios="handshake,push", rollout_steps=8, checkpoint_every=2)


@pytest.fixture
def tiny(tmp_path):
    """Desk-profile overrides for a seconds-long end-to-end pipeline, with paths under tmp_path."""
    return dict(TINY, dataset=str(tmp_path / "d.iads"), checkpoint=str(tmp_path / "m.idtc"),
                loss_log=str(tmp_path / "loss.tsv"), output=str(tmp_path / "out.iads"))
