"""Small configurations that keep model-level tests fast."""
from vtssi.config import AirConfig, FindConfig, MotConfig, RectConfig, TrainConfig, VtssiConfig


def tiny_config(variant="vtssi", T=6, K=3, M=3, hw=(24, 24), N=2, **train):
    return VtssiConfig(
        variant=variant, K=K, M=M, T=T,
        air=AirConfig(frame_hw=hw, max_objects=N, glimpse=8, desc_dim=4, cnt_channels=4,
                      cnt_dense=(16, 8), pre_channels=4, loc_hidden=16, loc_head=8,
                      enc_hidden=(16, 8), dec_hidden=(8, 16), cnt_anneal_start=10, cnt_anneal_end=20),
        find=FindConfig(n_kernels=2, kernel_size=5, ker_hidden=(8, 16), conv_channels=(4, 4),
                        feat_hidden=(16, 8), feat_dim=6, pos_hidden=8, pos_head=8),
        rect=RectConfig(hidden=8, dense=8),
        mot=MotConfig(motion_dim=4, lstm_hidden=8, head=8, tr_hidden=8),
        train=TrainConfig(**{"batch_size": 4, "log_every": 5, "checkpoint_every": 10, **train}),
    )


# (criterion number, title, passed, detail, seconds), filled by the acceptance suite
ACCEPTANCE_RESULTS = []
