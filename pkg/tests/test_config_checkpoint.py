import io
import struct

import numpy as np
import pytest

from skipfuse import checkpoint
from skipfuse.config import ModelConfig, base_profile, dump_config, load_config, parse_config_text
from skipfuse.tensor import ConfigError, ContractError


def test_checkpoint_byte_layout():
    buf = io.BytesIO()
    checkpoint.write_records(buf, {"w": np.array([[1.0, 2.0, 3.0]])})
    expected = (struct.pack("<I", 1) + b"w" + struct.pack("<III", 2, 1, 3)
                + np.array([1, 2, 3], dtype="<f4").tobytes())
    assert buf.getvalue() == expected


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a.weight": rng.normal(size=(3, 4)).astype(np.float32),
               "b": rng.normal(size=7).astype(np.float32),
               "scalar": np.float32(2.5).reshape(())}
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, tensors)
    back = checkpoint.load(path)
    assert list(back) == list(tensors)
    for name in tensors:
        assert back[name].tobytes() == tensors[name].tobytes()
        assert back[name].shape == tensors[name].shape


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, {"w": np.ones((4, 4), np.float32)})
    data = path.read_bytes()
    path.write_bytes(data[:-3])
    with pytest.raises(ContractError):
        checkpoint.load(path)


def test_config_defaults_validate():
    ModelConfig().validate()
    cfg = base_profile()
    assert (cfg.d_model, cfg.n_patches, cfg.n_fusion_asym_layers, cfg.stride) == (768, 256, 6, 6)


@pytest.mark.parametrize("changes", [
    dict(d_model=10, n_heads=4),
    dict(image_size=15),
    dict(n_fusion_asym_layers=6, stride=4),
    dict(momentum=1.0),
    dict(temperature=0.0),
    dict(loss_weights=(1.0, 1.0)),
])
def test_config_invariants(changes):
    with pytest.raises(ConfigError):
        ModelConfig(**changes)


def test_config_file_round_trip(tmp_path):
    cfg = ModelConfig(d_model=32, n_heads=2, stride=1, loss_weights=(1.0, 0.0, 0.5, 2.0))
    path = tmp_path / "c.ini"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


def test_config_file_sections_and_comments():
    values = parse_config_text("[fusion]\nstride = 1  # one asym per block\n[objectives]\nqueue_size = 8\n")
    assert values == {"stride": 1, "queue_size": 8}


@pytest.mark.parametrize("text", [
    "[fusion]\nunknown = 3\n",
    "[nowhere]\nstride = 1\n",
    "[fusion]\nstride = two\n",
    "stride = 1\n",
])
def test_config_file_errors(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)
