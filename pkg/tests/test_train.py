import io

import numpy as np
import pytest

from skipfuse import checkpoint
from skipfuse.config import ModelConfig
from skipfuse.data import ALL_SCENES, Batch, sample_batch, synthetic_pairs
from skipfuse.objectives import SkipFuseModel
from skipfuse.optim import SGD, Adam, make_optimizer
from skipfuse.tensor import ContractError, ShapeError, Tensor
from skipfuse.train import LOG_FIELDS, format_log_line, load_model, save_model, train
from skipfuse.vocab import EOS, decode


def small_cfg(**kw):
    base = dict(d_model=16, n_heads=2, n_visual_layers=1, n_text_layers=1, image_size=8,
                patch_size=4, vocab_size=16, max_text_len=8, queue_size=8)
    base.update(kw)
    return ModelConfig(**base)


def test_scene_catalogue():
    assert len(ALL_SCENES) == len(set(ALL_SCENES)) == 64
    captions = {tuple(s.caption()) for s in ALL_SCENES}
    assert len(captions) == 64


def test_caption_names_the_drawing():
    scene = ALL_SCENES[0]
    text = decode(scene.caption())
    assert text.split() == [scene.color, scene.size, scene.fill, scene.row, scene.col, "[EOS]"]
    img = scene.render(16)
    assert img.shape == (3, 16, 16) and img.max() == 1.0


def test_distinct_scenes_render_differently():
    images = {s.render(16).tobytes() for s in ALL_SCENES}
    assert len(images) == 64


def test_synthetic_pairs_distinct_until_exhausted():
    cfg = small_cfg()
    data = synthetic_pairs(64, cfg, seed=3)
    assert len({tuple(c) for c in data.captions}) == 64
    assert len(synthetic_pairs(70, cfg)) == 70


def test_sample_batch_without_replacement():
    data = synthetic_pairs(10, small_cfg())
    batch = sample_batch(data, 8, np.random.default_rng(0))
    assert len({tuple(c) for c in batch.captions}) == 8


def test_batch_count_mismatch():
    with pytest.raises(ValueError):
        Batch([np.zeros((3, 8, 8))], [])


def test_log_line_format():
    comps = {"itc": 1.0, "itm": 0.5, "mlm": 2.0, "prefixlm": 3.0, "total": 6.5}
    assert LOG_FIELDS == ("step", "itc", "itm", "mlm", "prefixlm", "total")
    assert format_log_line(7, comps) == "7\t1.0\t0.5\t2.0\t3.0\t6.5"


def test_train_writes_one_line_per_step():
    log = io.StringIO()
    _, history = train(small_cfg(), 3, n_pairs=8, batch_size=4, log=log)
    lines = log.getvalue().splitlines()
    assert len(lines) == len(history) == 3
    assert [line.split("\t")[0] for line in lines] == ["1", "2", "3"]
    assert all(len(line.split("\t")) == 6 for line in lines)


def test_training_is_deterministic(tmp_path):
    paths = []
    for i in range(2):
        model, _ = train(small_cfg(), 3, n_pairs=8, batch_size=4)
        paths.append(tmp_path / f"{i}.ckpt")
        save_model(model, paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_checkpoint_restores_weights_and_queues(tmp_path):
    cfg = small_cfg()
    model, _ = train(cfg, 2, n_pairs=8, batch_size=4)
    path = tmp_path / "m.ckpt"
    save_model(model, path)
    back = load_model(cfg, path)
    for (name, a), (_, b) in zip(model.named_parameters(), back.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=name)
    np.testing.assert_array_equal(back.image_queue.rows(), model.image_queue.rows())
    assert back.text_queue.cursor == model.text_queue.cursor
    assert "queue.image.buffer" in checkpoint.load(path)


def test_load_rejects_wrong_shapes(tmp_path):
    model = SkipFuseModel(small_cfg())
    path = tmp_path / "m.ckpt"
    save_model(model, path)
    with pytest.raises((ContractError, ShapeError)):
        load_model(small_cfg(d_model=8), path)


def test_optimizers_descend_on_a_quadratic():
    for opt_cls, lr in ((SGD, 0.1), (Adam, 0.1)):
        x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
        opt = opt_cls([x], lr=lr)
        for _ in range(100):
            x.grad = 2 * x.data
            opt.step()
        assert np.abs(x.data).max() < 0.1
    assert isinstance(make_optimizer("adam", [x], None), Adam)
