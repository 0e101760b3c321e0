import json

import numpy as np
import pytest

from ctscal import datagen as dg
from ctscal.errors import ConfigError, InputError
from ctscal.numerics import make_rng

CFG = dg.GeneratorConfig()


@pytest.fixture(scope="module")
def data():
    return dg.generate(make_rng(0), 100, CFG)


def template_oracle(pixels, cfg=CFG):
    """Classify by the best per-channel affine fit of any jittered class mask."""
    masks, cls = [], []
    for k in range(cfg.n_classes):
        fam = dg.jitter_family(k, cfg)
        masks += fam
        cls += [k] * len(fam)
    m = np.array(masks).reshape(len(masks), -1)
    m = m - m.mean(axis=1, keepdims=True)
    x = pixels.reshape(len(pixels), pixels.shape[1], -1)
    x = x - x.mean(axis=2, keepdims=True)
    explained = ((x @ m.T) ** 2 / (m ** 2).sum(axis=1)).sum(axis=1)
    return np.array(cls)[np.argmax(explained, axis=1)]


def test_deterministic():
    a = dg.generate(make_rng(5), 3, CFG)
    b = dg.generate(make_rng(5), 3, CFG)
    assert a.pixels.tobytes() == b.pixels.tobytes()
    assert np.array_equal(a.labels, b.labels) and np.array_equal(a.domains, b.domains)


def test_one_per_cell():
    d = dg.generate(make_rng(1), 1, CFG)
    assert len(d) == 16
    cells = sorted(zip(d.domains.tolist(), d.labels.tolist()))
    assert cells == [(j, k) for j in range(4) for k in range(4)]


def test_counts_and_ids(data):
    assert len(data) == 4 * 4 * 100
    assert len(np.unique(data.ids)) == len(data)


def test_pixel_range(data):
    assert data.pixels.min() >= 0.0 and data.pixels.max() <= 1.0
    assert data.pixels.shape[1:] == (3, 16, 16)


def test_bad_count():
    with pytest.raises(InputError):
        dg.generate(make_rng(0), 0, CFG)


def test_content_masks_distinct():
    base = [dg.content_mask(k, 0, 0, 0) for k in range(4)]
    for i in range(4):
        assert base[i].sum() > 0
        for j in range(i + 1, 4):
            assert not np.array_equal(base[i], base[j])
    with pytest.raises(InputError):
        dg.content_mask(7, 0, 0, 0)


def test_template_oracle_recovers_labels(data):
    pred = template_oracle(data.pixels)
    for d in range(4):
        sel = data.domains == d
        assert np.mean(pred[sel] == data.labels[sel]) >= 0.99


def test_target_domain_most_displaced():
    # distance between the (offset, gain) style transforms of the domains
    s = np.array([list(d.offset) + list(d.gain) for d in CFG.domains])
    dist = np.linalg.norm(s[:, None] - s[None], axis=2)
    nearest = np.where(dist > 0, dist, np.inf).min(axis=1)
    assert np.argmax(dist.sum(axis=1)) == 3
    assert np.argmax(nearest) == 3


def test_split_half_partition():
    d = dg.generate(make_rng(2), 25, CFG)  # 100 images per domain
    spec = dg.SplitSpec((0, 1, 2), (0, 1, 2), 3, train_fraction=0.5, seed=4)
    train, calib, target = dg.split(d, spec)
    for dom in (0, 1, 2):
        tr = set(train.ids[train.domains == dom].tolist())
        ca = set(calib.ids[calib.domains == dom].tolist())
        assert len(tr) == len(ca) == 50
        assert not tr & ca
        assert tr | ca == set(d.ids[d.domains == dom].tolist())
    assert set(target.domains.tolist()) == {3}
    assert not set(target.ids.tolist()) & (set(train.ids.tolist()) | set(calib.ids.tolist()))


def test_split_seeded():
    d = dg.generate(make_rng(2), 5, CFG)
    spec = dg.SplitSpec.leave_out(0, 4, 0.5, seed=1)
    a = dg.split(d, spec)[0].ids
    assert np.array_equal(a, dg.split(d, spec)[0].ids)
    other = dg.split(d, dg.SplitSpec.leave_out(0, 4, 0.5, seed=2))[0].ids
    assert not np.array_equal(a, other)


def test_disjoint_roles():
    d = dg.generate(make_rng(3), 5, CFG)
    train, calib, target = dg.split(d, dg.SplitSpec((0,), (1, 2), 3))
    assert set(train.domains.tolist()) == {0}
    assert set(calib.domains.tolist()) == {1, 2}
    assert set(target.domains.tolist()) == {3}
    assert len(train) + len(calib) + len(target) == len(d)


@pytest.mark.parametrize("kwargs", [
    dict(train_domains=(0, 1), calib_domains=(0, 1), target_domain=1),
    dict(train_domains=(), calib_domains=(0,), target_domain=3),
    dict(train_domains=(0,), calib_domains=(0,), target_domain=3, train_fraction=1.0),
    dict(train_domains=(0, 1), calib_domains=(1, 2), target_domain=3),
])
def test_bad_split_spec(kwargs):
    with pytest.raises(ConfigError):
        dg.SplitSpec(**kwargs)


def test_empty_split():
    d = dg.generate(make_rng(3), 1, CFG)  # one image per cell
    spec = dg.SplitSpec((0,), (0,), 3, train_fraction=0.99)
    with pytest.raises(ConfigError):
        dg.split(d, spec)


def test_missing_domain():
    d = dg.generate(make_rng(3), 1, CFG).subset(np.arange(8))  # domains 0, 1 only
    with pytest.raises(ConfigError):
        dg.split(d, dg.SplitSpec.leave_out(3))


def test_save_load_round_trip(tmp_path):
    d = dg.generate(make_rng(4), 2, CFG)
    dg.save_dataset(d, tmp_path, CFG, 4, 2)
    back = dg.load_dataset(str(tmp_path))
    assert np.array_equal(back.pixels, d.pixels)
    assert np.array_equal(back.labels, d.labels)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seed"] == 4 and manifest["count"] == 32
    assert dg.GeneratorConfig.from_dict(manifest["generator"]) == CFG
    line = json.loads((tmp_path / "images.jsonl").read_text().splitlines()[0])
    assert set(line) == {"id", "domain", "label", "pixels"}


def test_load_malformed(tmp_path):
    p = tmp_path / "images.jsonl"
    p.write_text('{"id": 0, "domain": 0, "label": 0, "pixels": [0.1]}\n')
    with pytest.raises(ConfigError):
        dg.load_dataset(str(p))
