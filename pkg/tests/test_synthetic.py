import numpy as np

from seqsplat.synthetic import add_transients, ground_truth_splats, make_dataset


def _dataset():
    return make_dataset(ground_truth_splats(200))


def _sees(ds, point, half):
    out = []
    for i, f in enumerate(ds.frames):
        K = ds.intrinsics(f)
        c = f.pose.world_to_camera(np.asarray(point, float)[None])[0]
        u, v = K.fx * c[0] / c[2] + K.cx, K.fy * c[1] / c[2] + K.cy
        if c[2] > 0 and half <= u <= K.width - 1 - half and half <= v <= K.height - 1 - half:
            out.append(i)
    return out


def test_transients_follow_views_of_the_spot():
    clean, ds = _dataset(), _dataset()
    anchor = (0.6, -1.15, 0.0)
    hit = add_transients(ds, fraction=0.3, size=6, masked_share=0.5, anchor=anchor)
    sees = _sees(clean, anchor, 3)
    assert hit == sees[:7]
    # at least one later view of the spot finds it gone
    assert len(sees) > len(hit)
    full = partial = 0
    for i, (fc, fd) in enumerate(zip(clean.frames, ds.frames)):
        sprite = np.any(fc.image != fd.image, axis=-1)
        if i not in hit:
            assert not sprite.any() and not fd.masks.sam.any() and fd.eval_mask is None
            continue
        ys, xs = np.nonzero(sprite)
        assert sprite.sum() == 36 and np.ptp(ys) == 5 and np.ptp(xs) == 5
        ent = fd.masks.entity
        assert np.unique(ent[sprite]).size == 1 and not (ent[~sprite] == ent[sprite][0]).any()
        sam = fd.masks.sam.astype(bool)
        if (sam == sprite).all():
            full += 1
        else:
            assert sam.sum() == 6 and sam[ys.min()].sum() == 6 and not (sam & ~sprite).any()
            partial += 1
        if fd.holdout:
            assert (fd.eval_mask.astype(bool) == sprite).all()
    assert full == round(0.5 * len(hit)) and partial == len(hit) - full


def test_transients_deterministic_and_labelled_everywhere():
    a, b = _dataset(), _dataset()
    assert add_transients(a, seed=3) == add_transients(b, seed=3)
    for fa, fb in zip(a.frames, b.frames):
        assert np.array_equal(fa.image, fb.image) and np.array_equal(fa.masks.sam, fb.masks.sam)
        assert fa.masks.entity.min() >= 1
