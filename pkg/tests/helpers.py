"""Shared builders for model and metric tests."""
import dataclasses

import numpy as np

from edgesgg import autodiff as ad
from edgesgg.graph import Detection, build_primitive_graph
from edgesgg.model import DualMPNNConfig, forward, init_params, joint_loss, scene_index


def random_scene(n, d_o, seed, n_obj=5):
    rng = np.random.default_rng(seed)
    dets = []
    for i in range(n):
        x, y = rng.uniform(0, 0.6, size=2)
        w, h = rng.uniform(0.1, 0.35, size=2)
        dets.append(Detection(i, tuple(rng.normal(size=d_o)), (x, y, x + w, y + h),
                              label=int(rng.integers(n_obj))))
    return build_primitive_graph(dets)


def gradient_check(seed, d=8, H=2, n_objects=3, h=1e-5, **cfg_kw):
    """Max relative error between analytic and central-difference gradients
    over every parameter of a freshly initialized model."""
    cfg = DualMPNNConfig(d_o=d, d_r=d, H=H, **cfg_kw)
    g = random_scene(n_objects, d, seed, cfg.n_obj_classes)
    idx = scene_index(g)
    params = init_params(cfg, seed)
    rng = np.random.default_rng([seed, 1])
    obj_t = rng.integers(cfg.n_obj_classes, size=idx.n_nodes)
    rel_t = rng.integers(cfg.n_rel_classes, size=idx.n_dir)

    def loss():
        st = forward(idx, cfg, params)
        return joint_loss(st.u_hat, st.p_hat, obj_t, rel_t)[2]

    params.zero_grad()
    ad.backward(loss())
    worst = {}
    for name, t in params:
        num = ad.numerical_gradient(lambda: loss().item(), t, h)
        worst[name] = ad.relative_error(t.grad, num)
    return worst


def random_metric_instance(rng, max_gt=6, max_pred=10, n_images=None):
    """Small random images (predictions, ground truth) for metric oracles.

    Boxes come from a small pool with slight jitter so that matches, near
    misses and duplicate detections all occur.
    """
    from edgesgg.evaluation import Triplet

    pool = [(0.1, 0.1, 0.4, 0.4), (0.3, 0.2, 0.7, 0.6), (0.5, 0.5, 0.9, 0.9), (0.0, 0.6, 0.3, 1.0)]

    def box():
        b = np.array(pool[rng.integers(len(pool))]) + rng.normal(0, 0.04, size=4)
        b = np.clip(b, 0, 1)
        return (float(min(b[0], b[2] - 0.05)), float(min(b[1], b[3] - 0.05)),
                float(max(b[2], b[0] + 0.05)), float(max(b[3], b[1] + 0.05)))

    images = []
    for _ in range(n_images or int(rng.integers(1, 4))):
        gts = [Triplet(box(), box(), int(rng.integers(2)), int(rng.integers(2)), int(rng.integers(1, 4)))
               for _ in range(int(rng.integers(0, max_gt + 1)))]
        preds = []
        for _ in range(int(rng.integers(0, max_pred + 1))):
            if gts and rng.random() < 0.6:
                g = gts[rng.integers(len(gts))]
                j = lambda b: tuple(float(v) for v in np.clip(np.array(b) + rng.normal(0, 0.03, 4), 0, 1))
                sb, ob = j(g.subject_box), j(g.object_box)
                if sb[0] < sb[2] and sb[1] < sb[3] and ob[0] < ob[2] and ob[1] < ob[3]:
                    pred = g.predicate if rng.random() < 0.7 else int(rng.integers(1, 4))
                    preds.append(Triplet(sb, ob, g.subject_label, g.object_label, pred))
                    continue
            preds.append(Triplet(box(), box(), int(rng.integers(2)), int(rng.integers(2)),
                                 int(rng.integers(1, 4))))
        scores = np.round(rng.uniform(size=len(preds)), 1)
        order = np.argsort(-scores, kind="stable")
        preds = [dataclasses.replace(preds[k], score=float(scores[k])) for k in order]
        images.append((preds, gts))
    if not any(gts for _, gts in images):
        images[0] = (images[0][0], [Triplet(box(), box(), 0, 0, 1)])
    return images
