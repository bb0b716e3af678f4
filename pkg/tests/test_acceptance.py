"""Acceptance suite: one test per release criterion, at pinned tolerances.

Each criterion prints one ``[ACCEPTANCE] <name>: PASS|FAIL`` line (visible
with ``pytest -s`` or in captured output). The two training criteria share
one fixture: the generalization run also supplies the trained models for
the end-to-end pipeline check.
"""

import functools
import time
from collections import deque

import numpy as np
import pytest

from cxrseg import data, maskops, quantify
from cxrseg import tensor as T
from cxrseg.metrics import (
    CIParams,
    ConfusionCounts,
    confidence_radius,
    det_metrics,
    seg_metrics,
)
from cxrseg.models import ModelConfig, build_model, forward
from cxrseg.tensor import Tensor, finite_diff_check
from cxrseg.training import (
    TrainConfig,
    audit_class_counts,
    ce_loss,
    evaluate_loss_dsc,
    make_fold_plan,
    train,
)
from cxrseg.workflow import TERMINAL, WorkflowEngine


def criterion(name):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                result = fn(*args, **kwargs)
            except BaseException:
                print(f"[ACCEPTANCE] {name}: FAIL")
                raise
            print(f"[ACCEPTANCE] {name}: PASS")
            return result

        return wrapper

    return deco


# ---------------------------------------------------------------------------
# 1. CI reproduction (exact, from the published tables)


@criterion("CI reproduction")
def test_ci_reproduction():
    published = [
        (0.9611, 6788, 0.46),
        (0.9799, 6788, 0.33),
        (0.8305, 1166, 2.15),
        (0.9889, 1166, 0.60),
        (1.0, 1166, 0.00),
    ]
    start = time.perf_counter()
    for metric, n, column in published:
        radius = confidence_radius(metric, CIParams(n=n))
        assert round(100 * radius, 2) == column, (metric, n, radius)
    assert time.perf_counter() - start < 0.05  # milliseconds, as required


# ---------------------------------------------------------------------------
# 2. Gradient correctness (64-bit, step 1e-5, tolerance 1e-4, >= 5 seeds)


@criterion("Gradient correctness")
def test_gradient_correctness():
    T.set_precision("f64")
    step, tol = 1e-5, 1e-4

    def sq_sum(t):
        return T.reduce_sum(T.multiply(t, t))

    for seed in range(5):
        rng = np.random.default_rng(seed)
        w = Tensor(rng.uniform(-1, 1, (2, 2, 3, 3)))
        b = Tensor(rng.uniform(-1, 1, (2,)))
        side = Tensor(rng.uniform(-1, 1, (1, 2, 4, 4)))
        layer_cases = {
            "conv2d": (lambda t: sq_sum(T.conv2d(t, w, b, padding=1)), (1, 2, 4, 4)),
            "max_pool2x2": (lambda t: sq_sum(T.max_pool2x2(t)), (1, 2, 4, 4)),
            "upsample2x": (lambda t: sq_sum(T.upsample2x(t)), (1, 2, 3, 3)),
            "relu": (lambda t: sq_sum(T.relu(t)), (1, 2, 4, 4)),
            "concat_channels": (lambda t: sq_sum(T.concat_channels(t, side)), (1, 2, 4, 4)),
            "softmax2": (lambda t: sq_sum(T.softmax2(t)), (1, 2, 3, 3)),
        }
        for name, (f, shape) in layer_cases.items():
            x = rng.uniform(-1, 1, shape)
            if name == "relu":
                x = np.where(np.abs(x) < 0.05, 0.1, x)
            err = finite_diff_check(f, Tensor(x), step)
            assert err < tol, f"seed {seed}: {name} gradient error {err}"

        # full mini U-Net + CE loss: every parameter against central FD
        model = build_model(ModelConfig("unet", 2, 4), seed=seed)
        xb = rng.uniform(0, 1, (1, 1, 8, 8))
        target = (rng.uniform(0, 1, (1, 8, 8)) > 0.5).astype(float)

        def loss_for(pname):
            def f(t):
                original = model.params[pname]
                model.params[pname] = t
                try:
                    return ce_loss(forward(model, Tensor(xb)), target)
                finally:
                    model.params[pname] = original

            return f

        for pname in model.params:
            err = finite_diff_check(loss_for(pname), model.params[pname], step)
            assert err < tol, f"seed {seed}: unet parameter {pname} error {err}"


# ---------------------------------------------------------------------------
# 3. Overfit check (property substitute for full-scale reproduction)


@criterion("Overfit check")
def test_overfit_check(tmp_path):
    manifest = data.synth_generate(3, 32, seed=11, out_dir=tmp_path / "overfit")
    records = data.load_manifest(manifest)[:8]
    samples = data.load_samples(records, kind="lung")
    model = build_model(ModelConfig("unet", 2, 8), seed=0)
    config = TrainConfig(alpha=1e-3, max_epochs=200, early_stop_patience=200, seed=1)
    start = time.perf_counter()
    result = train(model, samples, samples, config)
    elapsed = time.perf_counter() - start
    best_dsc = max(rec.val_dsc for rec in result.history)
    assert best_dsc >= 0.95, f"train DSC {best_dsc:.4f} < 0.95"
    assert result.stopped_epoch <= 200
    assert elapsed < 120, f"overfit took {elapsed:.0f}s (budget 2 min)"


# ---------------------------------------------------------------------------
# 4 + 10. Generalization check and end-to-end pipeline (shared training)


@pytest.fixture(scope="module")
def trained_pipeline(tmp_path_factory):
    """Paper-recipe training of both models on synthetic data, 32-bit mode."""
    root = tmp_path_factory.mktemp("generalization")
    T.set_precision("f32")
    try:
        start = time.perf_counter()
        train_manifest = data.synth_generate(67, 64, seed=100, out_dir=root / "train")
        test_manifest = data.synth_generate(17, 64, seed=200, out_dir=root / "test")
        train_records = data.load_manifest(train_manifest)[:200]
        test_records = data.load_manifest(test_manifest)[:50]
        order = np.random.default_rng(0).permutation(len(train_records))

        results = {}
        models = {}
        for kind in ("lung", "infection"):
            samples = data.load_samples(train_records, kind=kind)
            held_out = data.load_samples(test_records, kind=kind)
            val = [samples[i] for i in order[:40]]
            tr = [samples[i] for i in order[40:]]
            model = build_model(ModelConfig("unet", 3, 8), seed=5)
            outcome = train(model, tr, val, TrainConfig(seed=1))
            _, dsc = evaluate_loss_dsc(model, held_out, batch_size=4)
            results[kind] = {"dsc": dsc, "stopped": outcome.stopped_epoch}
            models[kind] = model
        elapsed = time.perf_counter() - start
        yield {
            "results": results,
            "models": models,
            "test_records": test_records,
            "elapsed": elapsed,
        }
    finally:
        T.set_precision("f64")


@criterion("Generalization check")
def test_generalization_check(trained_pipeline):
    results = trained_pipeline["results"]
    assert results["lung"]["dsc"] >= 0.90, f"lung DSC {results['lung']['dsc']:.4f}"
    assert results["infection"]["dsc"] >= 0.80, f"infection DSC {results['infection']['dsc']:.4f}"
    assert trained_pipeline["elapsed"] < 15 * 60, f"took {trained_pipeline['elapsed']:.0f}s"


@criterion("End-to-end pipeline")
def test_end_to_end_pipeline(trained_pipeline):
    test_records = trained_pipeline["test_records"]
    covid = next(r for r in test_records if r.cls == "covid")
    image = data.read_image(covid.image)
    report = quantify.run_pipeline(
        image,
        trained_pipeline["models"]["lung"],
        trained_pipeline["models"]["infection"],
        mode="parallel",
        case_id=covid.id,
    )
    gt_lung = data.read_mask(covid.lung_mask)
    gt_infection = data.read_mask(covid.infection_mask)
    gt_pct = 100.0 * gt_infection.sum() / gt_lung.sum()
    assert report.status == "ok"
    assert report.detection == "positive"
    assert abs(report.overall_pct - gt_pct) <= 10.0, (
        f"predicted {report.overall_pct:.2f}% vs ground truth {gt_pct:.2f}%"
    )


# ---------------------------------------------------------------------------
# 5. Metric oracle equivalence on 1,000 random mask/label sets


@criterion("Metric oracle equivalence")
def test_metric_oracle_equivalence():
    rng = np.random.default_rng(77)
    for trial in range(1000):
        if trial % 2 == 0:
            pred = rng.integers(0, 2, (12, 12)).astype(bool)
            gt = rng.integers(0, 2, (12, 12)).astype(bool)
        else:
            pred = rng.integers(0, 2, 40).astype(bool)
            gt = rng.integers(0, 2, 40).astype(bool)
        tp = int(np.sum(pred & gt))
        tn = int(np.sum(~pred & ~gt))
        fp = int(np.sum(pred & ~gt))
        fn = int(np.sum(~pred & gt))
        c = ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn)

        seg = seg_metrics(c)
        assert abs(seg.accuracy - (tp + tn) / (tp + tn + fp + fn)) < 1e-12
        union = tp + fp + fn
        assert abs(seg.iou - (1.0 if union == 0 else tp / union)) < 1e-12
        assert abs(seg.dsc - (1.0 if union == 0 else 2 * tp / (2 * tp + fp + fn))) < 1e-12
        assert abs(seg.dsc - 2 * seg.iou / (1 + seg.iou)) < 1e-12

        det = det_metrics(c)
        if tp + fp:
            assert abs(det.precision - tp / (tp + fp)) < 1e-12
        if tp + fn:
            assert abs(det.sensitivity - tp / (tp + fn)) < 1e-12
        if tn + fp:
            assert abs(det.specificity - tn / (tn + fp)) < 1e-12
        if det.f1 is not None:
            p, s = det.precision, det.sensitivity
            assert abs(det.f1 - 2 * p * s / (p + s)) < 1e-12


# ---------------------------------------------------------------------------
# 6. Post-processing properties


def _bfs_flood_fill(mask):
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=int)
    n = 0
    for r in range(h):
        for c in range(w):
            if mask[r, c] and not labels[r, c]:
                n += 1
                queue = deque([(r, c)])
                labels[r, c] = n
                while queue:
                    cr, cc = queue.popleft()
                    for dr in (-1, 0, 1):
                        for dc in (-1, 0, 1):
                            nr, nc = cr + dr, cc + dc
                            if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and not labels[nr, nc]:
                                labels[nr, nc] = n
                                queue.append((nr, nc))
    return labels


@criterion("Post-processing properties")
def test_postprocessing_properties():
    rng = np.random.default_rng(99)
    for _ in range(1000):
        mask = (rng.uniform(0, 1, (16, 16)) > rng.uniform(0.3, 0.8)).astype(np.uint8)
        filled = maskops.fill_holes(mask)
        assert np.array_equal(maskops.fill_holes(filled), filled)
        pruned = maskops.remove_small_regions(mask)
        assert np.array_equal(maskops.remove_small_regions(pruned), pruned)
        probs = rng.uniform(0, 1, (16, 16))
        lung = (rng.uniform(0, 1, (16, 16)) > 0.5).astype(np.uint8)
        assert np.all(maskops.postprocess_infection(probs, lung) <= lung)

    # connected components against the independent flood-fill oracle
    for _ in range(50):
        mask = (rng.uniform(0, 1, (16, 16)) > 0.6).astype(np.uint8)
        assert np.array_equal(maskops.connected_components(mask).labels, _bfs_flood_fill(mask))

    # strict "< 5%" boundary
    mask = np.zeros((20, 20), dtype=np.uint8)
    mask[0:8, 0:12] = 1  # 96 px
    mask[15:17, 15:17] = 1  # 4 px of 100 -> erased
    assert maskops.remove_small_regions(mask).sum() == 96
    mask = np.zeros((20, 20), dtype=np.uint8)
    mask[0:5, 0:19] = 1  # 95 px
    mask[10:15, 19] = 1  # exactly 5 px of 100 -> kept
    assert maskops.remove_small_regions(mask).sum() == 100


# ---------------------------------------------------------------------------
# 7. Detection rule exactness


@criterion("Detection rule exactness")
def test_detection_rule_exactness():
    rng = np.random.default_rng(31)
    for trial in range(500):
        density = rng.uniform(0, 0.2) if trial % 3 == 0 else rng.uniform(0.2, 0.9)
        mask = (rng.uniform(0, 1, (16, 16)) < density).astype(np.uint8)
        assert (quantify.detect(mask) == "positive") == (mask.sum() >= 1)

    for _ in range(200):
        lung = (rng.uniform(0, 1, (16, 16)) > 0.5).astype(np.uint8)
        if lung.sum() == 0:
            continue
        infection = (lung & (rng.uniform(0, 1, (16, 16)) > 0.5)).astype(np.uint8)
        sides = quantify.per_lung_percentages(infection, lung)
        assert sides.left_infection_pixels + sides.right_infection_pixels == infection.sum()


# ---------------------------------------------------------------------------
# 8. Cohort count bookkeeping


@criterion("Cohort bookkeeping")
def test_cohort_bookkeeping():
    lung_rows = {"covid": (7658, 1903, 2395), "non_covid": (7208, 1802, 2253),
                 "normal": (6849, 1712, 2140)}
    records = []
    for cls, (n_train, n_val, n_test) in lung_rows.items():
        for split, count in (("train", n_train), ("val", n_val), ("test", n_test)):
            records += [
                data.DatasetRecord(id=f"{cls}_{split}_{i}", image=None, lung_mask=None,
                                   infection_mask=None, cls=cls, split=split)
                for i in range(count)
            ]
    counts = audit_class_counts(records)
    covid = counts["covid"]
    assert covid["train"] + covid["val"] + covid["test"] == 11956
    assert sum(row["total"] for row in counts.values()) == 33920
    assert sum(row["test"] for row in counts.values()) == 6788

    det_rows = {"covid": 583, "non_covid": 292, "normal": 291}
    det_records = [
        data.DatasetRecord(id=f"d_{cls}_{i}", image=None, lung_mask=None,
                           infection_mask=None, cls=cls, split="test")
        for cls, n in det_rows.items()
        for i in range(n)
    ]
    assert sum(audit_class_counts(det_records)[c]["test"] for c in det_rows) == 1166

    # generated plans: disjoint, exhaustive, per-class test proportion +-1 item
    gen_records = [
        data.DatasetRecord(id=f"{cls}_{i}", image=None, lung_mask=None,
                           infection_mask=None, cls=cls)
        for cls, n in (("covid", 119), ("non_covid", 113), ("normal", 107))
        for i in range(n)
    ]
    plan = make_fold_plan(gen_records, test_fraction=0.2, k=5, seed=7)
    all_ids = {r.id for r in gen_records}
    test_ids = set(plan.test_ids)
    for train_ids, val_ids in plan.folds:
        tr, va = set(train_ids), set(val_ids)
        assert not (tr & va) and not (test_ids & (tr | va))
        assert test_ids | tr | va == all_ids
    for cls, n in (("covid", 119), ("non_covid", 113), ("normal", 107)):
        assert abs(len(plan.test_by_class[cls]) - 0.2 * n) <= 1


# ---------------------------------------------------------------------------
# 9. Workflow determinism


@criterion("Workflow determinism")
def test_workflow_determinism():
    rng = np.random.default_rng(55)
    engine = WorkflowEngine()
    classes = {f"it{i:04d}": ("covid", "non_covid", "normal")[i % 3] for i in range(900)}
    engine.init(classes, sorted(classes)[:700], seed=13)
    engine.register_models(1, ["a", "b", "c"])
    engine.stage1_select({"a": 0.95, "b": 0.97, "c": 0.96})
    engine.advance_stage("II")
    decisions = ("accept", "reject", "unsure", "exclude")
    while True:
        ids = engine.next_batch(batch_size=90)
        if not ids:
            break
        for item_id in ids:
            d = decisions[rng.integers(0, 4)]
            if d == "reject":
                engine.submit_decision(item_id, d, reviewer="r", edited_mask_ref="e.pgm")
            elif d == "unsure":
                engine.submit_decision(item_id, d, reviewer="r", note="check")
                engine.md_resolve(item_id, "resolved", "m.pgm", reviewer="md")
            else:
                engine.submit_decision(item_id, d, reviewer="r")
        engine.finalize_round()
    engine.advance_stage("III")
    engine.register_models(3, [f"n{i}" for i in range(6)])
    fresh = [i for i in sorted(engine.state.classes) if i not in engine.state.items][:150]
    engine.stage3_propose({i: [f"p{m}" for m in range(6)] for i in fresh})
    for item_id in fresh:
        engine.stage3_select(item_id, 1 + int(rng.integers(0, 6)))
    assert len(engine.events) >= 1000

    replayed = WorkflowEngine.replay(engine.events)
    assert replayed.state.to_dict() == engine.state.to_dict()

    # randomized fuzzing: monotone repository, guards leave state untouched
    fuzz = WorkflowEngine.replay(engine.events[:600])
    prev_size = len(fuzz.state.repository)
    from cxrseg.errors import ConfigurationError, StateError, UsageError

    for _ in range(300):
        snapshot = fuzz.state.to_dict()
        try:
            op = rng.integers(0, 5)
            if op == 0:
                fuzz.next_batch(batch_size=int(rng.integers(1, 40)))
            elif op == 1 and fuzz.state.items:
                items = sorted(fuzz.state.items)
                fuzz.submit_decision(
                    items[int(rng.integers(0, len(items)))],
                    decisions[int(rng.integers(0, 4))],
                    reviewer="r",
                    edited_mask_ref="e.pgm" if rng.uniform() < 0.4 else None,
                )
            elif op == 2:
                fuzz.finalize_round()
            elif op == 3:
                fuzz.advance_stage(("II", "III", "IV")[int(rng.integers(0, 3))])
            else:
                items = [i for i, it in fuzz.state.items.items()
                         if it.status == "rejected_pending_edit"]
                if items:
                    fuzz.submit_edit(items[0], "e.pgm", reviewer="r")
        except (StateError, UsageError, ConfigurationError):
            assert fuzz.state.to_dict() == snapshot
        size = len(fuzz.state.repository)
        assert size >= prev_size
        prev_size = size
        for item in fuzz.state.items.values():
            if item.status == "excluded":
                assert item.id not in fuzz.state.repository
