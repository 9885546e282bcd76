import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import box_cells, flood_fill_regions, pixel_set_iou, pseudo_label_oracle
from promptdet.exceptions import ConfigurationError, InputError
from promptdet.pseudolabel import (ConnectedRegion, Proposal, PseudoLabel, RPNConfig, Thresholds, ToyRPN,
                                   _mask_iou, anchor_targets, audit_training_log, connected_regions,
                                   generate_pseudo_labels, load_rpn, mask_iou, minmax_columns,
                                   oracle_proposals, propose_regions_rpn, propose_regions_rpn_batch,
                                   rasterize_box, read_pseudo_labels, save_rpn, train_rpn,
                                   write_pseudo_labels)
from promptdet.synthdata import (BACKGROUND, CategorySet, DatasetConfig, SceneAnnotation, generate_scene,
                                 reference_categories)
from promptdet.vlm import DenseScoreMap


def region_sets(regions):
    return [sorted(map(tuple, np.argwhere(r.mask))) for r in regions]


class TestConnectedRegions:
    def test_nothing_above(self):
        assert connected_regions(np.full(16, 0.1), 0.5, (4, 4)) == []

    def test_everything_above(self):
        regions = connected_regions(np.full(12, 0.9), 0.5, (3, 4))
        assert len(regions) == 1 and regions[0].mask.all()
        assert regions[0].bbox_hull == (0, 0, 16, 12)

    def test_diagonal_blobs(self):
        grid = np.zeros((7, 7))
        grid[1:3, 1:3] = 1
        grid[3:5, 3:5] = 1
        assert len(connected_regions(grid.ravel(), 0.5, (7, 7))) == 2
        assert len(connected_regions(grid.ravel(), 0.5, (7, 7), connectivity=8)) == 1

    def test_nan_and_inf_excluded(self):
        col = np.array([np.nan, 1.0, -np.inf, 1.0])
        regions = connected_regions(col, 0.5, (1, 4))
        assert region_sets(regions) == [[(0, 1)], [(0, 3)]]

    @pytest.mark.parametrize("connectivity", [4, 8])
    def test_flood_fill_oracle(self, rng, connectivity):
        for _ in range(200):
            h, w = rng.integers(1, 33, size=2)
            col = rng.random(h * w)
            delta = rng.uniform(0.2, 0.8)
            got = region_sets(connected_regions(col, delta, (h, w), connectivity=connectivity))
            assert got == flood_fill_regions(col.reshape(h, w) >= delta, connectivity)

    def test_bad_connectivity(self):
        with pytest.raises(ConfigurationError):
            connected_regions(np.ones(4), 0.5, (2, 2), connectivity=6)


class TestMaskIoU:
    def test_identity(self):
        mask = np.zeros((6, 6), dtype=bool)
        mask[1:4, 2:5] = True
        region = ConnectedRegion(0, mask, (8, 4, 20, 16))
        assert mask_iou(Proposal((8, 4, 20, 16), 1.0), region, (6, 6)) == 1.0

    def test_disjoint(self):
        mask = np.zeros((6, 6), dtype=bool)
        mask[0, 0] = True
        assert mask_iou((12, 12, 24, 24), mask, (6, 6)) == 0.0

    def test_corner_overlap(self):
        mask = np.zeros((8, 8), dtype=bool)
        mask[2:6, 2:6] = True
        assert mask_iou((0, 0, 16, 16), mask, (8, 8)) == pytest.approx(4 / 28, abs=1e-15)

    def test_degenerate_box_warns(self):
        with pytest.warns(RuntimeWarning):
            assert mask_iou((1, 1, 2, 2), np.ones((4, 4), dtype=bool), (4, 4)) == 0.0

    def test_centre_rule(self):
        # cell 1 spans [4, 8) with centre 6: the box edge at 6 includes it, at 6.01 does not
        assert rasterize_box((6, 0, 8, 4), (1, 3), 4).tolist() == [[False, True, False]]
        assert rasterize_box((6.01, 0, 8, 4), (1, 3), 4).tolist() == [[False, False, False]]

    def test_pixel_set_oracle(self, rng):
        for _ in range(300):
            grid = tuple(rng.integers(1, 10, size=2))
            x1, x2 = np.sort(rng.uniform(-4, grid[1] * 4 + 4, size=2))
            y1, y2 = np.sort(rng.uniform(-4, grid[0] * 4 + 4, size=2))
            mask = rng.random(grid) < 0.4
            cells = box_cells((x1, y1, x2, y2), grid, 4)
            if not cells:
                continue
            expected = pixel_set_iou(cells, set(map(tuple, np.argwhere(mask))))
            assert mask_iou((x1, y1, x2, y2), mask, grid) == expected

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 100_000))
    def test_symmetry_and_self(self, seed):
        r = np.random.default_rng(seed)
        a, b = r.random((5, 6)) < 0.5, r.random((5, 6)) < 0.5
        assert _mask_iou(a, b) == _mask_iou(b, a)
        box = tuple(np.sort(r.uniform(0, 24, 2))[[0]]) + tuple(np.sort(r.uniform(0, 20, 2))[[0]])
        box = (box[0], box[1], box[0] + 4.0, box[1] + 4.0)
        raster = rasterize_box(box, (5, 6), 4)
        if raster.any():
            assert mask_iou(box, raster, (5, 6)) == 1.0


class TestThresholds:
    @pytest.mark.parametrize("kw", [dict(delta=0.0), dict(delta=1.0), dict(gamma=0.0), dict(gamma=1.01),
                                    dict(objectness_min=-0.1), dict(objectness_min=1.01)])
    def test_ranges(self, kw):
        with pytest.raises(ConfigurationError):
            Thresholds(**kw).validate()

    def test_paper_defaults(self):
        th = Thresholds()
        assert (th.delta, th.gamma) == (0.6, 0.4)


def two_class_map():
    """4x4 grid, class 0 base, class 1 novel occupying the bottom-right 2x2 block."""
    values = np.zeros((16, 2))
    values[:, 0] = 0.5
    block = [10, 11, 14, 15]
    values[block, 1] = 1.0
    return values, (4, 4)


class TestGeneratePseudoLabels:
    cats = CategorySet(["red-circle", "blue-cross"], [True, False])

    def test_no_proposals(self):
        assert generate_pseudo_labels(two_class_map(), [], Thresholds(), self.cats) == []

    def test_exact_match(self):
        labels = generate_pseudo_labels(two_class_map(), [Proposal((8, 8, 16, 16), 1.0)], Thresholds(gamma=1.0),
                                        self.cats, "im")
        assert labels == [PseudoLabel("im", (8.0, 8.0, 16.0, 16.0), 1, 1.0)]

    def test_gamma_one_rejects_near_miss(self):
        labels = generate_pseudo_labels(two_class_map(), [Proposal((4, 8, 16, 16), 1.0)], Thresholds(gamma=1.0),
                                        self.cats)
        assert labels == []

    def test_objectness_filter(self):
        props = [Proposal((8, 8, 16, 16), 0.5)]
        assert generate_pseudo_labels(two_class_map(), props, Thresholds(objectness_min=0.6), self.cats) == []
        assert len(generate_pseudo_labels(two_class_map(), props, Thresholds(objectness_min=0.5), self.cats)) == 1

    def test_base_argmax_pixels_removed(self):
        values, grid = two_class_map()
        values[10, 0] = 2.0  # the base class now wins one pixel of the novel block
        labels = generate_pseudo_labels((values, grid), [Proposal((8, 8, 16, 16), 1.0)], Thresholds(), self.cats)
        assert labels[0].confidence == pytest.approx(3 / 4)

    def test_tie_goes_to_earlier_class(self):
        cats = CategorySet(["red-circle", "blue-cross", "green-cross"], [True, False, False])
        values = np.zeros((16, 3))
        values[[10, 11, 14, 15], 1] = 1.0
        values[[10, 11, 14, 15], 2] = 1.0
        labels = generate_pseudo_labels((values, (4, 4)), [Proposal((8, 8, 16, 16), 1.0)], Thresholds(), cats)
        assert [lab.class_index for lab in labels] == [1]

    def test_score_map_checks(self):
        with pytest.raises(InputError):
            generate_pseudo_labels((np.zeros((16, 3)), (4, 4)), [], Thresholds(), self.cats)
        with pytest.raises(InputError):
            generate_pseudo_labels((np.zeros((15, 2)), (4, 4)), [], Thresholds(), self.cats)
        bad = DenseScoreMap(torch.zeros(16, 2), (4, 4), ("x", "y"))
        with pytest.raises(InputError):
            generate_pseudo_labels(bad, [], Thresholds(), self.cats)

    def test_minmax(self):
        out = minmax_columns(np.array([[1.0, 5.0], [3.0, 5.0], [2.0, 5.0]]))
        assert out.tolist() == [[0.0, 0.0], [1.0, 0.0], [0.5, 0.0]]

    def test_matches_oracle_on_scenes(self, rng):
        cats = reference_categories()
        cfg = DatasetConfig()
        from promptdet.metrics import downsample_mask
        for i in range(10):
            _, ann = generate_scene(cfg, 11, f"s{i}")
            gt = downsample_mask(ann.dense_mask, 4).ravel()
            values = rng.normal(0, 0.3, size=(144, len(cats)))
            values[np.arange(144)[gt != BACKGROUND], gt[gt != BACKGROUND]] += 1.0
            props = oracle_proposals(ann, jitter=2.0, seed=i)
            th = Thresholds(0.6, 0.4, 0.0)
            got = generate_pseudo_labels((values, (12, 12)), props, th, cats)
            expected = pseudo_label_oracle(values, (12, 12), cats.base_flags,
                                           [(p.bbox, p.objectness) for p in props], 0.6, 0.4, 0.0)
            assert [(lab.bbox, lab.class_index, lab.confidence) for lab in got] == \
                [(props[k].bbox, c, conf) for k, c, conf in expected]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 100_000))
    def test_outputs_are_non_base_and_confident(self, seed):
        r = np.random.default_rng(seed)
        cats = CategorySet(["red-circle", "blue-cross", "green-cross"], [True, False, False])
        values = r.normal(size=(36, 3))
        props = [Proposal(tuple(np.r_[np.sort(r.uniform(0, 24, 2)), np.sort(r.uniform(0, 24, 2))][[0, 2, 1, 3]]),
                          r.random()) for _ in range(8)]
        th = Thresholds(r.uniform(0.1, 0.9), r.uniform(0.1, 1.0), r.uniform(0, 1))
        for lab in generate_pseudo_labels((values, (6, 6)), props, th, cats):
            assert lab.class_index in cats.novel_indices
            assert th.gamma <= lab.confidence <= 1.0


class TestProposals:
    def test_oracle_proposals_empty_scene(self):
        ann = SceneAnnotation("e", np.zeros((0, 4), dtype=np.int64), np.zeros(0, dtype=np.int64),
                              np.full((48, 48), BACKGROUND))
        assert oracle_proposals(ann) == []

    def test_objectness_above_one(self):
        _, ann = generate_scene(DatasetConfig(), 0)
        assert oracle_proposals(ann, objectness_min=1.0 + 1e-9) == []
        img, _ = generate_scene(DatasetConfig(), 0)
        assert propose_regions_rpn(img, ToyRPN(), objectness_min=1.0 + 1e-9) == []

    def test_invalid_proposal(self):
        with pytest.raises(InputError):
            Proposal((5, 0, 4, 3), 0.5)
        with pytest.raises(InputError):
            Proposal((0, 0, 4, 3), 1.5)

    def test_anchor_targets_keep_best_anchor(self):
        rpn = ToyRPN()
        gt = torch.tensor([[3.0, 5.0, 9.0, 8.0]])  # too small for any anchor to reach IoU 0.5
        labels, matched = anchor_targets(rpn.anchors, gt, 0.5, 0.3)
        assert (labels == 1).sum() == 1 and matched[labels == 1].tolist() == [0]


@pytest.fixture(scope="module")
def trained_rpn():
    cfg = DatasetConfig()
    scenes = [generate_scene(cfg, 2, f"r{i}") for i in range(32)]
    base = cfg.categories.base_indices
    rpn, log = train_rpn([s[0] for s in scenes], [s[1] for s in scenes], base, RPNConfig(epochs=2))
    return rpn, log, scenes, base


class TestRPN:
    def test_training_log_is_base_only(self, trained_rpn):
        rpn, log, scenes, base = trained_rpn
        assert log and audit_training_log(log, base) == []
        novel = set(range(16)) - set(base)
        n_novel = sum(int(c) in novel for _, ann in scenes for c in ann.class_ids)
        assert n_novel > 0 and len(log) == sum(len(ann.class_ids) for _, ann in scenes) - n_novel
        assert audit_training_log(log + [{"class_index": sorted(novel)[0]}], base) != []

    def test_proposals_sorted_and_frozen(self, trained_rpn):
        rpn, _, scenes, _ = trained_rpn
        assert all(not p.requires_grad for p in rpn.parameters())
        for props in propose_regions_rpn_batch([s[0] for s in scenes[:4]], rpn, top_k=10):
            obj = [p.objectness for p in props]
            assert 0 < len(props) <= 10 and obj == sorted(obj, reverse=True)

    def test_round_trip(self, trained_rpn, tmp_path):
        rpn, _, scenes, _ = trained_rpn
        save_rpn(tmp_path / "rpn", rpn)
        back = load_rpn(tmp_path / "rpn")
        img = scenes[0][0]
        assert propose_regions_rpn(img, rpn) == propose_regions_rpn(img, back)


def test_label_file_round_trip(tmp_path):
    labels = {"b": [PseudoLabel("b", (1.0, 2.0, 3.0, 4.0), 3, 0.5)], "a": []}
    write_pseudo_labels(tmp_path / "p.json", labels, Thresholds(), extra={"arm": "both"})
    back, doc = read_pseudo_labels(tmp_path / "p.json")
    assert back == labels and doc["arm"] == "both" and doc["normalization"] == "minmax"
