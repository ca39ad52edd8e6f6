import numpy as np
import pytest

from hila import autograd as ag
from hila import hierarchy as hy
from hila import interlevel as il
from hila.checks import make_interlevel_params
from hila.encoder import FeatureMap
from hila.errors import ContractError
from hila.tensor import PatchGeometry, Tensor

G = PatchGeometry()


def fmap(arr, stage, dtype="float32"):
    return FeatureMap(ag.constant(Tensor(arr, dtype=dtype)), stage, 0)


def top_down_weights(rng, hl, wl, dl, dh, stage_hi, seed):
    p = make_interlevel_params(dl, dh, False, 16, seed)
    xl = fmap(rng.normal(size=(1, hl, wl, dl)).astype(np.float32), stage_hi - 1)
    xh = fmap(rng.normal(size=(1, hl // 2, wl // 2, dh)).astype(np.float32), stage_hi)
    _, w = il.top_down_attention_efficient(xl, xh, p, G)
    return w


class TestReceptiveWindow:
    def test_one_level_is_the_patch(self):
        assert hy.receptive_window(4, 3, G) == 4

    def test_recurrence_defaults(self):
        assert hy.receptive_window(4, 2, G) == 10
        assert hy.receptive_window(4, 1, G) == 22

    def test_recurrence_other_geometry(self):
        g = PatchGeometry(kernel=2, stride=2, padding=0)
        assert [hy.receptive_window(1 + n, 1, g) for n in (1, 2, 3)] == [2, 4, 8]

    def test_requires_descending_stages(self):
        with pytest.raises(ContractError):
            hy.receptive_window(2, 2, G)


class TestCompose:
    def test_identity_base_case(self, rng):
        w = top_down_weights(rng, 8, 8, 4, 8, stage_hi=3, seed=0)
        base = hy.mask_from_weights(w, 3)
        composed = hy.compose(w, hy.identity_mask(2, 8, 8), normalize=False)
        assert np.abs(composed.to_dense() - base.to_dense()).max() < 1e-7
        normalized = hy.compose(w, hy.identity_mask(2, 8, 8), normalize=True)
        ref = base.normalized_copy()
        assert np.abs(normalized.to_dense() - ref.to_dense()).max() < 1e-7

    def test_uniform_times_uniform_is_uniform_on_support(self):
        # hand-built records: every window uniform over its real slots
        def uniform_weights(hl, wl, stage):
            ht, wt = hl // 2, wl // 2
            m = np.zeros((1, ht * wt, 16), dtype=np.float32)
            for t in range(ht * wt):
                i, j = divmod(t, wt)
                covers = []
                for slot in range(16):
                    r = 2 * i - 1 + slot // 4
                    c = 2 * j - 1 + slot % 4
                    if 0 <= r < hl and 0 <= c < wl:
                        covers.append(slot)
                for slot in covers:
                    m[0, t, slot] = 1.0 / len(covers)
            return il.InterLevelWeights(Tensor(m), "top_down", G, (ht, wt), (hl, wl))

        upper = uniform_weights(4, 4, 3)  # 2x2 -> 4x4
        lower = uniform_weights(8, 8, 2)  # 4x4 -> 8x8
        mask = hy.compose(upper, hy.mask_from_weights(lower, 2))
        row = mask.rows[3]  # source (1,1)
        # double average: all mass inside the union support, rows normalized
        assert abs(sum(row.values()) - 1.0) < 1e-6
        side = hy.receptive_window(3, 1, G)
        r0, c0 = hy.window_origin(3, 1, G, (1, 1))
        for pix in row:
            r, c = divmod(pix, 8)
            assert r0 <= r < r0 + side and c0 <= c < c0 + side

    def test_rows_sum_to_one_after_normalization(self, rng):
        w_upper = top_down_weights(rng, 4, 6, 8, 16, stage_hi=4, seed=1)
        w_lower = top_down_weights(rng, 8, 12, 4, 8, stage_hi=3, seed=2)
        mask = hy.compose(w_upper, hy.mask_from_weights(w_lower, 3))
        sums = np.array([sum(r.values()) for r in mask.rows])
        assert np.abs(sums - 1.0).max() < 1e-6

    def test_mass_preserved_with_row_stochastic_inputs(self, rng):
        w_upper = top_down_weights(rng, 4, 6, 8, 16, stage_hi=4, seed=3)
        w_lower = top_down_weights(rng, 8, 12, 4, 8, stage_hi=3, seed=4)
        upper_n = hy.mask_from_weights(w_upper, 4).normalized_copy()
        lower_n = hy.mask_from_weights(w_lower, 3).normalized_copy()
        rows = []
        for urow in upper_n.rows:
            acc = 0.0
            for mid, uval in urow.items():
                acc += uval * sum(lower_n.rows[mid].values())
            rows.append(acc)
        assert np.abs(np.array(rows) - 1.0).max() < 1e-5

    def test_stage_mismatch_rejected(self, rng):
        w_upper = top_down_weights(rng, 4, 4, 8, 16, stage_hi=4, seed=5)
        w_lower = top_down_weights(rng, 8, 8, 4, 8, stage_hi=3, seed=6)
        bad = hy.mask_from_weights(w_lower, 3)  # 3->2, expects upper at 4
        bad.source_stage = 1  # force mismatch
        with pytest.raises(ContractError):
            hy.compose(w_upper, bad)

    def test_support_containment_three_levels(self, rng):
        w4 = top_down_weights(rng, 2, 2, 8, 16, stage_hi=4, seed=7)
        w3 = top_down_weights(rng, 4, 4, 4, 8, stage_hi=3, seed=8)
        w2 = top_down_weights(rng, 8, 8, 4, 4, stage_hi=2, seed=9)
        mask = hy.compose_chain({4: w4, 3: w3, 2: w2}, 4, 3)
        assert (mask.source_stage, mask.target_stage) == (4, 1)
        side = hy.receptive_window(4, 1, G)
        for t, row in enumerate(mask.rows):
            loc = divmod(t, mask.src_grid[1])
            r0, c0 = hy.window_origin(4, 1, G, loc)
            for pix in row:
                r, c = divmod(pix, mask.tgt_grid[1])
                assert r0 <= r < r0 + side and c0 <= c < c0 + side

    def test_chain_requires_all_stages(self, rng):
        w4 = top_down_weights(rng, 2, 2, 8, 16, stage_hi=4, seed=10)
        with pytest.raises(ContractError) as err:
            hy.compose_chain({4: w4, 3: None}, 4, 2)
        assert "stage 3" in str(err.value)


class TestRenderMask:
    def _mask(self, rng):
        w = top_down_weights(rng, 8, 8, 4, 8, stage_hi=3, seed=11)
        return hy.compose(w, hy.identity_mask(2, 8, 8))

    def test_single_bright_pixel(self, rng):
        mask = self._mask(rng)
        mask.rows[0] = {3 * 8 + 5: 1.0}
        img = Tensor(np.zeros((32, 32, 3), np.float32))
        out = hy.render_mask(mask, (0, 0), img, alpha=1.0).array
        # the lit cell maps to a 4x4 block in red
        assert out[12:16, 20:24, 0].min() == 1.0
        lit = out[..., 0] > 0.5
        assert lit[12:16, 20:24].all()

    def test_uniform_row_tints_only_support(self, rng):
        mask = self._mask(rng)
        out = hy.render_mask(mask, (1, 1), Tensor(np.zeros((32, 32, 3), np.float32)),
                             alpha=0.8).array
        support = sorted(mask.rows[1 * 4 + 1])
        tinted = np.argwhere(out[..., 0] > 0)
        cells = {(r // 4) * 8 + (c // 4) for r, c in tinted}
        r0, c0 = hy.window_origin(3, 2, G, (1, 1))
        side = hy.receptive_window(3, 2, G)
        window = {
            r * 8 + c
            for r in range(max(r0, 0), min(r0 + side, 8))
            for c in range(max(c0, 0), min(c0 + side, 8))
        }
        assert cells <= window | set(support)

    def test_alpha_zero_returns_base_unchanged(self, rng):
        mask = self._mask(rng)
        gray = np.repeat(rng.uniform(size=(32, 32, 1)).astype(np.float32), 3, axis=2)
        out = hy.render_mask(mask, (0, 0), Tensor(gray), alpha=0.0)
        assert np.array_equal(out.array, gray)

    def test_out_of_range_query_rejected(self, rng):
        with pytest.raises(ContractError):
            hy.render_mask(self._mask(rng), (9, 0), Tensor(np.zeros((32, 32, 3), np.float32)))
