import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lrt import encoders as E
from lrt import numerics as nx
from lrt.errors import ConfigError, ContractError, DomainError
from lrt.numerics import Tensor

from gradcheck import check


def encoder(rng, d_raw=5, d_v=6, bias=True):
    enc = E.VisualEncoder.init(rng, d_raw, d_v)
    if not bias:
        enc.b_enc.data[:] = 0
    return enc


def text_encoder(rng, vocab=12, d_tok=4, d_t=8, k=1):
    return E.TextEncoder.init(rng, rng.normal(size=(vocab, d_tok)), d_t, n_templates=k)


def naive_patch(x, W, b):
    return np.maximum(x @ W + b, 0.0)


# ------------------------------------------------------------ visual side


def test_zero_image_zero_bias(rng):
    enc = encoder(rng, bias=False)
    fmap, pooled = E.encode_image(np.zeros((3, 3, 5)), enc)
    assert not pooled.data.any() and fmap.shape == (3, 3, 6)


def test_single_patch_pooling(rng):
    enc = encoder(rng)
    x = rng.normal(size=(1, 1, 5))
    _, pooled = E.encode_image(x, enc)
    np.testing.assert_array_equal(pooled.data, naive_patch(x[0, 0], enc.W_enc.data, enc.b_enc.data))


def test_2x2_pooled_is_mean_of_patches(rng):
    enc = encoder(rng)
    x = rng.normal(size=(2, 2, 5))
    fmap, pooled = E.encode_image(x, enc)
    patches = [naive_patch(x[h, w], enc.W_enc.data, enc.b_enc.data) for h in range(2) for w in range(2)]
    np.testing.assert_allclose(pooled.data, sum(patches) / 4, atol=1e-14)
    np.testing.assert_allclose(fmap.data[1, 0], patches[2], atol=1e-14)


def test_batch_path_matches_reference(rng):
    enc = encoder(rng)
    X = rng.normal(size=(7, 3, 4, 5))
    ref = np.stack([E.encode_image(x, enc)[1].data for x in X])
    np.testing.assert_allclose(E.encode_batch(X, enc).data, ref, atol=1e-13)


def test_dim_mismatch(rng):
    enc = encoder(rng)
    with pytest.raises(ContractError):
        E.encode_image(np.zeros((2, 2, 4)), enc)
    with pytest.raises(ContractError):
        E.encode_batch(np.zeros((1, 2, 2, 4)), enc)


def test_class_prototype_examples(rng):
    enc = encoder(rng)
    one = rng.normal(size=(1, 3, 3, 5))
    np.testing.assert_array_equal(E.class_prototype(one, enc), E.encode_batch(one, enc).data[0])
    same = np.repeat(one, 5, axis=0)
    np.testing.assert_allclose(E.class_prototype(same, enc), E.encode_image(one[0], enc)[1].data, atol=1e-14)
    five = rng.normal(size=(5, 3, 3, 5))
    brute = np.mean([E.encode_image(x, enc)[1].data for x in five], axis=0)
    assert np.abs(E.class_prototype(five, enc) - brute).max() < 1e-12
    with pytest.raises(ContractError):
        E.class_prototype(np.zeros((0, 3, 3, 5)), enc)


@given(st.permutations(range(6)))
def test_class_prototype_permutation_invariant(perm):
    r = np.random.default_rng(0)
    enc = encoder(r)
    X = r.normal(size=(6, 2, 2, 5))
    np.testing.assert_allclose(E.class_prototype(X[list(perm)], enc), E.class_prototype(X, enc), atol=1e-14)


# -------------------------------------------------------------- text side


def test_prompt_ordering(rng):
    text = text_encoder(rng)
    bank = E.PromptBank(2, 2, text.d_tok)
    bank.register(3, rng)
    seq = E.assemble_prompt(3, bank, (4, 7, 1), text).data
    assert seq.shape == (7, text.d_tok)
    np.testing.assert_array_equal(seq[:2], bank.prefix[3].data)
    np.testing.assert_array_equal(seq[2:5], text.token_table.data[[4, 7, 1]])
    np.testing.assert_array_equal(seq[5:], bank.suffix[3].data)


def test_empty_prompt_is_name_tokens(rng):
    text = text_encoder(rng)
    bank = E.PromptBank(0, 0, text.d_tok)
    bank.register(0, rng)
    np.testing.assert_array_equal(E.assemble_prompt(0, bank, (2, 5), text).data, text.token_table.data[[2, 5]])


def test_mixed_prompt(rng):
    text = text_encoder(rng)
    bank = E.PromptBank(2, 2, text.d_tok)
    bank.register(0, rng)
    bank.register(1, rng)
    mixed = E.assemble_mixed(0, 1, bank, (1, 2, 3), (4, 5, 6), text).data
    assert mixed.shape == (2 * (2 + 3 + 2), text.d_tok)
    np.testing.assert_array_equal(mixed[:7], E.assemble_prompt(0, bank, (1, 2, 3), text).data)
    np.testing.assert_array_equal(mixed[7:], E.assemble_prompt(1, bank, (4, 5, 6), text).data)
    names = {0: (1, 2, 3), 1: (4, 5, 6)}
    batch = E.assemble_batch([(0, 1), (1, 0)], bank, names, text).data
    np.testing.assert_array_equal(batch[0], mixed)
    np.testing.assert_array_equal(batch[1], E.assemble_mixed(1, 0, bank, (4, 5, 6), (1, 2, 3), text).data)


def test_unknown_class_lookup(rng):
    text = text_encoder(rng)
    with pytest.raises(KeyError):
        E.assemble_prompt(9, E.PromptBank(1, 1, text.d_tok), (0,), text)


def test_prompt_bank_validation_and_init(rng):
    with pytest.raises(ConfigError):
        E.PromptBank(-1, 2, 4)
    bank = E.PromptBank(2, 2, 4)
    for c in range(50):
        bank.register(c, rng)
    vals = np.concatenate([t.data.ravel() for t in bank.parameters().values()])
    assert abs(vals.std() - E.PROMPT_INIT_STD) < 0.004 and abs(vals.mean()) < 0.004


def test_encode_text_single_token(rng):
    text = text_encoder(rng)
    e = text.token_table.data[3] @ text.projection.data
    np.testing.assert_allclose(E.encode_text(text.token_table.data[[3]], text).data, e / np.linalg.norm(e),
                               atol=1e-15)


@given(st.integers(1, 6), st.integers(0, 2**31))
def test_encode_text_unit_norm_and_order_free(length, seed):
    r = np.random.default_rng(seed)
    text = text_encoder(r)
    seq = r.normal(size=(length, text.d_tok))
    out = E.encode_text(seq, text).data
    assert abs(np.linalg.norm(out) - 1.0) < 1e-12
    np.testing.assert_allclose(E.encode_text(seq[r.permutation(length)], text).data, out, atol=1e-14)


def test_encode_text_errors(rng):
    text = text_encoder(rng)
    with pytest.raises(DomainError):
        E.encode_text(np.zeros((2, text.d_tok)), text)
    with pytest.raises(ContractError):
        E.encode_text(np.zeros((0, text.d_tok)), text)


def test_sign_split_projection_preserves_angles(rng):
    text = text_encoder(rng, d_tok=4, d_t=8)
    P = text.projection.data
    np.testing.assert_allclose(P @ P.T, np.eye(4), atol=1e-12)


def test_text_prototype_templates(rng):
    text1 = text_encoder(rng, k=1)
    bank = E.PromptBank(2, 2, text1.d_tok)
    bank.register(0, rng)
    tok = (1, 2, 3)
    one = E.text_prototype(0, bank, tok, text1).data
    np.testing.assert_array_equal(one, E.encode_text(E.assemble_prompt(0, bank, tok, text1), text1).data)

    twin = E.TextEncoder(text1.token_table, text1.projection, [text1.templates[0]] * 2)
    np.testing.assert_allclose(E.text_prototype(0, bank, tok, twin).data, one, atol=1e-15)

    tpls = [np.zeros((0, text1.d_tok))] + [rng.normal(size=(1, text1.d_tok)) for _ in range(2)]
    three = E.TextEncoder(text1.token_table, text1.projection, tpls)
    base = E.assemble_prompt(0, bank, tok, three).data
    brute = np.mean([E.encode_text(np.concatenate([base, t]), three).data for t in tpls], axis=0)
    assert np.abs(E.text_prototype(0, bank, tok, three).data - brute).max() < 1e-12

    with pytest.raises(ContractError):
        E.text_prototype(0, bank, tok, E.TextEncoder(text1.token_table, text1.projection, []))


@pytest.mark.parametrize("k", [1, 3])
def test_batched_text_prototypes(rng, k):
    text = text_encoder(rng, k=k)
    bank = E.PromptBank(1, 2, text.d_tok)
    names = {c: tuple(rng.choice(12, 3, replace=False)) for c in range(4)}
    for c in names:
        bank.register(c, rng)
    got = E.text_prototypes([2, 0, 3], bank, names, text).data
    ref = np.stack([E.text_prototype(c, bank, names[c], text).data for c in (2, 0, 3)])
    np.testing.assert_allclose(got, ref, atol=1e-14)


def test_prompt_gradients_fd_and_frozen_tower(rng):
    text = text_encoder(rng)
    bank = E.PromptBank(2, 2, text.d_tok)
    bank.register(0, rng)
    target = rng.normal(size=text.d_t)
    f = lambda: nx.sum_(nx.mul(Tensor(target), E.text_prototype(0, bank, (1, 2, 3), text)))  # noqa: E731
    assert check(f, [bank.prefix[0], bank.suffix[0]]) < 1e-4
    assert text.token_table.grad is None and text.projection.grad is None


def test_prototype_store(rng):
    store = E.PrototypeStore(3)
    store.add_block([0, 1], rng.normal(size=(2, 3)), trainable=True)
    store.add_block([5], rng.normal(size=(1, 3)), trainable=False)
    assert store.classes == [0, 1, 5] and store.sessions == [1, 1, 2]
    assert store.visual().shape == (3, 3)
    with pytest.raises(ContractError):
        store.add_block([7], np.zeros((2, 3)), trainable=False)
    with pytest.raises(ContractError):
        E.PrototypeStore(3).visual()


# ----------------------------------------------------------------- cutmix


def brute_rectangles(H, W):
    """Every axis-aligned rectangle on the grid, as (area, top, left, h, w)."""
    for top, left in itertools.product(range(H), range(W)):
        for h, w in itertools.product(range(1, H - top + 1), range(1, W - left + 1)):
            yield h * w, top, left, h, w


def test_feasible_areas_6x6():
    areas = {a for a, *_ in brute_rectangles(6, 6) if 0.4 <= a / 36 <= 0.6}
    assert areas == {15, 16, 18, 20}  # 17, 19 and 21 have no admissible rectangle
    assert areas <= set(range(15, 22))
    assert {h * w for h, w in E.feasible_shapes(6, 6)} == areas
    assert 12 / 36 < 0.4 and (3, 4) not in E.feasible_shapes(6, 6)


def test_cutmix_identical_inputs(rng):
    x = rng.normal(size=(6, 6, 3))
    mixed, _ = E.cutmix(x, x.copy(), rng)
    np.testing.assert_array_equal(mixed, x)


def test_cutmix_mask_is_rectangle_and_mixes(rng):
    xi, xj = np.ones((6, 6, 2)), np.zeros((6, 6, 2))
    for _ in range(200):
        mixed, M = E.cutmix(xi, xj, rng)
        rows, cols = np.flatnonzero(M.any(axis=1)), np.flatnonzero(M.any(axis=0))
        assert M[rows.min():rows.max() + 1, cols.min():cols.max() + 1].all()
        assert M.sum() == len(rows) * len(cols)
        np.testing.assert_array_equal(mixed[..., 0], M.astype(float))


def test_cutmix_ratio_over_10000_draws():
    masks = E.sample_masks(np.random.default_rng(7), 10_000, 6, 6)
    ratio = masks.sum(axis=(1, 2)) / 36
    assert ratio.min() >= 0.4 and ratio.max() <= 0.6
    assert set(masks.sum(axis=(1, 2))) <= {15, 16, 18, 20}


def test_cutmix_infeasible_grid():
    with pytest.raises(ConfigError):
        E.feasible_shapes(2, 2, ratio=(0.3, 0.45))
    with pytest.raises(ContractError):
        E.cutmix(np.zeros((2, 2, 1)), np.zeros((2, 3, 1)), np.random.default_rng())


@given(st.integers(2, 9), st.integers(2, 9))
def test_feasible_shapes_match_enumeration(H, W):
    want = sorted({(h, w) for _, _, _, h, w in brute_rectangles(H, W) if 0.4 <= h * w / (H * W) <= 0.6})
    if not want:
        with pytest.raises(ConfigError):
            E.feasible_shapes(H, W)
    else:
        assert sorted(E.feasible_shapes(H, W)) == want
