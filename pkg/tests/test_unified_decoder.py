import numpy as np
import pytest
import torch

from cisformer.config import DecoderConfig
from cisformer.decoder import (CrossAttentionLayer, DecoderStage, InvalidDecoderConfig, UnifiedDecoder, decode,
                               prepare_scale_features)
from cisformer.layers import MultiHeadAttention, sine_encode_map, zero_module
from cisformer.queries import QuerySet

from oracles import attention_loop, central_difference

D, H = 8, 2


def _feats(scales=(4, 3, 2), b=1, dtype=torch.float64):
    sizes = {1: 8, 2: 6, 3: 3, 4: 2}
    return ({s: torch.randn(b, D, sizes[s], sizes[s], dtype=dtype) for s in scales},
            {s: torch.randn(b, D, sizes[s], sizes[s], dtype=dtype) for s in scales})


def _queries(n=5, b=1, role="mask", dtype=torch.float64):
    return QuerySet(torch.randn(b, n, D, dtype=dtype), torch.randn(b, n, D, dtype=dtype), role)


def _decoder(strategy="composed", scales=(4, 3, 2)):
    return UnifiedDecoder(D, DecoderConfig(scales=list(scales), update_strategy=strategy, num_heads=H,
                                           ffn_dim=16)).double()


def _record_all(module):
    attns = [m for m in module.modules() if isinstance(m, MultiHeadAttention)]
    for a in attns:
        a.record = True
    return attns


# -- feature preparation --------------------------------------------------------

def test_prepare_zero_feature_zero_bias_zero_embedding():
    conv = torch.nn.Conv2d(D, D, 1)
    torch.nn.init.zeros_(conv.bias)
    out = prepare_scale_features(torch.zeros(1, D, 3, 4), conv, torch.zeros(D))
    assert torch.equal(out, torch.zeros(1, 12, D))


@pytest.mark.parametrize("h,w", [(1, 1), (3, 5), (6, 2)])
def test_prepare_token_count(h, w):
    out = prepare_scale_features(torch.randn(2, D, h, w), torch.nn.Conv2d(D, D, 1), torch.randn(D))
    assert out.shape == (2, h * w, D)


def test_prepare_matches_loop_oracle():
    conv = torch.nn.Conv2d(D, D, 1).double()
    x = torch.randn(1, D, 3, 4, dtype=torch.float64)
    emb = torch.randn(D, dtype=torch.float64)
    out = prepare_scale_features(x, conv, emb)[0].detach().numpy()
    wmat, bias = conv.weight[:, :, 0, 0].detach().numpy(), conv.bias.detach().numpy()
    xs = x[0].numpy()
    ref = np.array([wmat @ xs[:, i, j] + bias + emb.numpy() for i in range(3) for j in range(4)])
    np.testing.assert_allclose(out, ref, atol=1e-6)


# -- attention pieces -----------------------------------------------------------

def test_multihead_attention_matches_dense_oracle():
    attn = MultiHeadAttention(D, H).double()
    q, k = torch.randn(1, 4, D, dtype=torch.float64), torch.randn(1, 9, D, dtype=torch.float64)
    out = attn(q, k, k)[0].detach().numpy()
    lin = lambda layer, x: x @ layer.weight.detach().numpy().T + layer.bias.detach().numpy()
    heads = attention_loop(lin(attn.q_proj, q[0].numpy()), lin(attn.k_proj, k[0].numpy()),
                           lin(attn.v_proj, k[0].numpy()), H)
    np.testing.assert_allclose(out, lin(attn.out_proj, heads), atol=1e-6)


def test_single_token_attention_reads_value():
    attn = MultiHeadAttention(D, H).double()
    with torch.no_grad():
        for lin in (attn.v_proj, attn.out_proj):
            lin.weight.copy_(torch.eye(D)); lin.bias.zero_()
    v = torch.randn(1, 1, D, dtype=torch.float64)
    out = attn(torch.randn(1, 6, D, dtype=torch.float64), v, v)
    assert torch.equal(out, v.expand(1, 6, D))


@pytest.mark.parametrize("which", ["mask", "boundary"])
def test_cross_attention_residual_identity(which):
    stage = DecoderStage(D, DecoderConfig(num_heads=H, ffn_dim=16)).double()
    layers = stage.mask_ca if which == "mask" else stage.boundary_ca
    assert len(layers) == (2 if which == "mask" else 1)
    for layer in layers:
        zero_module(layer.attn.out_proj)
    q = _queries()
    tokens = torch.randn(1, 9, D, dtype=torch.float64)
    fn = stage.mask_cross_attention if which == "mask" else stage.boundary_cross_attention
    assert torch.equal(fn(q, tokens, torch.zeros_like(tokens)).embeddings, q.embeddings)


def test_cross_attention_layer_matches_dense_oracle():
    layer = CrossAttentionLayer(D, H).double()
    q, pos = torch.randn(1, 4, D, dtype=torch.float64), torch.randn(1, 4, D, dtype=torch.float64)
    tok, tpos = torch.randn(1, 9, D, dtype=torch.float64), torch.randn(1, 9, D, dtype=torch.float64)
    out = layer(q, pos, tok, tpos)[0].detach().numpy()
    a = layer.attn
    lin = lambda l, x: x @ l.weight.detach().numpy().T + l.bias.detach().numpy()
    qn = layer.norm(q)[0].detach().numpy() + pos[0].numpy()
    heads = attention_loop(lin(a.q_proj, qn), lin(a.k_proj, (tok + tpos)[0].numpy()), lin(a.v_proj, tok[0].numpy()), H)
    np.testing.assert_allclose(out, q[0].numpy() + lin(a.out_proj, heads), atol=1e-6)


def test_compose_identity_when_boundary_zero_and_projections_zeroed():
    stage = DecoderStage(D, DecoderConfig(num_heads=H, ffn_dim=16)).double()
    zero_module(stage.refine.attn.out_proj)
    zero_module(stage.refine.ffn.fc2)
    qm = _queries()
    qb = qm.replace(torch.zeros_like(qm.embeddings))
    assert torch.equal(stage.compose_and_refine(qm, qb).embeddings, qm.embeddings)


def test_compose_is_symmetric():
    stage = DecoderStage(D, DecoderConfig(num_heads=H, ffn_dim=16)).double()
    a, b = _queries(), _queries()
    assert torch.equal(stage.compose_and_refine(a, b).embeddings, stage.compose_and_refine(b, a).embeddings)


def test_compose_permutation_equivariant():
    stage = DecoderStage(D, DecoderConfig(num_heads=H, ffn_dim=16)).double()
    a, b = _queries(7), _queries(7)
    base = stage.compose_and_refine(a, b).embeddings
    for seed in range(5):
        perm = torch.randperm(7, generator=torch.Generator().manual_seed(seed))
        out = stage.compose_and_refine(a.replace(a.embeddings[:, perm]), b.replace(b.embeddings[:, perm]))
        assert torch.allclose(out.embeddings, base[:, perm], atol=1e-12)


# -- full decoder ---------------------------------------------------------------

def test_one_scale_one_stage():
    dec = _decoder(scales=(3,))
    xm, xb = _feats((3,))
    assert len(decode(dec, (xm, xb), _queries(), _queries(role="boundary"))) == 1


def test_empty_scales_rejected():
    with pytest.raises(InvalidDecoderConfig):
        UnifiedDecoder(D, DecoderConfig(scales=[]))


@pytest.mark.parametrize("strategy", ["composed", "separation", "sharing"])
def test_stage_outputs_keep_query_shape(strategy):
    dec = _decoder(strategy)
    xm, xb = _feats(b=2)
    outs = dec(xm, xb, _queries(b=2), _queries(b=2, role="boundary"))
    assert [o.scale_index for o in outs] == [4, 3, 2]
    for o in outs:
        for qs in (o.composed, o.refined_mask, o.refined_boundary):
            assert qs.embeddings.shape == (2, 5, D)


@pytest.mark.parametrize("strategy", ["composed", "separation", "sharing"])
def test_attention_rows_sum_to_one(strategy):
    dec = _decoder(strategy)
    attns = _record_all(dec)
    xm, xb = _feats()
    dec(xm, xb, _queries(), _queries(role="boundary"))
    for a in attns:
        s = a.last_attention.sum(-1)
        assert torch.allclose(s, torch.ones_like(s), atol=1e-6)


@pytest.mark.parametrize("strategy", ["composed", "separation", "sharing"])
def test_decoder_permutation_equivariant(strategy):
    dec = _decoder(strategy)
    xm, xb = _feats()
    qm, qb = _queries(6), _queries(6, role="boundary")
    base = dec(xm, xb, qm, qb)
    perm = torch.tensor([3, 0, 5, 1, 4, 2])

    def p(q):
        return QuerySet(q.embeddings[:, perm], q.positions[:, perm], q.role)

    out = dec(xm, xb, p(qm), p(qb))
    for a, b in zip(base, out):
        assert torch.allclose(b.composed.embeddings, a.composed.embeddings[:, perm], atol=1e-6)
        assert torch.allclose(b.refined_boundary.embeddings, a.refined_boundary.embeddings[:, perm], atol=1e-6)


def test_composed_propagation_rule():
    """Next mask queries = composed output; next boundary queries = raw boundary cross-attention output."""
    dec = _decoder("composed", scales=(4, 3))
    xm, xb = _feats((4, 3))
    qm, qb = _queries(), _queries(role="boundary")
    outs = dec(xm, xb, qm, qb)
    s1 = dec.stages[1]
    tok_pos = sine_encode_map(3, 3, D, torch.float64).unsqueeze(0)
    xm_t = prepare_scale_features(xm[3], s1.mask_proj, s1.mask_level_embed)
    xb_t = prepare_scale_features(xb[3], s1.boundary_proj, s1.boundary_level_embed)
    qm1 = QuerySet(outs[0].composed.embeddings, qm.positions, "mask")
    qb1 = QuerySet(outs[0].refined_boundary.embeddings, qb.positions, "boundary")
    m = s1.mask_cross_attention(qm1, xm_t, tok_pos)
    b = s1.boundary_cross_attention(qb1, xb_t, tok_pos)
    assert torch.allclose(s1.compose_and_refine(m, b).embeddings, outs[1].composed.embeddings, atol=1e-12)


def test_separation_streams_never_mix():
    dec = _decoder("separation")
    xm, xb = _feats()
    qm, qb = _queries(), _queries(role="boundary")
    base = dec(xm, xb, qm, qb)
    # perturbing the boundary stream must leave the mask stream untouched
    qb2 = qb.replace(qb.embeddings + 1.0)
    xb2 = {k: v + 1.0 for k, v in xb.items()}
    out = dec(xm, xb2, qm, qb2)
    for a, b in zip(base, out):
        assert torch.equal(a.composed.embeddings, b.composed.embeddings)
        assert not torch.allclose(a.refined_boundary.embeddings, b.refined_boundary.embeddings)
        assert a.composed.role == "mask"


def test_sharing_continues_from_one_query_set():
    dec = _decoder("sharing", scales=(4, 3))
    xm, xb = _feats((4, 3))
    qm = _queries()
    outs = dec(xm, xb, qm, QuerySet(qm.embeddings, qm.positions, "boundary"))
    s1 = dec.stages[1]
    tok_pos = sine_encode_map(3, 3, D, torch.float64).unsqueeze(0)
    shared = outs[0].composed.embeddings
    qb_next = s1.boundary_cross_attention(QuerySet(shared, qm.positions, "boundary"),
                                          prepare_scale_features(xb[3], s1.boundary_proj, s1.boundary_level_embed),
                                          tok_pos)
    assert torch.allclose(outs[1].refined_boundary.embeddings, qb_next.embeddings, atol=1e-12)


def test_decoder_gradient_wrt_initial_queries():
    dec = _decoder()
    xm, xb = _feats()
    emb = torch.randn(1, 4, D, dtype=torch.float64, requires_grad=True)
    pos = torch.randn(1, 4, D, dtype=torch.float64)
    qb = _queries(4, role="boundary")
    readout = torch.randn(1, 4, D, dtype=torch.float64)

    def f():
        return (dec(xm, xb, QuerySet(emb, pos, "mask"), qb)[-1].composed.embeddings * readout).sum()

    f().backward()
    for i in (0, 7, 13, 30):
        numeric = central_difference(f, emb, i)
        assert abs(emb.grad.view(-1)[i].item() - numeric) <= 1e-4 * max(abs(numeric), 1e-3)
