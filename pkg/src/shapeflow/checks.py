"""Self-contained verification suite behind the ``check`` CLI command.

Every differentiable op is finite-difference checked at h=1e-5 against a
1e-4 relative-error bound, an end-to-end two-block generator is checked
the same way, and the structural identities the architecture promises
(latent layout, guidance algebra, conditioning reductions, codec and
patch round trips, sampler oracle) are asserted exactly. All checks are
seeded; a clean run exits 0 in well under two minutes.
"""

from __future__ import annotations

import time
import traceback
from dataclasses import replace
from typing import Callable, List, Tuple

import numpy as np

from . import autodiff as ad
from . import flow
from .conditioning import ConditioningBundle, null_bundle, pad_and_place
from .config import RunConfig
from .dit import init_dit_params, u_theta
from .encoders import EncoderStack
from .training import assemble_bundle, build_model, encode_conditioning

GRAD_TOL = 1e-4
FD_STEP = 1e-5

_CHECKS: List[Tuple[str, Callable[[], None]]] = []


def _check(name: str):
    def register(fn):
        _CHECKS.append((name, fn))
        return fn

    return register


def _expect(condition: bool, message: str) -> None:
    if not condition:
        raise AssertionError(message)


# --- gradients of every differentiable op -------------------------------------


def _op_cases():
    """(name, objective builder) for each op; builders close over parameters."""
    rng = np.random.default_rng(7)

    def p(*shape):
        return ad.parameter(rng.standard_normal(shape))

    a34, b34 = p(3, 4), p(3, 4)
    row = p(1, 4)
    pos = ad.parameter(np.abs(rng.standard_normal((3, 4))) + 0.5)
    m23, m34 = p(2, 3), p(3, 4)
    t234 = p(2, 3, 4)
    gain, bias = p(4), p(4)
    q, k, v = p(5, 8), p(6, 8), p(6, 8)
    x25, w53, b3 = p(2, 5), p(5, 3), p(3)

    def objective(build):
        def run():
            return ad.tensor_sum(build())

        return run

    return [
        ("add", {"a": a34, "b": b34}, objective(lambda: ad.add(a34, b34))),
        ("add broadcast", {"a": a34, "r": row}, objective(lambda: ad.add(a34, row))),
        ("sub", {"a": a34, "b": b34}, objective(lambda: ad.sub(a34, b34))),
        ("mul", {"a": a34, "b": b34}, objective(lambda: ad.mul(a34, b34))),
        ("neg", {"a": a34}, objective(lambda: ad.neg(a34))),
        ("exp", {"a": a34}, objective(lambda: ad.exp(ad.mul(a34, 0.3)))),
        ("log", {"p": pos}, objective(lambda: ad.log(pos))),
        ("matmul", {"a": m23, "b": m34}, objective(lambda: ad.matmul(m23, m34))),
        ("transpose", {"a": m23}, objective(lambda: ad.mul(ad.transpose(m23), ad.transpose(m23)))),
        (
            "permute_axes",
            {"t": t234},
            objective(lambda: ad.mul(ad.permute_axes(t234, (2, 0, 1)), 1.5)),
        ),
        ("reshape", {"t": t234}, objective(lambda: ad.mul(ad.reshape(t234, (6, 4)), 0.5))),
        ("concat", {"a": a34, "b": b34}, objective(lambda: ad.mul(ad.concat([a34, b34]), 0.7))),
        ("slice_axis0", {"t": t234}, objective(lambda: ad.slice_axis0(t234, 0, 1))),
        ("tensor_sum", {"a": a34}, lambda: ad.tensor_sum(a34)),
        ("tensor_mean", {"a": a34}, lambda: ad.tensor_mean(ad.mul(a34, a34))),
        ("gelu", {"a": a34}, objective(lambda: ad.gelu(a34))),
        ("softmax", {"a": a34}, objective(lambda: ad.mul(ad.softmax(a34), b34))),
        ("layer_norm", {"a": a34, "g": gain, "b": bias}, objective(lambda: ad.layer_norm(a34, gain, bias))),
        (
            "scaled_dot_attention",
            {"q": q, "k": k, "v": v},
            objective(lambda: ad.scaled_dot_attention(q, k, v, heads=2)),
        ),
        ("linear", {"x": x25, "w": w53, "b": b3}, objective(lambda: ad.linear(x25, w53, b3))),
    ]


@_check("op gradients vs central differences")
def check_op_gradients():
    worst_name, worst = "", 0.0
    for name, params, objective in _op_cases():
        err = ad.grad_check_params(objective, params, h=FD_STEP)
        if err > worst:
            worst_name, worst = name, err
        _expect(err <= GRAD_TOL, f"{name}: max relative error {err:.3e} > {GRAD_TOL}")
    print(f"      worst op {worst_name!r}: {worst:.2e}", flush=True)


def _tiny_parts():
    cfg = RunConfig(frames=4, depth=2, d_model=16, heads=2, d_time=8, ffn_mult=2, batch_size=2)
    return build_model(cfg)


def _demo_inputs(parts):
    spec_prompt = parts.vocab.encode("red circle moves right")
    from .synthdata import SubjectSpec, make_references

    specs = [SubjectSpec("circle", "red", 4.5, (1.0, 0.0), (12.0, 16.0))]
    refs = make_references(specs, parts.run.ref_size, np.random.default_rng(3), augment=True)
    return spec_prompt, refs


@_check("end-to-end two-block gradients")
def check_end_to_end_gradients():
    parts = _tiny_parts()
    # make the zero-init tails lively so the check exercises real paths
    rng = np.random.default_rng(11)
    for name, tensor in parts.trainables().items():
        if not tensor.data.any():
            tensor.data[...] = 0.3 * rng.standard_normal(tensor.data.shape)
    prompt, refs = _demo_inputs(parts)
    enc = encode_conditioning(parts, prompt, refs)
    z_t = rng.standard_normal((parts.run.frames, 48, 8, 8))
    z0 = rng.standard_normal(z_t.shape)

    def objective():
        bundle = assemble_bundle(parts, enc)
        v = u_theta(z_t, 0.37, bundle, parts.params, parts.dit)
        return flow.fm_loss(v, flow.velocity_target(z0, z_t))

    err = ad.grad_check_params(
        objective, parts.trainables(), h=FD_STEP, max_coords=2, rng=np.random.default_rng(0)
    )
    _expect(err <= GRAD_TOL, f"end-to-end max relative error {err:.3e} > {GRAD_TOL}")
    print(f"      max relative error {err:.2e}", flush=True)


# --- exact structural identities ----------------------------------------------


@_check("guidance algebra")
def check_guidance_algebra():
    out = flow.cfg_combine(np.array([1.0]), np.array([2.0]), 5.0)
    _expect(out[0] == 6.0, f"cfg_combine(1, 2, 5) = {out[0]}, want 6")
    rng = np.random.default_rng(0)
    u, c = rng.standard_normal(8) * 1e12, rng.standard_normal(8)
    _expect(np.array_equal(flow.cfg_combine(u, c, 1.0), c), "scale 1 must return cond bitwise")
    _expect(np.allclose(flow.cfg_combine(u, c, 0.0), u), "scale 0 must return uncond")


@_check("point-mass sampler oracle")
def check_point_mass():
    cfg = flow.SamplerConfig(steps=50, guidance_scale=1.0)
    for seed in (0, 1, 2):
        out = flow.sample(
            lambda z, t, b: z / t, None, None, cfg, np.random.default_rng(seed), (4, 4)
        )
        _expect(np.max(np.abs(out)) <= 1e-3, f"sampler landed {np.max(np.abs(out)):.2e} from origin")


@_check("padded latent structure")
def check_padded_latent():
    rng = np.random.default_rng(1)
    t_frames, k, cz, hh = 4, 2, 6, 3
    x_t = rng.standard_normal((t_frames, cz, hh, hh))
    refs = [rng.standard_normal((cz, hh, hh)) for _ in range(k)]
    mask = np.ones((k, 1, hh, hh))
    padded = pad_and_place(x_t, refs, mask)
    _expect(padded.n_slots == 6, f"expected 6 slots, got {padded.n_slots}")
    _expect(
        np.array_equal(padded.x_tilde[:t_frames, :cz], x_t), "video channels must hold x_t bitwise"
    )
    _expect(
        not padded.x_tilde[:t_frames, cz : 2 * cz].any(), "reference channels leak outside slots"
    )
    _expect(padded.x_tilde[:, 2 * cz].sum() == k * hh * hh, "mask channel sum must be K*H'*W'")


@_check("conditioning reductions")
def check_conditioning_reductions():
    parts = _tiny_parts()
    rng = np.random.default_rng(5)
    for name, tensor in parts.trainables().items():
        if not tensor.data.any():
            tensor.data[...] = 0.3 * rng.standard_normal(tensor.data.shape)
    prompt, refs = _demo_inputs(parts)
    enc = encode_conditioning(parts, prompt, refs)
    bundle = assemble_bundle(parts, enc)
    z_t = rng.standard_normal((parts.run.frames, 48, 8, 8))

    # zeroed conditioning V projections collapse to the bare backbone
    for i in range(parts.dit.depth):
        for stream in ("joint", "clip"):
            parts.params[f"b{i}.{stream}.wv"].data[...] = 0.0
    with_cross = u_theta(z_t, 0.5, bundle, parts.params, parts.dit).data
    backbone = u_theta(z_t, 0.5, bundle, parts.params, parts.dit, include_cross=False).data
    _expect(np.array_equal(with_cross, backbone), "zeroed V projections must match the backbone")

    # gamma = 0 removes the identity stream exactly
    parts2 = _tiny_parts()
    enc2 = encode_conditioning(parts2, prompt, refs)
    bundle2 = assemble_bundle(parts2, enc2)
    gamma0 = replace(parts2.dit, gamma=0.0)
    dropped = ConditioningBundle(
        c_joint=bundle2.c_joint,
        c_clip=np.zeros((0, parts2.run.d_cond)),
        c_vae=bundle2.c_vae,
        m_ref=bundle2.m_ref,
        k_refs=bundle2.k_refs,
    )
    a = u_theta(z_t, 0.5, bundle2, parts2.params, gamma0).data
    b = u_theta(z_t, 0.5, dropped, parts2.params, gamma0).data
    _expect(np.array_equal(a, b), "gamma=0 must remove the identity stream exactly")


@_check("codec and null-bundle round trips")
def check_codec_round_trip():
    parts = _tiny_parts()
    rng = np.random.default_rng(9)
    video = rng.standard_normal((3, 3, 32, 32))
    back = parts.stack.vae_decode(parts.stack.vae_encode(video))
    _expect(np.max(np.abs(back - video)) <= 1e-10, "codec round trip exceeded 1e-10")

    nb = null_bundle(parts.params["null.joint"], parts.params["null.clip"])
    z_t = rng.standard_normal((parts.run.frames, 48, 8, 8))
    out = u_theta(z_t, 0.25, nb, parts.params, parts.dit)
    _expect(out.shape == z_t.shape, "null-conditioned forward must preserve video shape")


@_check("training loss at zero init")
def check_zero_init_loss():
    parts = _tiny_parts()
    prompt, refs = _demo_inputs(parts)
    enc = encode_conditioning(parts, prompt, refs)
    rng = np.random.default_rng(13)
    z0 = rng.standard_normal((parts.run.frames, 48, 8, 8))
    eps = rng.standard_normal(z0.shape)
    bundle = assemble_bundle(parts, enc)
    z_t = flow.forward_diffuse(z0, eps, 0.6)
    v = u_theta(z_t, 0.6, bundle, parts.params, parts.dit)
    loss = flow.fm_loss(v, flow.velocity_target(z0, eps))
    expected = float(np.mean((eps - z0) ** 2))
    _expect(
        abs(float(loss.data) - expected) < 1e-12,
        "zero-init loss must equal mean squared target",
    )


def run_checks(verbose: bool = True) -> bool:
    """Run every registered check; True when all pass."""
    all_ok = True
    for name, fn in _CHECKS:
        began = time.perf_counter()
        try:
            fn()
        except Exception:
            all_ok = False
            print(f"FAIL  {name}")
            traceback.print_exc()
            continue
        if verbose:
            print(f"PASS  {name} ({time.perf_counter() - began:.2f}s)", flush=True)
    return all_ok


def main() -> int:
    return 0 if run_checks() else 1
