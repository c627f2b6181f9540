"""Toy latent video denoiser with trainable audio cross-attention.

Block order: spatial self-attention + MLP, image/text cross-attention,
audio cross-attention (trainable, zero-initialized output), temporal
self-attention. Everything except the audio cross-attention, the feature
projections and the audio null token is frozen.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .audiofront import (ENCODER_IDS, AudioTokenSequence, FeatureProjections, FeatureTapConfig,
                         project_and_merge, tap_layout)
from .schedule import NoiseSchedule
from .tensorcore import Parameter, Tensor
from .windowcond import AttentionMask, WindowSpec, build_source_masks, frame_timestamps

PATCH = 8
FRAME_SIZE = 32
LOW_FREQ = 4
LATENT_CH = LOW_FREQ * LOW_FREQ
LATENT_SCALE = 2.0
D_ENC = 32


class ModelConfigError(ValueError):
    pass


class ConditionError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int = 4
    d_model: int = 64
    n_heads: int = 4
    S: int = 16
    K: int = 12
    fps: float = 6.0
    n_classes: int = 4
    audio_heads: int = 2
    audio_width: int = 32
    taps: tuple[FeatureTapConfig, ...] = (FeatureTapConfig("semantic"), FeatureTapConfig("masked-pred"))
    window: WindowSpec = field(default_factory=WindowSpec)
    use_chunk_mask: bool = False
    sigma_data: float = 0.5
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ModelConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.audio_width % self.audio_heads:
            raise ModelConfigError(f"audio_width={self.audio_width} not divisible by audio_heads={self.audio_heads}")
        if self.S != (FRAME_SIZE // PATCH) ** 2:
            raise ModelConfigError(f"S must be {(FRAME_SIZE // PATCH) ** 2} for {FRAME_SIZE}px frames")
        if self.n_blocks < 1 or self.K < 1:
            raise ModelConfigError("n_blocks and K must be positive")
        encs = [t.encoder_id for t in self.taps]
        if len(set(encs)) != len(encs):
            raise ModelConfigError("one tap config per encoder")
        object.__setattr__(self, "taps", tuple(self.taps))

    @property
    def sources(self) -> list[tuple[str, int]]:
        return [(t.encoder_id, layer) for t in self.taps for layer in t.tap_layers]


@dataclass
class ParameterPartition:
    trainable_names: list[str]
    frozen_names: list[str]
    trainable_count: int
    total_count: int

    @property
    def trainable_fraction(self) -> float:
        return self.trainable_count / self.total_count

    def report(self) -> str:
        return (f"trainable {self.trainable_count} / {self.total_count} parameters "
                f"({self.trainable_fraction:.3f})")


@dataclass
class ConditionBundle:
    """Conditions for a batch of B clips.

    ``audio`` holds projected tokens [B, T, d]; ``audio_mask`` is the
    [K, T] window mask shared by the batch. Null flags are boolean
    arrays of length B.
    """

    image_latent: np.ndarray | None  # [B, S, c]
    class_ids: np.ndarray | None  # [B]
    audio: AudioTokenSequence | None
    audio_mask: AttentionMask | None
    null_image: np.ndarray
    null_text: np.ndarray
    null_audio: np.ndarray

    @property
    def batch(self) -> int:
        return len(self.null_image)


# -- latent codec --------------------------------------------------------


def _codec_matrix() -> np.ndarray:
    """[64, 16] map from an 8x8 pixel patch to its 4x4 lowest DCT-II frequencies."""
    n = np.arange(PATCH)
    basis = np.cos(np.pi * (2 * n[None, :] + 1) * n[:, None] / (2 * PATCH))
    basis[0] *= np.sqrt(1.0 / PATCH)
    basis[1:] *= np.sqrt(2.0 / PATCH)
    low = basis[:LOW_FREQ]  # [4, 8]
    return np.einsum("uy,vx->yxuv", low, low).reshape(PATCH * PATCH, LATENT_CH) / LATENT_SCALE


_CODEC = _codec_matrix()
# decoder: least-squares inverse of the encoder (drops the discarded frequencies)
_DECODER = np.linalg.pinv(_CODEC)


def frames_to_latent(frames: np.ndarray) -> np.ndarray:
    """[..., 32, 32] pixels in [0, 1] -> [..., 16, 16] latent tokens."""
    lead = frames.shape[:-2]
    g = FRAME_SIZE // PATCH
    x = (np.asarray(frames, dtype=np.float64) - 0.5) * 2.0
    x = x.reshape(*lead, g, PATCH, g, PATCH)
    x = np.moveaxis(x, -3, -2).reshape(*lead, g * g, PATCH * PATCH)
    return x @ _CODEC


def latent_to_frames(latent: np.ndarray) -> np.ndarray:
    lead = latent.shape[:-2]
    g = FRAME_SIZE // PATCH
    x = np.asarray(latent) @ _DECODER
    x = x.reshape(*lead, g, g, PATCH, PATCH)
    x = np.moveaxis(x, -3, -2).reshape(*lead, FRAME_SIZE, FRAME_SIZE)
    return np.clip(x / 2.0 + 0.5, 0.0, 1.0)


# -- embeddings ----------------------------------------------------------


def sinusoidal(x: np.ndarray, dim: int, min_period: float, max_period: float) -> np.ndarray:
    half = dim // 2
    periods = np.geomspace(min_period, max_period, half)
    ang = 2 * np.pi * np.asarray(x, dtype=np.float64)[..., None] / periods
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def step_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    return sinusoidal(np.asarray(t, dtype=np.float64), dim, 4.0, 4000.0)


def time_embedding(seconds: np.ndarray, dim: int) -> np.ndarray:
    """Fixed encoding of absolute clip time; dot products depend on time differences."""
    return sinusoidal(seconds, dim, 0.15, 6.0) / np.sqrt(dim / 2)


# -- model ---------------------------------------------------------------


class Denoiser:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self.params: dict[str, Parameter] = {}
        self.use_audio = True
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD1]))
        d, c, S, K = cfg.d_model, LATENT_CH, cfg.S, cfg.K

        def frozen(name, arr):
            self.params[name] = Parameter(arr, name, trainable=False)
            return self.params[name]

        def trainable(name, arr):
            self.params[name] = Parameter(arr, name, trainable=True)
            return self.params[name]

        def glorot(n_in, n_out, gain=1.0):
            return rng.normal(0, gain / np.sqrt(n_in), (n_in, n_out))

        frozen("vae.codec", _CODEC.copy())
        frozen("fuse.w", glorot(2 * c, d))
        frozen("fuse.b", np.zeros(d))
        frozen("pos.spatial", rng.normal(0, 0.1, (S, d)))
        frozen("pos.temporal", rng.normal(0, 0.1, (K, d)))
        frozen("temb.w1", glorot(d, d))
        frozen("temb.b1", np.zeros(d))
        frozen("temb.w2", glorot(d, d, 0.5))
        frozen("temb.b2", np.zeros(d))
        frozen("cond.image_w", glorot(c, d))
        frozen("cond.image_pos", rng.normal(0, 0.1, (S, d)))
        frozen("cond.text_table", rng.normal(0, 1.0, (cfg.n_classes, d)))
        frozen("cond.image_null", rng.normal(0, 1.0, (1, d)))
        frozen("cond.text_null", rng.normal(0, 1.0, (1, d)))
        for b in range(cfg.n_blocks):
            pre = f"block{b}"
            for part in ("sa", "ca", "ta"):
                frozen(f"{pre}.{part}.ln_g", np.ones(d))
                frozen(f"{pre}.{part}.ln_b", np.zeros(d))
                for w in ("wq", "wk", "wv"):
                    frozen(f"{pre}.{part}.{w}", glorot(d, d))
                frozen(f"{pre}.{part}.wo", glorot(d, d, 0.5))
            frozen(f"{pre}.mlp.ln_g", np.ones(d))
            frozen(f"{pre}.mlp.ln_b", np.zeros(d))
            frozen(f"{pre}.mlp.w1", glorot(d, 2 * d))
            frozen(f"{pre}.mlp.b1", np.zeros(2 * d))
            frozen(f"{pre}.mlp.w2", glorot(2 * d, d, 0.5))
            frozen(f"{pre}.mlp.b2", np.zeros(d))
            ax = f"{pre}.audio_xattn"
            trainable(f"{ax}.ln_g", np.ones(d))
            trainable(f"{ax}.ln_b", np.zeros(d))
            da = cfg.audio_width
            trainable(f"{ax}.w_q", glorot(d, da))
            trainable(f"{ax}.w_k", glorot(d, da))
            trainable(f"{ax}.w_v", glorot(d, da))
            trainable(f"{ax}.w_o", np.zeros((da, d)))
        frozen("head.ln_g", np.ones(d))
        frozen("head.ln_b", np.zeros(d))
        frozen("head.w", glorot(d, c))
        frozen("head.b", np.zeros(c))

        self.projections = FeatureProjections(cfg.sources, D_ENC, d, rng)
        for p in self.projections.parameters():
            self.params[p.name] = p
        trainable("audio_proj.null", rng.normal(0, 1.0, (1, d)))

        self.timeline = frame_timestamps(K, cfg.fps)
        self._layout = None
        self._frame_te = time_embedding(self.timeline.frame_times, d)

    # -- bookkeeping ------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    def partition(self) -> ParameterPartition:
        tr = [n for n, p in self.params.items() if p.trainable]
        fr = [n for n, p in self.params.items() if not p.trainable]
        from .audiofront import get_encoder
        enc_params = [p for t in self.cfg.taps for p in get_encoder(t.encoder_id, D_ENC).parameters()]
        n_tr = sum(self.params[n].data.size for n in tr)
        n_fr = sum(self.params[n].data.size for n in fr) + sum(p.data.size for p in enc_params)
        return ParameterPartition(tr, fr + [p.name for p in enc_params], n_tr, n_tr + n_fr)

    def state_hash(self, trainable: bool | None = None) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            p = self.params[name]
            if trainable is None or p.trainable == trainable:
                h.update(name.encode())
                h.update(p.data.tobytes())
        return h.hexdigest()

    def set_base_trainable(self, flag: bool) -> None:
        """Toggle the frozen base (used only while fitting the base prior)."""
        for p in self.params.values():
            if not _is_audio_param(p.name):
                p.set_trainable(flag)

    @property
    def token_layout(self) -> list[tuple[str, int, np.ndarray]]:
        if self._layout is None:
            n_samples = int(round(self.timeline.duration * 16000))
            self._layout = tap_layout(self.cfg.taps, n_samples)
        return self._layout

    def audio_mask(self, window: WindowSpec | None = None) -> AttentionMask:
        from .windowcond import chunk_mask
        layout = self.token_layout
        if self.cfg.use_chunk_mask:
            parts = [chunk_mask(self.cfg.K, len(t)).visible for _, _, t in layout]
            return AttentionMask(np.concatenate(parts, axis=1))
        return build_source_masks(self.timeline, [t for _, _, t in layout], window or self.cfg.window)

    def project_audio(self, features: Sequence[np.ndarray]) -> AudioTokenSequence:
        """``features[i]`` is [B, T_i, d_enc] for source i of the layout."""
        maps = [(enc, layer, f, t) for (enc, layer, t), f in zip(self.token_layout, features)]
        return project_and_merge(maps, self.projections)

    # -- layers -----------------------------------------------------------

    def _attend(self, xq: Tensor, xkv: Tensor, pre: str, mask=None, q_extra=None, k_extra=None,
                names=("wq", "wk", "wv", "wo")) -> Tensor:
        P = self.params
        H = self.cfg.n_heads
        d = self.cfg.d_model
        dh = d // H
        q_in = xq if q_extra is None else tc.add(xq, q_extra)
        k_in = xkv if k_extra is None else tc.add(xkv, k_extra)
        q = tc.matmul(q_in, P[f"{pre}.{names[0]}"])
        k = tc.matmul(k_in, P[f"{pre}.{names[1]}"])
        v = tc.matmul(xkv, P[f"{pre}.{names[2]}"])
        lead_q, nq = q.shape[:-2], q.shape[-2]
        lead_k, nk = k.shape[:-2], k.shape[-2]
        nl = len(lead_q)
        perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)
        qh = tc.transpose(tc.reshape(q, lead_q + (nq, H, dh)), perm)
        kh = tc.transpose(tc.reshape(k, lead_k + (nk, H, dh)), tuple(range(len(lead_k))) + (len(lead_k) + 1, len(lead_k) + 2, len(lead_k)))
        vh = tc.transpose(tc.reshape(v, lead_k + (nk, H, dh)), tuple(range(len(lead_k))) + (len(lead_k) + 1, len(lead_k), len(lead_k) + 2))
        scores = tc.matmul(qh, kh) * (1.0 / np.sqrt(dh))
        att = tc.masked_softmax(scores, mask)
        out = tc.matmul(att, vh)
        out = tc.reshape(tc.transpose(out, perm), lead_q + (nq, d))
        return tc.matmul(out, P[f"{pre}.{names[3]}"])

    def _ln(self, x: Tensor, pre: str) -> Tensor:
        return tc.layer_norm(x, self.params[f"{pre}.ln_g"], self.params[f"{pre}.ln_b"])

    def concat_image_latent(self, noisy: Tensor, image_latent: np.ndarray, null_image: np.ndarray | None = None) -> Tensor:
        """Repeat the image latent over frames, concatenate on channels, fuse to d_model."""
        noisy = tc.as_tensor(noisy)
        img = np.asarray(image_latent, dtype=np.float64)
        if img.shape[-2] != noisy.shape[-2]:
            raise tc.DimensionError(f"image latent has {img.shape[-2]} spatial tokens, video has {noisy.shape[-2]}")
        if null_image is not None:
            img = np.where(np.asarray(null_image)[:, None, None], 0.0, img)
        rep = np.broadcast_to(img[..., None, :, :], noisy.shape[:-1] + (img.shape[-1],))
        cat = tc.concat([noisy, Tensor(rep)], axis=-1)
        return tc.linear(cat, self.params["fuse.w"], self.params["fuse.b"])

    def audio_cross_attention(self, h: Tensor, audio_tokens: Tensor, window: "AudioWindow", block: int) -> Tensor:
        """Residual audio cross-attention for one block.

        ``h`` is [B, K, S, d]; ``audio_tokens`` [B, T+1, d] with the null
        token last. Each frame's queries see only the tokens its window
        makes visible, gathered into a padded [K, W] table.
        """
        pre = f"block{block}.audio_xattn"
        P = self.params
        B, K, S, d = h.shape
        H = self.cfg.audio_heads
        dh = self.cfg.audio_width // H
        W = window.width
        x = self._ln(h, pre)
        xq = tc.add(x, Tensor(self._frame_te[None, :, None, :]))
        q = tc.matmul(xq, P[f"{pre}.w_q"])  # [B, K, S, da]
        k = tc.matmul(tc.add(audio_tokens, Tensor(window.token_te)), P[f"{pre}.w_k"])
        v = tc.matmul(audio_tokens, P[f"{pre}.w_v"])
        kg = tc.reshape(tc.gather(k, window.index.ravel(), axis=1), (B, K, W, H, dh))
        vg = tc.reshape(tc.gather(v, window.index.ravel(), axis=1), (B, K, W, H, dh))
        qh = tc.transpose(tc.reshape(q, (B, K, S, H, dh)), (0, 3, 1, 2, 4))  # [B, H, K, S, dh]
        kh = tc.transpose(kg, (0, 3, 1, 4, 2))  # [B, H, K, dh, W]
        vh = tc.transpose(vg, (0, 3, 1, 2, 4))  # [B, H, K, W, dh]
        scores = tc.matmul(qh, kh) * (1.0 / np.sqrt(dh))
        att = tc.masked_softmax(scores, window.visible[:, None, :, None, :])
        out = tc.transpose(tc.matmul(att, vh), (0, 2, 3, 1, 4))  # [B, K, S, H, dh]
        out = tc.reshape(out, (B, K, S, H * dh))
        return tc.add(h, tc.matmul(out, P[f"{pre}.w_o"]))

    def forward(self, noisy, t, cond: ConditionBundle) -> Tensor:
        cfg = self.cfg
        P = self.params
        noisy = tc.as_tensor(noisy)
        B, K, S, c = noisy.shape
        if K != cfg.K or S != cfg.S:
            raise tc.DimensionError(f"latent shape {noisy.shape} does not match config K={cfg.K}, S={cfg.S}")
        t = np.broadcast_to(np.asarray(t), (B,))
        if cond.image_latent is None and not cond.null_image.all():
            raise ConditionError("image condition missing without null flag")
        if cond.class_ids is None and not cond.null_text.all():
            raise ConditionError("text condition missing without null flag")
        if self.use_audio and cond.audio is None and not cond.null_audio.all():
            raise ConditionError("audio condition missing without null flag")

        img = cond.image_latent if cond.image_latent is not None else np.zeros((B, S, c))
        h = self.concat_image_latent(noisy, img, cond.null_image)
        h = tc.add(h, tc.add(P["pos.spatial"], tc.reshape(P["pos.temporal"], (K, 1, cfg.d_model))))

        temb = tc.silu(tc.linear(Tensor(step_embedding(t, cfg.d_model)), P["temb.w1"], P["temb.b1"]))
        temb = tc.linear(temb, P["temb.w2"], P["temb.b2"])
        temb = tc.reshape(temb, (B, 1, 1, cfg.d_model))

        img_tok = tc.add(tc.matmul(Tensor(img), P["cond.image_w"]), P["cond.image_pos"])
        img_tok = tc.select(img_tok, ~np.asarray(cond.null_image)[:, None, None], P["cond.image_null"])
        ids = np.zeros(B, dtype=int) if cond.class_ids is None else np.asarray(cond.class_ids)
        txt_tok = tc.reshape(tc.embedding(P["cond.text_table"], ids), (B, 1, cfg.d_model))
        txt_tok = tc.select(txt_tok, ~np.asarray(cond.null_text)[:, None, None], P["cond.text_null"])
        ctx = tc.concat([img_tok, txt_tok], axis=1)
        ctx = tc.reshape(ctx, (B, 1) + ctx.shape[1:])

        if self.use_audio:
            audio_tokens, audio_window = self._audio_inputs(cond, B)

        for b in range(cfg.n_blocks):
            pre = f"block{b}"
            h = tc.add(h, temb)
            x = self._ln(h, f"{pre}.sa")
            h = tc.add(h, self._attend(x, x, f"{pre}.sa"))
            x = self._ln(h, f"{pre}.mlp")
            x = tc.silu(tc.linear(x, P[f"{pre}.mlp.w1"], P[f"{pre}.mlp.b1"]))
            h = tc.add(h, tc.linear(x, P[f"{pre}.mlp.w2"], P[f"{pre}.mlp.b2"]))
            x = self._ln(h, f"{pre}.ca")
            h = tc.add(h, self._attend(x, ctx, f"{pre}.ca"))
            if self.use_audio:
                h = self.audio_cross_attention(h, audio_tokens, audio_window, b)
            x = self._ln(h, f"{pre}.ta")
            xt = tc.transpose(x, (0, 2, 1, 3))
            h = tc.add(h, tc.transpose(self._attend(xt, xt, f"{pre}.ta"), (0, 2, 1, 3)))

        F = tc.linear(self._ln(h, "head"), P["head.w"], P["head.b"])
        c_skip, c_out = cfg.schedule.precondition(t, cfg.sigma_data)
        shape = (B, 1, 1, 1)
        return tc.add(tc.mul(noisy, c_skip.reshape(shape)), tc.mul(F, c_out.reshape(shape)))

    def _audio_inputs(self, cond: ConditionBundle, B: int) -> tuple[Tensor, "AudioWindow"]:
        d = self.cfg.d_model
        null_tok = tc.reshape(self.params["audio_proj.null"], (1, 1, d))
        null_flags = np.asarray(cond.null_audio, dtype=bool)
        if cond.audio is None:
            tokens = tc.broadcast_to(null_tok, (B, 1, d))
            times = np.zeros(0)
            win = np.zeros((self.cfg.K, 0), dtype=bool)
        else:
            toks = cond.audio.tokens
            if toks.ndim == 2:
                toks = tc.broadcast_to(tc.reshape(toks, (1,) + toks.shape), (B,) + toks.shape)
            T = toks.shape[1]
            if cond.audio_mask is None:
                raise ConditionError("audio tokens given without an attention mask")
            win = cond.audio_mask.visible
            if win.shape != (self.cfg.K, T):
                raise ConditionError(f"audio mask shape {win.shape} != ({self.cfg.K}, {T})")
            tokens = tc.concat([toks, tc.broadcast_to(null_tok, (B, 1, d))], axis=1)
            times = cond.audio.token_times
        return tokens, AudioWindow.build(win, null_flags, times, d)


@dataclass
class AudioWindow:
    """Per-frame visible token table for windowed audio attention.

    ``index[k]`` lists the tokens frame k may see, padded with the null
    token index and closed by the null token itself; ``visible`` [B, K, W]
    says which of those entries each sample actually attends to (window
    tokens when audio is present, only the null token when it is nulled).
    """

    index: np.ndarray  # [K, W] int
    visible: np.ndarray  # [B, K, W] bool
    token_te: np.ndarray  # [T+1, d] time encoding added to keys (zero for null)

    @property
    def width(self) -> int:
        return self.index.shape[1]

    @classmethod
    def build(cls, win: np.ndarray, null_flags: np.ndarray, times: np.ndarray, d: int) -> "AudioWindow":
        K, T = win.shape
        counts = win.sum(axis=1)
        W = int(counts.max()) + 1
        index = np.full((K, W), T, dtype=np.int64)
        in_window = np.zeros((K, W), dtype=bool)
        for k in range(K):
            cols = np.flatnonzero(win[k])
            index[k, :len(cols)] = cols
            in_window[k, :len(cols)] = True
        null_col = np.zeros(W, dtype=bool)
        null_col[-1] = True
        visible = np.where(null_flags[:, None, None], null_col[None, None, :], in_window[None])
        te = np.zeros((T + 1, d))
        te[:T] = time_embedding(times, d)
        return cls(index, visible, te)

    def dense(self, T: int) -> np.ndarray:
        """Equivalent [B, K, T+1] boolean mask over the full token axis."""
        B, K, W = self.visible.shape
        full = np.zeros((B, K, T + 1), dtype=bool)
        for k in range(K):
            full[:, k, self.index[k]] |= self.visible[:, k, :]
        return full


def _is_audio_param(name: str) -> bool:
    return "audio_xattn" in name or "proj" in name


def build_model(cfg: ModelConfig, seed: int = 0) -> tuple[Denoiser, ParameterPartition]:
    model = Denoiser(cfg, seed)
    return model, model.partition()
