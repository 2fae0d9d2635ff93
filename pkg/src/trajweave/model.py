"""Sequence model over feature-domain tuples.

Each tuple's three domains are embedded separately — continuous features with
learnable Fourier encodings, discrete features with lookup tables, masked
slots with token rows — then fused by a small self-attention over the three
rows. Fused tuples plus dual-layer positional encodings form the sequence fed
to a stack of post-norm attention/feed-forward blocks. Input positions see
only each other; generated positions additionally see earlier generated
positions, so teacher forcing never leaks a later target into an earlier
prediction. Four linear heads decode a coordinate pair, a time offset, a
distribution over segments plus a stop class, and an along-segment fraction.

The model operates internally on normalized features: coordinates are min-max
scaled over the configured ranges, times are divided by the time scale, and
fractions are used as-is. Regression losses are computed in this normalized
space; generated tuples are de-normalized back to degrees and seconds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import neuralcore as nc
from .tokenizer import (
    G_CLS,
    G_END,
    G_START,
    PlanError,
    Road,
    SequencePlan,
    Spatial,
    Special,
    StreamToken,
    Temporal,
    TrajTuple,
    assign_positions,
    with_class_token,
)

if TYPE_CHECKING:  # pragma: no cover - annotation-only import
    from .roadnet import RoadNetwork

CONTINUOUS_FEATURES = ("lng", "lat", "time", "fraction")
_ATTN_NAMES = ("wq", "wk", "wv", "wo")
_REGRESSION_EPS = 1e-12  # keeps the coordinate-distance sqrt differentiable


class CheckpointError(RuntimeError):
    """A checkpoint directory is missing, truncated, or inconsistent."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and normalization hyper-parameters."""

    n_segments: int
    lng_range: tuple[float, float]
    lat_range: tuple[float, float]
    d: int = 128
    n_heads: int = 8
    n_layers: int = 2
    delta_m: float = 100.0
    time_scale: float = 60.0
    max_block_len: int = 64

    def __post_init__(self) -> None:
        if self.n_segments < 1:
            raise ValueError("model needs at least one road segment")
        if self.d % 2 != 0:
            raise ValueError(f"embedding dimension must be even, got {self.d}")
        if self.d % self.n_heads != 0:
            raise ValueError(f"d={self.d} is not divisible by {self.n_heads} heads")
        if self.n_layers < 1 or self.max_block_len < 1:
            raise ValueError("n_layers and max_block_len must be positive")
        if self.time_scale <= 0 or self.delta_m <= 0:
            raise ValueError("time_scale and delta_m must be positive")

    @property
    def stop_class(self) -> int:
        """Index of the extra segment-head class that ends a block."""
        return self.n_segments

    @classmethod
    def for_network(cls, network: "RoadNetwork", **overrides) -> "ModelConfig":
        """A config whose coordinate ranges cover the network's nodes."""
        lngs = [n.lng for n in network.nodes.values()]
        lats = [n.lat for n in network.nodes.values()]
        return cls(
            n_segments=len(network.segments),
            lng_range=_padded_range(lngs),
            lat_range=_padded_range(lats),
            **overrides,
        )

    def to_dict(self) -> dict:
        return {
            "n_segments": self.n_segments,
            "lng_range": list(self.lng_range),
            "lat_range": list(self.lat_range),
            "d": self.d,
            "n_heads": self.n_heads,
            "n_layers": self.n_layers,
            "delta_m": self.delta_m,
            "time_scale": self.time_scale,
            "max_block_len": self.max_block_len,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        return cls(
            n_segments=int(raw["n_segments"]),
            lng_range=(float(raw["lng_range"][0]), float(raw["lng_range"][1])),
            lat_range=(float(raw["lat_range"][0]), float(raw["lat_range"][1])),
            d=int(raw["d"]),
            n_heads=int(raw["n_heads"]),
            n_layers=int(raw["n_layers"]),
            delta_m=float(raw["delta_m"]),
            time_scale=float(raw["time_scale"]),
            max_block_len=int(raw["max_block_len"]),
        )


def _padded_range(values: Sequence[float]) -> tuple[float, float]:
    lo, hi = min(values), max(values)
    if hi - lo <= 0.0:
        return (lo - 0.5, lo + 0.5)
    pad = 0.05 * (hi - lo)
    return (lo - pad, hi + pad)


def _build_params(config: ModelConfig, seed: int) -> nc.ParamStore:
    rng = np.random.default_rng(seed)
    store = nc.ParamStore(np.float32)
    d = config.d
    for feat in CONTINUOUS_FEATURES:
        store.add(f"fourier_{feat}_freq", rng.normal(0.0, 2.0 * np.pi, size=d // 2))
        store.add(f"fourier_{feat}_proj", nc.xavier_uniform((d, d), rng))
    store.add("table_segment", nc.xavier_uniform((config.n_segments, d), rng))
    store.add("table_neighbor", nc.xavier_uniform((config.n_segments, d), rng))
    store.add("table_token", nc.xavier_uniform((len(Special), d), rng))
    for prefix in ("spatial", "tuple"):
        for name in _ATTN_NAMES:
            store.add(f"{prefix}_{name}", nc.xavier_uniform((d, d), rng))
    for layer in range(config.n_layers):
        p = f"layer{layer}"
        for name in _ATTN_NAMES:
            store.add(f"{p}_{name}", nc.xavier_uniform((d, d), rng))
        store.add(f"{p}_ffn_w1", nc.xavier_uniform((d, 4 * d), rng))
        store.add(f"{p}_ffn_b1", np.zeros(4 * d))
        store.add(f"{p}_ffn_w2", nc.xavier_uniform((4 * d, d), rng))
        store.add(f"{p}_ffn_b2", np.zeros(d))
        store.add(f"{p}_ln1_gain", np.ones(d))
        store.add(f"{p}_ln1_bias", np.zeros(d))
        store.add(f"{p}_ln2_gain", np.ones(d))
        store.add(f"{p}_ln2_bias", np.zeros(d))
    store.add("head_coord_w", nc.xavier_uniform((d, 2), rng))
    store.add("head_coord_b", np.zeros(2))
    store.add("head_time_w", nc.xavier_uniform((d, 1), rng))
    store.add("head_time_b", np.zeros(1))
    store.add("head_segment_w", nc.xavier_uniform((d, config.n_segments + 1), rng))
    store.add("head_segment_b", np.zeros(config.n_segments + 1))
    store.add("head_fraction_w", nc.xavier_uniform((d, 1), rng))
    store.add("head_fraction_b", np.zeros(1))
    return store


def sinusoid_table(n_positions: int, d: int, dtype) -> np.ndarray:
    """Fixed sinusoidal positional encodings, one row per position."""
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    idx = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / d)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


@dataclass
class _Batch:
    """Padded numpy arrays describing a batch of positioned streams.

    Shapes are (B, S) unless noted; padding positions hold mask tokens and are
    blocked from attention. Supervision arrays are flat over the fed positions
    that carry a target, indexed into the flattened (B*S) sequence.
    """

    lng: np.ndarray
    lat: np.ndarray
    has_coord: np.ndarray
    sp_token: np.ndarray
    omega: np.ndarray  # (B, S, K) neighbor segment ids, zero-padded
    omega_ok: np.ndarray  # (B, S, K) which neighbor entries are real
    t: np.ndarray
    has_time: np.ndarray
    te_token: np.ndarray
    seg: np.ndarray
    frac: np.ndarray
    has_road: np.ndarray
    rn_token: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    is_cls: np.ndarray
    blocked: np.ndarray  # (B, 1, S, S) True where attention is forbidden
    n_inputs: np.ndarray  # (B,)
    n_real: np.ndarray  # (B,)
    sup_rows: np.ndarray  # (M,) flat indices of supervised fed positions
    sup_plan: np.ndarray  # (M,) which stream each supervised position is from
    sup_weight: np.ndarray  # (M,) 1 / (number of supervised positions in plan)
    t_coord: np.ndarray  # (M, 2) normalized coordinate targets
    m_coord: np.ndarray
    t_time: np.ndarray
    m_time: np.ndarray
    t_class: np.ndarray
    t_frac: np.ndarray
    m_frac: np.ndarray
    indicator: np.ndarray  # (M,) 0 where the target is the end token

    @property
    def shape(self) -> tuple[int, int]:
        return self.lng.shape


@dataclass
class ReconDetails:
    """Per-position diagnostics of a teacher-forced reconstruction pass."""

    coord_pred: np.ndarray
    time_pred: np.ndarray
    class_probs: np.ndarray
    frac_pred: np.ndarray
    coord_target: np.ndarray
    time_target: np.ndarray
    class_target: np.ndarray
    frac_target: np.ndarray
    coord_mask: np.ndarray
    time_mask: np.ndarray
    frac_mask: np.ndarray
    indicator: np.ndarray
    per_position_loss: np.ndarray
    plan_index: np.ndarray
    per_plan_loss: np.ndarray
    embeddings: nc.Tensor | None = None


class TrajModel:
    """The tuple-sequence network with its parameters and decode heads."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params = _build_params(config, seed)

    @classmethod
    def _with_store(cls, config: ModelConfig, store: nc.ParamStore) -> "TrajModel":
        model = cls.__new__(cls)
        model.config = config
        model.params = store
        return model

    def astype(self, dtype) -> "TrajModel":
        """A deep copy with parameters converted to dtype (for grad checks)."""
        return TrajModel._with_store(self.config, self.params.astype(dtype))

    @property
    def dtype(self):
        return self.params.dtype

    def n_parameters(self) -> int:
        return self.params.n_values()

    # ---------------------------------------------------------------- batch

    def _normalize_coord(self, lng: float, lat: float) -> tuple[float, float]:
        (lng0, lng1), (lat0, lat1) = self.config.lng_range, self.config.lat_range
        return ((lng - lng0) / (lng1 - lng0), (lat - lat0) / (lat1 - lat0))

    def _denormalize_coord(self, x: float, y: float) -> tuple[float, float]:
        (lng0, lng1), (lat0, lat1) = self.config.lng_range, self.config.lat_range
        return (lng0 + x * (lng1 - lng0), lat0 + y * (lat1 - lat0))

    def _arrange(self, streams: Sequence[Sequence[StreamToken]]) -> _Batch:
        """Pack positioned streams into padded arrays plus attention masks."""
        if not streams or any(len(s) == 0 for s in streams):
            raise PlanError("cannot encode an empty sequence")
        n_seg = self.config.n_segments
        B = len(streams)
        S = max(len(s) for s in streams)
        K = 1
        for stream in streams:
            for tok in stream:
                if isinstance(tok.tup.spatial, Spatial):
                    K = max(K, len(tok.tup.spatial.omega))

        f = np.zeros((B, S), dtype=np.float64)
        lng, lat, t, frac = f.copy(), f.copy(), f.copy(), f.copy()
        has_coord = np.zeros((B, S), dtype=bool)
        has_time = np.zeros((B, S), dtype=bool)
        has_road = np.zeros((B, S), dtype=bool)
        is_cls = np.zeros((B, S), dtype=bool)
        sp_token = np.zeros((B, S), dtype=np.int64)
        te_token = np.zeros((B, S), dtype=np.int64)
        rn_token = np.zeros((B, S), dtype=np.int64)
        seg = np.zeros((B, S), dtype=np.int64)
        omega = np.zeros((B, S, K), dtype=np.int64)
        omega_ok = np.zeros((B, S, K), dtype=bool)
        p1 = np.zeros((B, S), dtype=np.int64)
        p2 = np.zeros((B, S), dtype=np.int64)
        n_inputs = np.zeros(B, dtype=np.int64)
        n_real = np.zeros(B, dtype=np.int64)
        sp_token[:] = Special.MASK.value
        te_token[:] = Special.MASK.value
        rn_token[:] = Special.MASK.value

        sup: list[tuple[int, int, TrajTuple]] = []  # (flat index, stream, target)
        for b, stream in enumerate(streams):
            n_real[b] = len(stream)
            n_inputs[b] = sum(1 for tok in stream if tok.block is None)
            for s, tok in enumerate(stream):
                p1[b, s], p2[b, s] = tok.p1, tok.p2
                tup = tok.tup
                is_cls[b, s] = tup.special() is Special.CLS
                if isinstance(tup.spatial, Spatial):
                    has_coord[b, s] = True
                    lng[b, s], lat[b, s] = self._normalize_coord(tup.spatial.lng, tup.spatial.lat)
                    ids = tup.spatial.omega
                    if any(i < 0 or i >= n_seg for i in ids):
                        raise PlanError(f"neighbor segment id outside 0..{n_seg - 1}: {ids}")
                    omega[b, s, : len(ids)] = ids
                    omega_ok[b, s, : len(ids)] = True
                else:
                    sp_token[b, s] = tup.spatial.value
                if isinstance(tup.temporal, Temporal):
                    has_time[b, s] = True
                    t[b, s] = tup.temporal.t_norm / self.config.time_scale
                else:
                    te_token[b, s] = tup.temporal.value
                if isinstance(tup.road, Road):
                    if not 0 <= tup.road.segment_id < n_seg:
                        raise PlanError(
                            f"segment id {tup.road.segment_id} outside 0..{n_seg - 1}"
                        )
                    has_road[b, s] = True
                    seg[b, s] = tup.road.segment_id
                    frac[b, s] = tup.road.fraction
                else:
                    rn_token[b, s] = tup.road.value
                if tok.block is not None and tok.target is not None:
                    sup.append((b * S + s, b, tok.target))

        blocked = np.ones((B, 1, S, S), dtype=bool)
        for b in range(B):
            n_in, n_tot = int(n_inputs[b]), int(n_real[b])
            blocked[b, 0, :n_tot, :n_in] = False  # inputs visible to every real row
            for k in range(n_in, n_tot):  # fed rows: causal over the fed region
                blocked[b, 0, k, n_in : k + 1] = False
            blocked[b, 0, n_tot:, :] = True
            blocked[b, 0, n_tot:, 0] = False  # keep padding rows decodable

        batch = _Batch(
            lng=lng, lat=lat, has_coord=has_coord, sp_token=sp_token,
            omega=omega, omega_ok=omega_ok,
            t=t, has_time=has_time, te_token=te_token,
            seg=seg, frac=frac, has_road=has_road, rn_token=rn_token,
            p1=p1, p2=p2, is_cls=is_cls, blocked=blocked,
            n_inputs=n_inputs, n_real=n_real,
            **self._arrange_supervision(sup),
        )
        return batch

    def _arrange_supervision(self, sup: list[tuple[int, int, TrajTuple]]) -> dict:
        M = len(sup)
        out = {
            "sup_rows": np.zeros(M, dtype=np.int64),
            "sup_plan": np.zeros(M, dtype=np.int64),
            "sup_weight": np.zeros(M, dtype=np.float64),
            "t_coord": np.zeros((M, 2), dtype=np.float64),
            "m_coord": np.zeros(M, dtype=np.float64),
            "t_time": np.zeros(M, dtype=np.float64),
            "m_time": np.zeros(M, dtype=np.float64),
            "t_class": np.zeros(M, dtype=np.int64),
            "t_frac": np.zeros(M, dtype=np.float64),
            "m_frac": np.zeros(M, dtype=np.float64),
            "indicator": np.zeros(M, dtype=np.float64),
        }
        for m, (flat_idx, b, target) in enumerate(sup):
            out["sup_rows"][m] = flat_idx
            out["sup_plan"][m] = b
            if target == G_END:
                out["t_class"][m] = self.config.stop_class
                continue
            if isinstance(target, Special) or target.special() is not None:
                raise PlanError(f"block target must be a ground-truth tuple or {G_END}")
            out["indicator"][m] = 1.0
            if isinstance(target.road, Road):
                if not 0 <= target.road.segment_id < self.config.n_segments:
                    raise PlanError(
                        f"target segment id {target.road.segment_id} outside the network"
                    )
                out["t_class"][m] = target.road.segment_id
                out["t_frac"][m] = target.road.fraction
                out["m_frac"][m] = 1.0
            else:
                raise PlanError("a block target other than the end token needs a road domain")
            if isinstance(target.spatial, Spatial):
                out["t_coord"][m] = self._normalize_coord(target.spatial.lng, target.spatial.lat)
                out["m_coord"][m] = 1.0
            if isinstance(target.temporal, Temporal):
                out["t_time"][m] = target.temporal.t_norm / self.config.time_scale
                out["m_time"][m] = 1.0
        counts = np.bincount(out["sup_plan"], minlength=1) if M else np.array([1])
        out["sup_weight"] = 1.0 / counts[out["sup_plan"]] if M else out["sup_weight"]
        return out

    # -------------------------------------------------------------- forward

    def _const(self, x) -> nc.Tensor:
        return nc.constant(np.asarray(x, dtype=self.dtype))

    def fourier_encode(self, feature: str, x: np.ndarray) -> nc.Tensor:
        """Encode scalar feature values (N,) into (N, d) latent vectors."""
        if feature not in CONTINUOUS_FEATURES:
            raise ValueError(f"unknown continuous feature {feature!r}")
        freq = self.params[f"fourier_{feature}_freq"]
        proj = self.params[f"fourier_{feature}_proj"]
        arg = self._const(np.asarray(x, dtype=np.float64)[:, None]) * freq
        return nc.concat([nc.cos(arg), nc.sin(arg)], axis=-1) @ proj

    def _select(self, condition: np.ndarray, a: nc.Tensor, b: nc.Tensor) -> nc.Tensor:
        keep = self._const(condition.astype(np.float64)[:, None])
        return a * keep + b * (1.0 - keep)

    def _slot_matrices(self, batch: _Batch) -> nc.Tensor:
        """Embed every token's three domain slots: (B*S, 3, d)."""
        P, cfg = self.params, self.config
        B, S = batch.shape
        N = B * S

        def flat(a: np.ndarray) -> np.ndarray:
            return a.reshape(N, *a.shape[2:])

        token_rows = lambda idx: nc.take(P["table_token"], flat(idx))

        z_coord = self.fourier_encode("lng", flat(batch.lng)) + self.fourier_encode(
            "lat", flat(batch.lat)
        )
        neighbor_rows = nc.take(P["table_neighbor"], flat(batch.omega))  # (N, K, d)
        omega_ok = flat(batch.omega_ok)
        attend = omega_ok.copy()
        empty = ~omega_ok.any(axis=-1)
        attend[empty, 0] = True  # placeholder key; the output is zeroed below
        attn = nc.multi_head_attention(
            nc.reshape(z_coord, (N, 1, cfg.d)),
            neighbor_rows,
            neighbor_rows,
            P["spatial_wq"], P["spatial_wk"], P["spatial_wv"], P["spatial_wo"],
            n_heads=cfg.n_heads,
            mask=~attend[:, None, None, :],
        )
        attn = nc.reshape(attn, (N, cfg.d)) * self._const((~empty).astype(np.float64)[:, None])
        z_sp = self._select(flat(batch.has_coord), z_coord + attn, token_rows(batch.sp_token))

        z_te = self._select(
            flat(batch.has_time),
            self.fourier_encode("time", flat(batch.t)),
            token_rows(batch.te_token),
        )
        z_rn = self._select(
            flat(batch.has_road),
            nc.take(P["table_segment"], flat(batch.seg))
            + self.fourier_encode("fraction", flat(batch.frac)),
            token_rows(batch.rn_token),
        )
        d = cfg.d
        return nc.concat(
            [nc.reshape(z_sp, (N, 1, d)), nc.reshape(z_te, (N, 1, d)), nc.reshape(z_rn, (N, 1, d))],
            axis=1,
        )

    def _encode(self, batch: _Batch) -> nc.Tensor:
        """Full encoder pass: (B, S, d) output states."""
        P, cfg = self.params, self.config
        B, S = batch.shape
        N = B * S

        slots = self._slot_matrices(batch)
        fused = nc.multi_head_attention(
            slots, slots, slots,
            P["tuple_wq"], P["tuple_wk"], P["tuple_wv"], P["tuple_wo"],
            n_heads=cfg.n_heads,
        )
        base = nc.tensor_mean(fused, axis=-2)  # (N, d)
        cls_row = nc.take(P["table_token"], np.array([Special.CLS.value]))
        base = self._select(batch.is_cls.reshape(N), cls_row, base)

        pe = sinusoid_table(int(max(batch.p1.max(), batch.p2.max())) + 1, cfg.d, self.dtype)
        h = base + self._const(pe[batch.p1.reshape(N)] + pe[batch.p2.reshape(N)])
        h = nc.reshape(h, (B, S, cfg.d))

        for layer in range(cfg.n_layers):
            p = f"layer{layer}"
            attended = nc.multi_head_attention(
                h, h, h,
                P[f"{p}_wq"], P[f"{p}_wk"], P[f"{p}_wv"], P[f"{p}_wo"],
                n_heads=cfg.n_heads,
                mask=batch.blocked,
            )
            h = nc.layer_norm(attended + h, P[f"{p}_ln1_gain"], P[f"{p}_ln1_bias"])
            fed = nc.feed_forward(
                h, P[f"{p}_ffn_w1"], P[f"{p}_ffn_b1"], P[f"{p}_ffn_w2"], P[f"{p}_ffn_b2"]
            )
            h = nc.layer_norm(fed + h, P[f"{p}_ln2_gain"], P[f"{p}_ln2_bias"])
        return h

    def _decode_heads(self, states: nc.Tensor) -> tuple[nc.Tensor, nc.Tensor, nc.Tensor, nc.Tensor]:
        """Linear heads over (M, d) states: coordinates, time, logits, fraction."""
        P = self.params
        M = states.shape[0]
        l_hat = states @ P["head_coord_w"] + P["head_coord_b"]
        t_hat = nc.reshape(states @ P["head_time_w"] + P["head_time_b"], (M,))
        logits = states @ P["head_segment_w"] + P["head_segment_b"]
        r_hat = nc.reshape(states @ P["head_fraction_w"] + P["head_fraction_b"], (M,))
        return l_hat, t_hat, logits, r_hat

    @staticmethod
    def _log_softmax_true_class(logits: nc.Tensor, classes: np.ndarray) -> nc.Tensor:
        """-log p(true class) per row, computed stably."""
        M = logits.shape[0]
        row_max = logits.data.max(axis=-1, keepdims=True)
        lse = nc.log(nc.tensor_sum(nc.exp(logits - row_max), axis=-1)) + nc.constant(
            row_max.reshape(M)
        )
        true_logit = nc.take(logits, (np.arange(M), classes))
        return lse - true_logit

    def reconstruction_loss(
        self, plans: Sequence[SequencePlan], include_cls: bool = True
    ) -> tuple[nc.Tensor, ReconDetails]:
        """Teacher-forced loss over a batch of plans.

        Returns the summed per-plan mean loss (one scalar for the whole batch)
        and per-position diagnostics. With include_cls=True each sequence gets
        a leading class token whose output row doubles as the sequence's
        embedding; input rows never attend to generated rows, so these
        embeddings are bitwise identical to an inputs-only pass.
        """
        prepared = [with_class_token(p) if include_cls else p for p in plans]
        batch = self._arrange([assign_positions(p) for p in prepared])
        if batch.sup_rows.size == 0:
            raise PlanError("no supervised positions: every plan needs at least one block")
        B, S = batch.shape
        states = nc.reshape(self._encode(batch), (B * S, self.config.d))
        sup_states = nc.take(states, batch.sup_rows)
        l_hat, t_hat, logits, r_hat = self._decode_heads(sup_states)

        ind = batch.indicator
        diff = l_hat - self._const(batch.t_coord)
        dist = nc.sqrt(nc.tensor_sum(diff * diff, axis=-1) + _REGRESSION_EPS)
        coord_term = dist * self._const(0.5 * batch.m_coord * ind)
        time_term = nc.absolute(t_hat - self._const(batch.t_time)) * self._const(
            batch.m_time * ind
        )
        frac_term = nc.absolute(r_hat - self._const(batch.t_frac)) * self._const(
            batch.m_frac * ind
        )
        class_term = self._log_softmax_true_class(logits, batch.t_class)
        per_position = coord_term + time_term + frac_term + class_term
        total = nc.tensor_sum(per_position * self._const(batch.sup_weight))

        shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=-1, keepdims=True)
        details = ReconDetails(
            coord_pred=l_hat.data.copy(),
            time_pred=t_hat.data.copy(),
            class_probs=probs,
            frac_pred=r_hat.data.copy(),
            coord_target=batch.t_coord,
            time_target=batch.t_time,
            class_target=batch.t_class,
            frac_target=batch.t_frac,
            coord_mask=batch.m_coord,
            time_mask=batch.m_time,
            frac_mask=batch.m_frac,
            indicator=batch.indicator,
            per_position_loss=per_position.data.copy(),
            plan_index=batch.sup_plan,
            per_plan_loss=np.bincount(
                batch.sup_plan,
                weights=per_position.data * batch.sup_weight,
                minlength=len(plans),
            ),
            embeddings=(
                nc.take(states, np.arange(B) * S) if include_cls else None
            ),
        )
        return total, details

    def embed(self, plans: Sequence[SequencePlan]) -> nc.Tensor:
        """Class-token embeddings (B, d) of the plans' input sequences.

        Blocks are ignored: only the class token and the input items are
        encoded, with full mutual visibility.
        """
        streams = []
        for plan in plans:
            stream = assign_positions(with_class_token(plan))
            streams.append([tok for tok in stream if tok.block is None])
        batch = self._arrange(streams)
        B, S = batch.shape
        states = nc.reshape(self._encode(batch), (B * S, self.config.d))
        return nc.take(states, np.arange(B) * S)

    # ------------------------------------------------------------ inference

    def generate(
        self,
        items: Sequence[TrajTuple],
        network: "RoadNetwork",
        max_block_len: int | None = None,
        anchors: Sequence[int] | None = None,
    ) -> list[list[TrajTuple]]:
        """Greedily decode one block per anchor, in the given order.

        Anchors default to every masked input item in item order; passing an
        explicit subset leaves the other masked items untouched. A partially
        masked anchor (some domain visible) yields exactly one tuple — the
        stop class is not an option for it, mirroring how such blocks always
        look in training data. Fully masked gap items are decoded until the
        stop class or the length cap. Generated tuples are de-normalized and
        carry recomputed neighbor sets.
        """
        if not items:
            raise PlanError("cannot generate from an empty input sequence")
        cap = max_block_len if max_block_len is not None else self.config.max_block_len
        if cap < 1:
            raise PlanError("max_block_len must be at least 1")
        if anchors is None:
            anchors = [k for k, tup in enumerate(items) if tup.has_mask()]
        else:
            anchors = [int(a) for a in anchors]
            if len(set(anchors)) != len(anchors):
                raise PlanError("anchors must be distinct")
            for a in anchors:
                if not 0 <= a < len(items):
                    raise PlanError(f"anchor {a} is out of range")
                if not items[a].has_mask():
                    raise PlanError(f"item {a} has no masked domain to generate")
        stream: list[StreamToken] = [StreamToken(G_CLS, 0, 0)]
        for k, tup in enumerate(items):
            stream.append(StreamToken(tup, k + 1, 0))

        blocks: list[list[TrajTuple]] = []
        for anchor in anchors:
            p1 = anchor + 1
            block: list[TrajTuple] = []
            single = items[anchor].special() is not Special.MASK
            next_fed, p2 = G_START, 1
            while True:
                stream.append(StreamToken(next_fed, p1, p2, block=0))
                batch = self._arrange([stream])
                state = nc.reshape(
                    self._encode(batch), (len(stream), self.config.d)
                ).data[-1]
                tup, stop = self._materialize(state, network, allow_stop=not single)
                if stop:
                    break
                block.append(tup)
                if single or len(block) >= cap:
                    # training feeds every real tuple of a block, so keep the
                    # stream identical for the blocks that follow
                    stream.append(StreamToken(tup, p1, p2 + 1, block=0))
                    break
                next_fed, p2 = tup, p2 + 1
            blocks.append(block)
        return blocks

    def _materialize(
        self, state: np.ndarray, network: "RoadNetwork", allow_stop: bool = True
    ) -> tuple[TrajTuple | None, bool]:
        """Decode one output state into a de-normalized tuple (or a stop)."""
        P = self.params
        l_hat = state @ P["head_coord_w"].data + P["head_coord_b"].data
        t_hat = float(state @ P["head_time_w"].data[:, 0] + P["head_time_b"].data[0])
        logits = state @ P["head_segment_w"].data + P["head_segment_b"].data
        r_hat = float(state @ P["head_fraction_w"].data[:, 0] + P["head_fraction_b"].data[0])
        if not allow_stop:
            logits = logits[: self.config.stop_class]
        seg = int(np.argmax(logits))
        if seg == self.config.stop_class:
            return None, True
        lng, lat = self._denormalize_coord(float(l_hat[0]), float(l_hat[1]))
        omega = tuple(network.neighbors_within((lng, lat), self.config.delta_m))
        return (
            TrajTuple(
                Spatial(lng, lat, omega),
                Temporal(t_hat * self.config.time_scale),
                Road(seg, float(np.clip(r_hat, 0.0, 1.0))),
            ),
            False,
        )

    # ----------------------------------------------------------- checkpoint

    def save(self, path: str | Path) -> None:
        """Write manifest.json plus params.bin (little-endian float32)."""
        directory = Path(path)
        directory.mkdir(parents=True, exist_ok=True)
        tensors = []
        offset = 0
        chunks = []
        for name in self.params.names():
            arr = np.ascontiguousarray(self.params[name].data, dtype="<f4")
            tensors.append({"name": name, "shape": list(arr.shape), "offset_bytes": offset})
            chunks.append(arr.tobytes())
            offset += arr.nbytes
        manifest = {
            "config": self.config.to_dict(),
            "dtype": "float32",
            "tensors": tensors,
            "total_bytes": offset,
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        (directory / "params.bin").write_bytes(b"".join(chunks))

    @classmethod
    def load(cls, path: str | Path) -> "TrajModel":
        directory = Path(path)
        manifest_path = directory / "manifest.json"
        params_path = directory / "params.bin"
        if not manifest_path.is_file() or not params_path.is_file():
            raise CheckpointError(f"checkpoint at {directory} is missing manifest or params")
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("dtype") != "float32":
            raise CheckpointError(f"unsupported checkpoint dtype {manifest.get('dtype')!r}")
        config = ModelConfig.from_dict(manifest["config"])
        model = cls(config, seed=0)
        raw = params_path.read_bytes()
        if len(raw) != manifest["total_bytes"]:
            raise CheckpointError(
                f"params.bin has {len(raw)} bytes, manifest expects {manifest['total_bytes']}"
            )
        entries = {entry["name"]: entry for entry in manifest["tensors"]}
        if sorted(entries) != model.params.names():
            raise CheckpointError("checkpoint tensor names do not match the configured network")
        values = {}
        for name in model.params.names():
            entry = entries[name]
            shape = tuple(entry["shape"])
            if shape != model.params[name].shape:
                raise CheckpointError(
                    f"tensor {name} has shape {shape}, network expects {model.params[name].shape}"
                )
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            start = entry["offset_bytes"]
            end = start + 4 * count
            if end > len(raw):
                raise CheckpointError(f"params.bin truncated inside tensor {name}")
            values[name] = np.frombuffer(raw[start:end], dtype="<f4").reshape(shape).copy()
        model.params.load_values(values)
        return model
