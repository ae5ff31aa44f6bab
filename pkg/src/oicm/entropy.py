"""Probability models over latents and their integer CDF tables.

Three model families live here:
  * FactorizedEntropyModel - non-parametric per-channel monotone-CDF density
    (the filter/bias/factor construction used by entropy bottlenecks), used
    by the information-filter latent and the codec hyper-latent.
  * Gaussian mixture / mean-&-scale conditionals for the codec main latent.
  * CdfTable - 16-bit integer quantization of any of the above, the exact
    format the range coder consumes (and the byte layout shared with the
    accelerated coder).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import ndtr
from torch import nn

from .errors import EntropyDomainError

LIKELIHOOD_FLOOR = 2.0 ** -16
SCALE_FLOOR = 0.11
CDF_PRECISION = 16
DEFAULT_SUPPORT = (-64, 63)

_LOG2 = 0.6931471805599453


class _LowerBoundFn(torch.autograd.Function):
    """clamp_min with a one-sided straight-through gradient.

    Gradients pass when the input is above the bound or when the incoming
    gradient would push a clamped value back up; otherwise they are zeroed.
    """

    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x)
        ctx.bound = bound
        return x.clamp_min(bound)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        pass_through = (x >= ctx.bound) | (grad < 0)
        return grad * pass_through, None


def lower_bound(x: torch.Tensor, bound: float) -> torch.Tensor:
    return _LowerBoundFn.apply(x, bound)


def round_away_from_zero(x: torch.Tensor) -> torch.Tensor:
    """Nearest integer, ties away from zero (torch.round is banker's)."""
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


def quantize(
    values: torch.Tensor,
    mode: str,
    means: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Noise-relax or hard-round a latent.

    noise: values + U(-1/2, 1/2), i.i.d. per element (needs a generator).
    round: round-to-nearest with ties away from zero; when `means` is given
    the rounding grid is centered on them: round(values - means) + means.
    """
    if mode == "noise":
        if generator is None:
            raise ValueError("noise mode requires a torch.Generator")
        noise = torch.rand(
            values.shape, generator=generator, dtype=values.dtype, device=values.device
        ) - 0.5
        return values + noise
    if mode == "round":
        if means is None:
            return round_away_from_zero(values)
        return round_away_from_zero(values - means) + means
    raise ValueError(f"unknown quantize mode {mode!r}")


def rate_bits(likelihoods: torch.Tensor) -> torch.Tensor:
    """Total information content: sum of -log2(p) over all elements."""
    likelihoods = torch.as_tensor(likelihoods)
    if bool((likelihoods <= 0).any()):
        raise EntropyDomainError("likelihoods must be positive")
    return -torch.log2(likelihoods).sum()


def _std_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    # erfc maximizes precision in the tails
    return 0.5 * torch.erfc(x * (-(2 ** -0.5)))


def gmm_likelihood(
    y_hat: torch.Tensor,
    weights: torch.Tensor,
    means: torch.Tensor,
    scales: torch.Tensor,
    scale_floor: float = SCALE_FLOOR,
    likelihood_floor: float = LIKELIHOOD_FLOOR,
) -> torch.Tensor:
    """Per-element probability of y_hat under a unit-bin Gaussian mixture.

    weights/means/scales carry a leading mixture dimension K prepended to
    y_hat's shape. Returns p = sum_k w_k [Phi((y+1/2-mu_k)/s_k) -
    Phi((y-1/2-mu_k)/s_k)], floored at likelihood_floor. Differentiable in
    y_hat and in all three parameter stacks.
    """
    if weights.shape[1:] != y_hat.shape:
        raise ValueError(
            f"mixture params {tuple(weights.shape)} do not broadcast over {tuple(y_hat.shape)}"
        )
    scales = lower_bound(scales, scale_floor)
    centered = torch.abs(y_hat.unsqueeze(0) - means)
    upper = _std_normal_cdf((0.5 - centered) / scales)
    lower = _std_normal_cdf((-0.5 - centered) / scales)
    p = (weights * (upper - lower)).sum(dim=0)
    return lower_bound(p, likelihood_floor)


def mean_scale_likelihood(
    y_hat: torch.Tensor,
    mean: torch.Tensor,
    scale: torch.Tensor,
    scale_floor: float = SCALE_FLOOR,
    likelihood_floor: float = LIKELIHOOD_FLOOR,
) -> torch.Tensor:
    """Single-Gaussian special case of gmm_likelihood."""
    ones = torch.ones_like(mean).unsqueeze(0)
    return gmm_likelihood(
        y_hat, ones, mean.unsqueeze(0), scale.unsqueeze(0), scale_floor, likelihood_floor
    )


class FactorizedEntropyModel(nn.Module):
    """Per-channel non-parametric density with a monotone learned CDF.

    The cumulative is a composition of affine layers with softplus-positive
    weights and tanh gating, finished by a sigmoid; this keeps it monotone in
    its input, so bin probabilities c(x+1/2) - c(x-1/2) are valid. Depth and
    filter widths follow the usual (3, 3, 3, 3) construction.
    """

    def __init__(self, channels: int, filters=(3, 3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        self.filters = tuple(int(f) for f in filters)
        widths = (1,) + self.filters + (1,)
        scale = init_scale ** (1.0 / (len(self.filters) + 1))

        self._matrices = nn.ParameterList()
        self._biases = nn.ParameterList()
        self._factors = nn.ParameterList()
        for i in range(len(self.filters) + 1):
            init = float(np.log(np.expm1(1.0 / scale / widths[i + 1])))
            matrix = nn.Parameter(torch.full((channels, widths[i + 1], widths[i]), init))
            self._matrices.append(matrix)
            bias = nn.Parameter(torch.empty(channels, widths[i + 1], 1).uniform_(-0.5, 0.5))
            self._biases.append(bias)
            if i < len(self.filters):
                self._factors.append(nn.Parameter(torch.zeros(channels, widths[i + 1], 1)))

    def _logits_cumulative(self, x: torch.Tensor) -> torch.Tensor:
        # x: [C, 1, N] -> pre-sigmoid logits of the cumulative, same shape
        out = x
        for i, matrix in enumerate(self._matrices):
            out = torch.nn.functional.softplus(matrix) @ out + self._biases[i]
            if i < len(self._factors):
                out = out + torch.tanh(self._factors[i]) * torch.tanh(out)
        return out

    def likelihood(self, x: torch.Tensor, floor: float = LIKELIHOOD_FLOOR) -> torch.Tensor:
        """Bin probability c(x+1/2) - c(x-1/2), elementwise.

        x is [..., C, H, W] (channel dim third from the end) or [C, N].
        """
        if x.dim() < 2:
            raise ValueError("expected at least a channel dimension")
        channel_dim = x.dim() - 3 if x.dim() >= 3 else 0
        if x.shape[channel_dim] != self.channels:
            raise ValueError(
                f"expected {self.channels} channels, got {x.shape[channel_dim]}"
            )
        perm = list(range(x.dim()))
        perm.insert(0, perm.pop(channel_dim))
        flat = x.permute(perm).reshape(self.channels, 1, -1)

        lower = self._logits_cumulative(flat - 0.5)
        upper = self._logits_cumulative(flat + 0.5)
        # evaluate on the side with smaller magnitude for precision
        sign = -torch.sign(lower + upper).detach()
        p = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))

        p = p.reshape([x.shape[i] for i in perm])
        inv = [perm.index(i) for i in range(x.dim())]
        return lower_bound(p.permute(inv), floor)

    def entropy_bits(self, x: torch.Tensor) -> torch.Tensor:
        """Sum of -log2 p(x_i) under the factorized model; differentiable."""
        return rate_bits(self.likelihood(x))

    @torch.no_grad()
    def integer_pmf(self, support: tuple[int, int]) -> np.ndarray:
        """[channels, num_symbols] pmf at the integers of `support`, tails folded in."""
        lo, hi = support
        if hi < lo:
            raise ValueError("empty support range")
        grid = torch.arange(lo, hi + 1, dtype=torch.float32)
        x = grid.repeat(self.channels).reshape(self.channels, 1, -1)
        upper = torch.sigmoid(self._logits_cumulative(x + 0.5))
        lower = torch.sigmoid(self._logits_cumulative(x - 0.5))
        pmf = (upper - lower).squeeze(1)
        pmf[:, 0] += lower[:, 0, 0]
        pmf[:, -1] += 1.0 - upper[:, 0, -1]
        out = pmf.double().numpy()
        if not np.all(np.isfinite(out)):
            raise EntropyDomainError("factorized model produced non-finite pmf")
        return out


@dataclass
class CdfTable:
    """Integer-quantized CDF at 16-bit precision for the range coder.

    cdf has num_symbols + 1 entries, cdf[0] = 0, cdf[-1] = 2**precision,
    strictly increasing (every symbol holds mass >= 1). `offset` is the
    integer value of symbol index 0.
    """

    cdf: np.ndarray
    offset: int
    precision: int = CDF_PRECISION

    def __post_init__(self):
        self.cdf = np.asarray(self.cdf, dtype=np.uint32)
        if self.cdf[0] != 0 or self.cdf[-1] != (1 << self.precision):
            raise ValueError("cdf must start at 0 and end at 2**precision")
        if not np.all(np.diff(self.cdf.astype(np.int64)) >= 1):
            raise ValueError("cdf must be strictly increasing")

    @property
    def num_symbols(self) -> int:
        return len(self.cdf) - 1

    def symbol_prob(self, value: int) -> float:
        i = value - self.offset
        if not 0 <= i < self.num_symbols:
            raise ValueError(f"value {value} outside support")
        return float(int(self.cdf[i + 1]) - int(self.cdf[i])) / (1 << self.precision)

    def serialize(self) -> bytes:
        """precision u8 | num_symbols u32 | offset i32 | (S+1) x u32 cdf, little-endian."""
        head = struct.pack("<BIi", self.precision, self.num_symbols, self.offset)
        return head + self.cdf.astype("<u4").tobytes()

    @classmethod
    def deserialize(cls, data: bytes, pos: int = 0) -> tuple["CdfTable", int]:
        precision, num_symbols, offset = struct.unpack_from("<BIi", data, pos)
        pos += struct.calcsize("<BIi")
        n = num_symbols + 1
        cdf = np.frombuffer(data, dtype="<u4", count=n, offset=pos).astype(np.uint32)
        return cls(cdf=cdf, offset=offset, precision=precision), pos + 4 * n


def serialize_tables(tables: list[CdfTable]) -> bytes:
    """Tables blob shared with the accelerated coder: u32 count, then tables."""
    return struct.pack("<I", len(tables)) + b"".join(t.serialize() for t in tables)


def deserialize_tables(blob: bytes) -> list[CdfTable]:
    (count,) = struct.unpack_from("<I", blob, 0)
    pos = 4
    tables = []
    for _ in range(count):
        table, pos = CdfTable.deserialize(blob, pos)
        tables.append(table)
    return tables


def quantize_pmf(pmf: np.ndarray, precision: int = CDF_PRECISION) -> np.ndarray:
    """Batch-quantize pmfs [B, S] to integer masses summing to 2**precision.

    Round-to-nearest with a minimum mass of 1 per symbol, then a deficit
    fix-up of +/-1 on the symbols where the adjustment distorts least; keeps
    per-symbol error within one quantization unit whenever that is feasible.
    Fully deterministic.
    """
    pmf = np.atleast_2d(np.asarray(pmf, dtype=np.float64))
    if pmf.shape[1] == 0:
        raise ValueError("empty support range")
    if not np.all(np.isfinite(pmf)):
        raise EntropyDomainError("pmf contains NaN or inf")
    total = 1 << precision
    target = pmf / pmf.sum(axis=1, keepdims=True) * total
    masses = np.floor(target + 0.5).astype(np.int64)
    np.maximum(masses, 1, out=masses)
    err = target - masses  # positive: under-allocated

    deficit = total - masses.sum(axis=1)
    order_add = np.argsort(-err, axis=1, kind="stable")
    adjustable = masses > 1
    order_sub = np.argsort(np.where(adjustable, err, np.inf), axis=1, kind="stable")
    for b in np.nonzero(deficit)[0]:
        d = int(deficit[b])
        if d > 0:
            masses[b, order_add[b, :d]] += 1
        else:
            row = masses[b]
            while d < 0:
                before = d
                for idx in order_sub[b]:
                    if d == 0:
                        break
                    if row[idx] > 1:
                        row[idx] -= 1
                        d += 1
                if d == before:
                    raise EntropyDomainError("cannot renormalize pmf to integer masses")
    return masses


def tables_from_pmf(
    pmf: np.ndarray, offset: int, precision: int = CDF_PRECISION
) -> list[CdfTable]:
    masses = quantize_pmf(pmf, precision)
    cdf = np.zeros((masses.shape[0], masses.shape[1] + 1), dtype=np.uint32)
    np.cumsum(masses, axis=1, out=cdf[:, 1:])
    return [CdfTable(cdf=row, offset=offset, precision=precision) for row in cdf]


def build_factorized_tables(
    model: FactorizedEntropyModel,
    support: tuple[int, int] = DEFAULT_SUPPORT,
    likelihood_floor: float = LIKELIHOOD_FLOOR,
) -> list[CdfTable]:
    """One CdfTable per channel of the factorized model."""
    pmf = np.maximum(model.integer_pmf(support), likelihood_floor)
    return tables_from_pmf(pmf, offset=support[0])


def gaussian_mixture_pmf(
    weights: np.ndarray,
    means: np.ndarray,
    scales: np.ndarray,
    centers: np.ndarray,
    support: tuple[int, int],
    scale_floor: float = SCALE_FLOOR,
    likelihood_floor: float = LIKELIHOOD_FLOOR,
) -> np.ndarray:
    """[B, S] pmf of symbols s in `support` where the coded value is s + center.

    weights/means/scales are [B, K]; centers [B] is the per-element rounding
    center (mixture expectation for mean-centered quantization). Tail mass
    beyond the support folds into the edge symbols.
    """
    lo, hi = support
    if hi < lo:
        raise ValueError("empty support range")
    weights = np.asarray(weights, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    scales = np.maximum(np.asarray(scales, dtype=np.float64), scale_floor)
    centers = np.asarray(centers, dtype=np.float64)

    edges = np.arange(lo, hi + 2, dtype=np.float64) - 0.5  # S+1 bin edges
    # value of edge e for element b, component k: centers[b] + edges[e] - means[b,k]
    z = (centers[:, None, None] + edges[None, None, :] - means[:, :, None]) / scales[
        :, :, None
    ]
    cdf = ndtr(z)  # [B, K, S+1]
    cdf[:, :, 0] = 0.0
    cdf[:, :, -1] = 1.0  # fold tails into the edge bins
    pmf = np.einsum("bk,bks->bs", weights, np.diff(cdf, axis=2))
    if not np.all(np.isfinite(pmf)):
        raise EntropyDomainError("mixture parameters produced non-finite pmf")
    return np.maximum(pmf, likelihood_floor)


def build_gaussian_tables(
    weights: np.ndarray,
    means: np.ndarray,
    scales: np.ndarray,
    centers: np.ndarray,
    support: tuple[int, int] = DEFAULT_SUPPORT,
) -> list[CdfTable]:
    """Per-element CdfTables for a batch of Gaussian mixtures."""
    pmf = gaussian_mixture_pmf(weights, means, scales, centers, support)
    return tables_from_pmf(pmf, offset=support[0])
