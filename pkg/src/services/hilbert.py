# src/services/hilbert.py
"""Sparse operators and density matrices on composite Hilbert spaces.

Tensor index convention: row-major, first factor slowest. For a layout
[F0, F1, ..., Fk] the basis index is i0*d1*...*dk + i1*d2*...*dk + ... + ik.

Qubits use the Pauli-matrix basis: local index 0 is the excited state |1>
(sigma^z = +1), local index 1 is the ground state |0>. Ladder rung n sits at
local index n - n_min; Fock level n sits at local index n.
"""
from functools import reduce
from typing import Annotated, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy import sparse

from src.core.config import settings, logger

# Local single-qubit matrices (index 0 = excited)
SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
SIGMA_PLUS = (SIGMA_X + 1j * SIGMA_Y) / 2
SIGMA_MINUS = (SIGMA_X - 1j * SIGMA_Y) / 2
PROJ_EXCITED = np.array([[1, 0], [0, 0]], dtype=complex)
PROJ_GROUND = np.array([[0, 0], [0, 1]], dtype=complex)

HERMITIAN_FLAG_TOLERANCE = 1e-12


class Qubit(BaseModel):
    model_config = ConfigDict(frozen=True)
    kind: Literal["qubit"] = "qubit"

    @property
    def dim(self) -> int:
        return 2


class Ladder(BaseModel):
    """Truncated window n_min..n_max of the load's equidistant ladder."""
    model_config = ConfigDict(frozen=True)
    kind: Literal["ladder"] = "ladder"
    n_min: int = Field(default_factory=lambda: settings.DEFAULT_N_MIN, description="Lowest retained rung.")
    n_max: int = Field(default_factory=lambda: settings.DEFAULT_N_MAX, description="Highest retained rung.")
    quantum: float = Field(1.0, gt=0, description="Energy E_v between neighbouring rungs.")

    @model_validator(mode="after")
    def _check_window(self):
        if self.n_min >= self.n_max:
            raise ValueError(f"Ladder window is empty: n_min={self.n_min} >= n_max={self.n_max}")
        if not self.n_min < 0 < self.n_max:
            raise ValueError(f"Ladder window must straddle rung 0, got [{self.n_min}, {self.n_max}]")
        return self

    @property
    def dim(self) -> int:
        return self.n_max - self.n_min + 1

    def index(self, n: int) -> int:
        if not self.n_min <= n <= self.n_max:
            raise ValueError(f"Rung {n} outside window [{self.n_min}, {self.n_max}]")
        return n - self.n_min


class FockOscillator(BaseModel):
    """Harmonic oscillator truncated to Fock levels 0..n_max."""
    model_config = ConfigDict(frozen=True)
    kind: Literal["fock"] = "fock"
    n_max: int = Field(..., ge=1, description="Highest retained Fock level.")
    frequency: float = Field(1.0, gt=0, description="Oscillator frequency omega_0.")

    @property
    def dim(self) -> int:
        return self.n_max + 1


Factor = Annotated[Union[Qubit, Ladder, FockOscillator], Field(discriminator="kind")]


class SpaceLayout(BaseModel):
    model_config = ConfigDict(frozen=True)
    factors: Tuple[Factor, ...]

    @field_validator("factors")
    @classmethod
    def _non_empty(cls, factors):
        if len(factors) == 0:
            raise ValueError("A space layout needs at least one factor.")
        return factors

    @model_validator(mode="after")
    def _check_dimension(self):
        if self.dim < 2:
            raise ValueError(f"Total dimension must be at least 2, got {self.dim}")
        return self

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(f.dim for f in self.factors)

    @property
    def dim(self) -> int:
        return int(np.prod(self.dims))

    def factor(self, index: int):
        if not 0 <= index < len(self.factors):
            raise IndexError(f"Factor index {index} out of range for {len(self.factors)} factors")
        return self.factors[index]

    def ladder_index(self) -> int:
        """Position of the (single) load ladder, if any."""
        for i, f in enumerate(self.factors):
            if isinstance(f, Ladder):
                return i
        raise ValueError("Layout has no Ladder factor.")

    def local_indices(self, factor_index: int) -> np.ndarray:
        """Local index of `factor_index` for every global basis index."""
        dims = self.dims
        stride = int(np.prod(dims[factor_index + 1:]))
        return (np.arange(self.dim) // stride) % dims[factor_index]


def _prune(m) -> sparse.csr_matrix:
    m = sparse.csr_matrix(m, dtype=complex)
    m.data[np.abs(m.data) < settings.SPARSE_DROP_TOLERANCE] = 0
    m.eliminate_zeros()
    return m


def _max_abs(m) -> float:
    m = sparse.csr_matrix(m)
    return float(np.max(np.abs(m.data))) if m.nnz else 0.0


class OperatorMatrix(BaseModel):
    """Sparse complex operator on a declared layout."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    layout: SpaceLayout
    entries: sparse.csr_matrix
    hermitian: bool = False

    @field_validator("entries", mode="before")
    @classmethod
    def _to_csr(cls, value):
        return _prune(value)

    @model_validator(mode="after")
    def _check(self):
        if self.entries.shape != (self.layout.dim, self.layout.dim):
            raise ValueError(f"Operator shape {self.entries.shape} does not match layout dimension {self.layout.dim}")
        if self.hermitian:
            asym = _max_abs(self.entries - self.entries.conj().T)
            if asym > HERMITIAN_FLAG_TOLERANCE:
                raise ValueError(f"Operator flagged Hermitian but max|M - M^dag| = {asym:.3e}")
        return self

    @classmethod
    def from_matrix(cls, layout: SpaceLayout, matrix, hermitian: Optional[bool] = None) -> "OperatorMatrix":
        m = _prune(matrix)
        if hermitian is None:
            hermitian = _max_abs(m - m.conj().T) <= HERMITIAN_FLAG_TOLERANCE
        return cls(layout=layout, entries=m, hermitian=hermitian)

    def _check_layout(self, other: "OperatorMatrix"):
        if other.layout != self.layout:
            raise ValueError("Operators live on different layouts.")

    def __add__(self, other: "OperatorMatrix") -> "OperatorMatrix":
        self._check_layout(other)
        return OperatorMatrix.from_matrix(self.layout, self.entries + other.entries)

    def __sub__(self, other: "OperatorMatrix") -> "OperatorMatrix":
        self._check_layout(other)
        return OperatorMatrix.from_matrix(self.layout, self.entries - other.entries)

    def __matmul__(self, other: "OperatorMatrix") -> "OperatorMatrix":
        self._check_layout(other)
        return OperatorMatrix.from_matrix(self.layout, self.entries @ other.entries)

    def __mul__(self, scalar: complex) -> "OperatorMatrix":
        return OperatorMatrix.from_matrix(self.layout, self.entries * scalar)

    __rmul__ = __mul__

    def __neg__(self) -> "OperatorMatrix":
        return self * -1.0

    def dag(self) -> "OperatorMatrix":
        return OperatorMatrix.from_matrix(self.layout, self.entries.conj().T)

    def commutator(self, other: "OperatorMatrix") -> "OperatorMatrix":
        return self @ other - other @ self

    def anticommutator(self, other: "OperatorMatrix") -> "OperatorMatrix":
        return self @ other + other @ self

    def max_abs(self, mask: Optional[np.ndarray] = None) -> float:
        """Largest entry magnitude, optionally restricted to rows/columns in `mask`."""
        m = self.entries
        if mask is not None:
            idx = np.flatnonzero(mask)
            m = m[idx][:, idx]
        return _max_abs(m)

    def to_dense(self) -> np.ndarray:
        return self.entries.toarray()

    @property
    def is_diagonal(self) -> bool:
        off = self.entries - sparse.diags(self.entries.diagonal())
        return _max_abs(off) == 0.0


def identity(layout: SpaceLayout) -> OperatorMatrix:
    return OperatorMatrix(layout=layout, entries=sparse.identity(layout.dim, dtype=complex, format="csr"), hermitian=True)


class DensityState(BaseModel):
    """Hermitian, unit-trace state. Positivity is checked on demand only."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    layout: SpaceLayout
    matrix: np.ndarray

    @field_validator("matrix", mode="before")
    @classmethod
    def _to_dense(cls, value):
        if sparse.issparse(value):
            value = value.toarray()
        return np.asarray(value, dtype=complex)

    @model_validator(mode="after")
    def _check(self):
        dim = self.layout.dim
        if self.matrix.shape != (dim, dim):
            raise ValueError(f"State shape {self.matrix.shape} does not match layout dimension {dim}")
        trace = np.trace(self.matrix)
        if abs(trace - 1.0) > settings.TRACE_TOLERANCE:
            raise ValueError(f"State trace is {trace:.12g}, expected 1")
        asym = float(np.max(np.abs(self.matrix - self.matrix.conj().T)))
        if asym > settings.HERMITIAN_TOLERANCE:
            raise ValueError(f"State is not Hermitian: max|rho - rho^dag| = {asym:.3e}")
        return self

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.matrix)[0])

    def check_positive(self, tolerance: Optional[float] = None) -> bool:
        tolerance = settings.POSITIVITY_TOLERANCE if tolerance is None else tolerance
        lowest = self.min_eigenvalue()
        if lowest < -tolerance:
            logger.warning(f"State has negative eigenvalue {lowest:.3e}")
            return False
        return True


def build_space(factors: Sequence) -> SpaceLayout:
    """Compose a layout; first factor is the slowest tensor index."""
    layout = SpaceLayout(factors=tuple(factors))
    logger.debug(f"Built layout with dims {layout.dims} (total {layout.dim})")
    return layout


def embed(local_op, factor_index: int, layout: SpaceLayout) -> OperatorMatrix:
    """Lift a single-factor operator to the full space (identity elsewhere)."""
    factor = layout.factor(factor_index)
    local = sparse.csr_matrix(local_op, dtype=complex)
    if local.shape != (factor.dim, factor.dim):
        raise ValueError(f"Local operator shape {local.shape} does not match factor dimension {factor.dim}")
    dims = layout.dims
    left = int(np.prod(dims[:factor_index]))
    right = int(np.prod(dims[factor_index + 1:]))
    full = sparse.kron(sparse.identity(left, format="csr"),
                       sparse.kron(local, sparse.identity(right, format="csr"), format="csr"),
                       format="csr")
    return OperatorMatrix.from_matrix(layout, full)


def embed_product(local_ops: dict, layout: SpaceLayout) -> OperatorMatrix:
    """Tensor product of several local operators given as {factor_index: matrix}."""
    mats = []
    for i, f in enumerate(layout.factors):
        op = local_ops.get(i)
        mats.append(sparse.csr_matrix(op, dtype=complex) if op is not None else sparse.identity(f.dim, format="csr"))
    full = reduce(lambda a, b: sparse.kron(a, b, format="csr"), mats)
    return OperatorMatrix.from_matrix(layout, full)


def _ladder_matrices(ladder: Ladder) -> Tuple[sparse.csr_matrix, sparse.csr_matrix]:
    rungs = np.arange(ladder.n_min, ladder.n_max + 1)
    w = sparse.diags(rungs * ladder.quantum).astype(complex)
    # A|n> = |n-1>; the column of |n_min> is empty (truncation edge)
    a = sparse.diags(np.ones(ladder.dim - 1), offsets=1).astype(complex)
    return sparse.csr_matrix(w), sparse.csr_matrix(a)


def ladder_ops(layout: SpaceLayout, factor_index: int) -> Tuple[OperatorMatrix, OperatorMatrix]:
    """Load energy W = sum n E_v |n><n| and lowering A = sum |n-1><n| on the window."""
    factor = layout.factor(factor_index)
    if not isinstance(factor, Ladder):
        raise ValueError(f"Factor {factor_index} is a {factor.kind}, not a ladder")
    w, a = _ladder_matrices(factor)
    return embed(w, factor_index, layout), embed(a, factor_index, layout)


def oscillator_ops(layout: SpaceLayout, factor_index: int) -> Tuple[OperatorMatrix, OperatorMatrix]:
    """Annihilation operator a and number operator a^dag a on a truncated Fock space."""
    factor = layout.factor(factor_index)
    if not isinstance(factor, FockOscillator):
        raise ValueError(f"Factor {factor_index} is a {factor.kind}, not a Fock oscillator")
    levels = np.arange(factor.dim)
    a = sparse.diags(np.sqrt(levels[1:]), offsets=1).astype(complex)
    n = sparse.diags(levels).astype(complex)
    return embed(a, factor_index, layout), embed(n, factor_index, layout)


def edge_mask(layout: SpaceLayout, factor_index: int, rungs: int) -> np.ndarray:
    """Basis states whose ladder/oscillator index lies within `rungs` of either window edge."""
    local = layout.local_indices(factor_index)
    dim = layout.factor(factor_index).dim
    return (local < rungs) | (local >= dim - rungs)


def interior_mask(layout: SpaceLayout, factor_index: Optional[int] = None, margin: int = 1) -> np.ndarray:
    """Complement of `edge_mask`; the whole space when there is no ladder."""
    if factor_index is None:
        try:
            factor_index = layout.ladder_index()
        except ValueError:
            return np.ones(layout.dim, dtype=bool)
    return ~edge_mask(layout, factor_index, margin)


def expectation(state: DensityState, op: OperatorMatrix) -> Union[float, complex]:
    """Tr(rho O); real for Hermitian operators."""
    if state.layout != op.layout:
        raise ValueError("State and operator live on different layouts.")
    value = complex(op.entries.multiply(state.matrix.T).sum())
    if op.hermitian:
        if abs(value.imag) <= 1e-10:
            return value.real
        logger.warning(f"Hermitian expectation value has imaginary part {value.imag:.3e}")
    return value


def reduce_matrix(matrix: np.ndarray, dims: Sequence[int], keep: Iterable[int]) -> np.ndarray:
    """Trace a dims-shaped operator down to the kept factors (kept in layout order); no state checks."""
    keep = sorted(set(keep))
    n = len(dims)
    if not keep:
        raise ValueError("partial_trace needs at least one factor to keep.")
    if keep[0] < 0 or keep[-1] >= n:
        raise ValueError(f"Kept factors {keep} not in range 0..{n - 1}")
    dims = tuple(dims)
    rho = np.asarray(matrix).reshape(dims + dims)
    current = n
    for i in sorted(set(range(n)) - set(keep), reverse=True):
        rho = np.trace(rho, axis1=i, axis2=i + current)
        current -= 1
    kept_dim = int(np.prod([dims[i] for i in keep]))
    return rho.reshape(kept_dim, kept_dim)


def partial_trace(state: DensityState, keep: Iterable[int]) -> DensityState:
    """Reduced state on the kept factors (kept in layout order)."""
    keep = sorted(set(keep))
    reduced = reduce_matrix(state.matrix, state.layout.dims, keep)
    layout = SpaceLayout(factors=tuple(state.layout.factors[i] for i in keep))
    return DensityState(layout=layout, matrix=reduced)


def thermal_qubit(beta_energy: float) -> np.ndarray:
    """Local Gibbs state exp(-beta E sigma^z / 2) / Z."""
    x = beta_energy / 2
    # normalise against the larger weight to stay finite at large beta*E
    weights = np.exp(np.array([-x, x]) - abs(x))
    return np.diag(weights / weights.sum()).astype(complex)


def rung_projector(ladder: Ladder, n: int) -> np.ndarray:
    proj = np.zeros((ladder.dim, ladder.dim), dtype=complex)
    i = ladder.index(n)
    proj[i, i] = 1.0
    return proj


def product_state(layout: SpaceLayout, local_states: List[np.ndarray]) -> DensityState:
    if len(local_states) != len(layout.factors):
        raise ValueError(f"Expected {len(layout.factors)} local states, got {len(local_states)}")
    matrix = reduce(np.kron, [np.asarray(s, dtype=complex) for s in local_states])
    return DensityState(layout=layout, matrix=matrix)
