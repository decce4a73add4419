"""Prime-power agent identities, capacity bounds, and consensus tokens.

Each research cluster owns one prime p from a sieved pool; the agent at
depth k carries identity p**k. Identities are collision-free by unique
factorization, so the product of converged identities (the consensus
token) can be factorized back into the exact contributing set with plain
trial division over the pool. All operations here are pure functions on
immutable values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import CapacityError, ForeignFactorError

# Individual identities must fit a signed 64-bit integer; tokens are
# arbitrary precision.
MAX_IDENTITY = 2**63 - 1


@dataclass(frozen=True)
class PrimePool:
    primes: tuple[int, ...]
    sieve_limit: int

    def __contains__(self, p: int) -> bool:
        return p in self.primes

    def __len__(self) -> int:
        return len(self.primes)


@dataclass(frozen=True)
class AgentIdentity:
    cluster_prime: int
    depth: int
    value: int = field(default=0)

    def __post_init__(self):
        if self.value == 0:
            object.__setattr__(self, "value", self.cluster_prime**self.depth)


@dataclass(frozen=True)
class ConsensusToken:
    value: int
    factorization: dict[int, int]

    def to_json(self) -> dict:
        return {
            "value": str(self.value),
            "factorization": {str(p): k for p, k in sorted(self.factorization.items())},
        }


def generate_pool(sieve_limit: int) -> PrimePool:
    """All primes in [3, sieve_limit], ascending. 2 is deliberately excluded."""
    if sieve_limit < 3:
        raise ValueError(f"sieve_limit must be >= 3, got {sieve_limit}")
    sieve = bytearray([1]) * (sieve_limit + 1)
    sieve[0] = sieve[1] = 0
    for n in range(2, int(sieve_limit**0.5) + 1):
        if sieve[n]:
            sieve[n * n :: n] = bytearray(len(sieve[n * n :: n]))
    primes = tuple(n for n in range(3, sieve_limit + 1) if sieve[n])
    return PrimePool(primes=primes, sieve_limit=sieve_limit)


def _is_prime(n: int) -> bool:
    if n < 2:
        return False
    d = 2
    while d * d <= n:
        if n % d == 0:
            return False
        d += 1
    return True


def k_max(p: int) -> int:
    """Largest k with p**k <= 2**63 - 1, by exact integer multiplication."""
    if p < 2:
        raise ValueError(f"prime must be >= 2, got {p}")
    k = 0
    value = 1
    while value * p <= MAX_IDENTITY:
        value *= p
        k += 1
    return k


def assign_identity(cluster_prime: int, depth: int) -> AgentIdentity:
    """Identity p**depth, constrained to the 64-bit identity space."""
    if not _is_prime(cluster_prime):
        raise ValueError(f"cluster_prime must be prime, got {cluster_prime}")
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    cap = k_max(cluster_prime)
    if depth > cap:
        raise CapacityError(
            f"depth {depth} exceeds capacity {cap} for prime {cluster_prime}"
        )
    return AgentIdentity(cluster_prime=cluster_prime, depth=depth)


def verify_identity(n: int, expected_prime: int) -> tuple[bool, int]:
    """Trial-division membership check: divide by the expected prime until
    the residue stops moving; valid iff it reaches 1 after at least one
    division. O(depth) divisions, no I/O.
    """
    if n < 1:
        raise ValueError(f"identity must be >= 1, got {n}")
    if expected_prime < 2:
        raise ValueError(f"expected_prime must be >= 2, got {expected_prime}")
    k = 0
    m = n
    while m % expected_prime == 0:
        m //= expected_prime
        k += 1
    if m == 1 and k > 0:
        return True, k
    return False, 0


def consensus_token(identities: list[AgentIdentity]) -> ConsensusToken:
    """Product of all converged identities; the empty product is 1."""
    value = 1
    factorization: dict[int, int] = {}
    for ident in identities:
        value *= ident.value
        factorization[ident.cluster_prime] = (
            factorization.get(ident.cluster_prime, 0) + ident.depth
        )
    return ConsensusToken(value=value, factorization=factorization)


def factorize_token(token: ConsensusToken | int, pool: PrimePool) -> dict[int, int]:
    """Divide out each pool prime to exhaustion; the residue must reach 1.

    A residue > 1 means the token carries a contribution from outside the
    pool and is rejected.
    """
    value = token.value if isinstance(token, ConsensusToken) else int(token)
    if value < 1:
        raise ValueError(f"token value must be >= 1, got {value}")
    factors: dict[int, int] = {}
    residue = value
    for p in pool.primes:
        while residue % p == 0:
            residue //= p
            factors[p] = factors.get(p, 0) + 1
    if residue > 1:
        raise ForeignFactorError(residue)
    return factors
