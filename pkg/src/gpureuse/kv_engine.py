"""On-demand KV cache allocation on top of a :class:`ReuseStore`.

Each request owns a block table (logical block -> physical block number).
Physical blocks are single KV regions in the shared pool; the address table
records where each PBN lives. Blocks of finished requests go to a LIFO free
list and are reused before the pool is asked for more. When the pool has no
hole large enough for a block, unpinned tensors of inactive models are
evicted in minimal-cost order (no compaction on this path).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .core_model import StatsTable
from .errors import ConfigError, PoolExhausted
from .packing import EvictionCandidate
from .reuse_store import ReuseStore

BLOCK_SIZES = (8, 16, 32)


@dataclass
class KvBlockTable:
    request_id: int
    block_size_tokens: int = 16
    lbn_to_pbn: list[int] = field(default_factory=list)
    token_count: int = 0

    def blocks_for(self, tokens: int) -> int:
        return -(-tokens // self.block_size_tokens)


@dataclass
class AllocRecord:
    sim_time: float
    request_id: int
    blocks_allocated: int
    source: str  # free_list | pool | reclaim


class KvEngine:
    def __init__(self, store: ReuseStore, model_id: str, bytes_per_token: int,
                 block_size_tokens: int = 16, stats: StatsTable | None = None,
                 log_allocations: bool = False):
        if block_size_tokens not in BLOCK_SIZES:
            raise ConfigError(f"block size must be one of {BLOCK_SIZES}, got {block_size_tokens}")
        if bytes_per_token <= 0:
            raise ConfigError("bytes_per_token must be positive")
        self.store = store
        self.model_id = model_id
        self.block_size_tokens = block_size_tokens
        self.block_bytes = block_size_tokens * bytes_per_token
        self.stats = stats
        self.tables: dict[int, KvBlockTable] = {}
        self.address_table: dict[int, tuple[int, int]] = {}
        self.free_list: list[int] = []
        self._next_pbn = 0
        self.pool_calls = 0
        self.reclaim_calls = 0
        self.reclaimed_bytes = 0
        self.alloc_events = 0
        self.high_water_blocks = 0
        self.log_allocations = log_allocations
        self.alloc_log: list[AllocRecord] = []
        self.slab: list[tuple[int, int]] = []
        self.slab_blocks = 0

    # -- accounting -------------------------------------------------------------

    @property
    def owned_blocks(self) -> int:
        return len(self.address_table)

    @property
    def owned_bytes(self) -> int:
        return (self.owned_blocks + self.slab_blocks) * self.block_bytes

    @property
    def mapped_blocks(self) -> int:
        return sum(len(t.lbn_to_pbn) for t in self.tables.values())

    def new_table(self, request_id: int) -> KvBlockTable:
        if request_id in self.tables:
            raise ConfigError(f"request {request_id} already has a block table")
        table = KvBlockTable(request_id, self.block_size_tokens)
        self.tables[request_id] = table
        return table

    def _log(self, now: float, request_id: int, n: int, source: str):
        if self.log_allocations and n:
            self.alloc_log.append(AllocRecord(now, request_id, n, source))

    # -- pool access ------------------------------------------------------------

    def _hostable_blocks(self) -> int:
        return sum(r.size // self.block_bytes for r in self.store.regions.free_regions())

    def urgent_reclaim(self, needed_blocks: int) -> int:
        """Evict unpinned tensors, cheapest first, until ``needed_blocks`` fit.

        Returns the number of blocks the pool can now host.
        """
        self.reclaim_calls += 1
        have = self._hostable_blocks()
        if have >= needed_blocks:
            return have
        candidates = sorted(self.store.eviction_candidates(self.stats), key=EvictionCandidate.sort_key)
        for cand in candidates:
            self.store.evict_tensor(cand.tensor)
            self.reclaimed_bytes += cand.size
            have = self._hostable_blocks()
            if have >= needed_blocks:
                return have
        raise PoolExhausted(f"{self.model_id}: {needed_blocks} KV blocks needed, "
                            f"pool can host {have} after evicting every unpinned tensor")

    def _pool_allocate(self, demands: Sequence[tuple[KvBlockTable, int]], now: float) -> list[list[int]]:
        """One Block Allocator invocation serving several demands in order."""
        self.pool_calls += 1
        out: list[list[int]] = []
        for table, n in demands:
            got: list[int] = []
            reclaimed = False
            for k in range(n):
                off = self.store.alloc_kv_block(self._next_pbn, self.block_bytes)
                if off is None:
                    self.urgent_reclaim(n - k)
                    reclaimed = True
                    off = self.store.alloc_kv_block(self._next_pbn, self.block_bytes)
                    if off is None:
                        raise PoolExhausted(f"{self.model_id}: no hole for a KV block after reclaim")
                pbn = self._next_pbn
                self._next_pbn += 1
                self.address_table[pbn] = (off, self.block_bytes)
                got.append(pbn)
            self._log(now, table.request_id, len(got), "reclaim" if reclaimed else "pool")
            out.append(got)
        return out

    def _take(self, table: KvBlockTable, n: int, now: float) -> list[int]:
        k = min(n, len(self.free_list))
        taken = [self.free_list.pop() for _ in range(k)]
        self._log(now, table.request_id, k, "free_list")
        return taken

    def _commit(self, table: KvBlockTable, pbns: list[int], new_token_count: int):
        table.lbn_to_pbn.extend(pbns)
        table.token_count = new_token_count
        if pbns:
            self.alloc_events += 1
        self.high_water_blocks = max(self.high_water_blocks, self.mapped_blocks)

    # -- public operations ----------------------------------------------------

    def ensure_capacity(self, table: KvBlockTable, new_token_count: int, now: float = 0.0) -> list[int]:
        """Grow ``table`` to cover ``new_token_count`` tokens; returns new PBNs."""
        if new_token_count < table.token_count:
            raise ValueError("token count cannot shrink")
        n = table.blocks_for(new_token_count) - len(table.lbn_to_pbn)
        pbns = self._take(table, n, now) if n > 0 else []
        if n > len(pbns):
            pbns += self._pool_allocate([(table, n - len(pbns))], now)[0]
        self._commit(table, pbns, new_token_count)
        return pbns

    def batch_allocate(self, items: Sequence[tuple[KvBlockTable, int]], now: float = 0.0) -> list[list[int]]:
        """Same end state as calling :meth:`ensure_capacity` per item in order,
        with at most one pool invocation. All-or-nothing on failure."""
        tokens = {}
        planned = {}
        for table, count in items:
            if count < tokens.get(table.request_id, table.token_count):
                raise ValueError("token count cannot shrink")
            tokens[table.request_id] = count
        free_before = list(self.free_list)
        log_before = len(self.alloc_log)
        taken: list[list[int]] = []
        demands: list[tuple[KvBlockTable, int]] = []
        demand_of: list[int | None] = []
        for table, count in items:
            have = planned.get(table.request_id, len(table.lbn_to_pbn))
            n = max(0, table.blocks_for(count) - have)
            planned[table.request_id] = have + n
            got = self._take(table, n, now) if n else []
            taken.append(got)
            if n > len(got):
                demand_of.append(len(demands))
                demands.append((table, n - len(got)))
            else:
                demand_of.append(None)
        from_pool: list[list[int]] = []
        if demands:
            state = self._checkpoint()
            try:
                from_pool = self._pool_allocate(demands, now)
            except PoolExhausted:
                self._restore(state, free_before)
                del self.alloc_log[log_before:]
                raise
        out = []
        for (table, count), got, d in zip(items, taken, demand_of):
            pbns = got + (from_pool[d] if d is not None else [])
            self._commit(table, pbns, max(count, table.token_count))
            out.append(pbns)
        return out

    def _checkpoint(self):
        return (self.store.checkpoint(), dict(self.address_table), self._next_pbn, self.pool_calls,
                self.reclaim_calls, self.reclaimed_bytes, len(self.alloc_log))

    def _restore(self, state, free_before: list[int]):
        store_state, addr, next_pbn, calls, reclaims, reclaimed, nlog = state
        self.store.restore(store_state)
        self.address_table = addr
        self._next_pbn = next_pbn
        self.pool_calls = calls
        self.reclaim_calls = reclaims
        self.reclaimed_bytes = reclaimed
        del self.alloc_log[nlog:]
        self.free_list = free_before

    def release_request(self, table: KvBlockTable) -> list[int]:
        self.free_list.extend(table.lbn_to_pbn)
        table.lbn_to_pbn = []
        self.tables.pop(table.request_id, None)
        return self.free_list

    def reserve(self, n_blocks: int) -> int:
        """Conventional worst-case reservation of ``n_blocks`` blocks.

        Cached tensors are evicted cheapest first to make room; the
        reservation shrinks to whatever fits once nothing evictable remains.
        It is carved as a few large KV chunks (largest hole first), not one
        region per block. Returns the number of blocks reserved.
        """
        if n_blocks <= 0:
            return 0
        try:
            self.urgent_reclaim(n_blocks)
        except PoolExhausted:
            pass
        got = 0
        while got < n_blocks:
            holes = [r for r in self.store.regions.free_regions() if r.size >= self.block_bytes]
            if not holes:
                break
            hole = max(holes, key=lambda r: (r.size, -r.offset))
            k = min(n_blocks - got, hole.size // self.block_bytes)
            ref = -1 - len(self.slab)
            self.store.carve_kv(hole.offset, k * self.block_bytes, ref)
            self.slab.append((hole.offset, k * self.block_bytes))
            got += k
        self.slab_blocks += got
        return got

    @property
    def reserved_bytes(self) -> int:
        return self.slab_blocks * self.block_bytes

    def instance_teardown(self):
        """Return every KV region to the pool and unpin the model."""
        for off, _ in sorted(list(self.address_table.values()) + self.slab):
            self.store.free_kv_block(off)
        self.address_table.clear()
        self.slab.clear()
        self.slab_blocks = 0
        self.free_list.clear()
        self.tables.clear()
        self.store.unpin(self.model_id)

    def check_invariants(self):
        mapped = [p for t in self.tables.values() for p in t.lbn_to_pbn]
        assert len(mapped) == len(set(mapped)), "PBN mapped twice"
        assert not set(mapped) & set(self.free_list), "free list overlaps active tables"
        assert len(self.free_list) == len(set(self.free_list)), "duplicate PBN in free list"
        assert set(mapped) | set(self.free_list) <= set(self.address_table), "unmapped PBN"
        for t in self.tables.values():
            assert len(t.lbn_to_pbn) == t.blocks_for(t.token_count), f"table {t.request_id} size mismatch"
        kv_regions = {r.ref: r for r in self.store.regions if r.kind == "kv" and r.ref >= 0}
        for pbn, (off, size) in self.address_table.items():
            r = kv_regions.get(pbn)
            assert r is not None and r.offset == off and r.size == size == self.block_bytes, \
                f"address table entry {pbn} disagrees with region list"
