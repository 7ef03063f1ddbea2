"""Hardware configuration shared by the planner, code generator and machine."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace


@dataclass(frozen=True)
class HardwareConfig:
    """Machine dimensions and timing knobs.

    The defaults describe the shipped single-cluster configuration: 4 compute
    units of 4 vector MACs, 16 lanes each, double-banked scratchpads and four
    DMA load units behind a shared 4.2 GB/s memory interface.
    """

    num_cus: int = 4
    vmacs_per_cu: int = 4
    lanes: int = 16
    element_bytes: int = 2

    mbuf_bytes_per_bank: int = 64 * 1024
    mbuf_banks: int = 2
    wbuf_bytes: int = 8 * 1024          # per vMAC, per bank
    wbuf_banks: int = 2
    icache_banks: int = 2
    icache_words_per_bank: int = 512

    load_units: int = 4
    clock_hz: float = 250e6
    mem_bandwidth_bytes_per_s: float = 4.2e9
    dma_latency_cycles: int = 20
    # "per_unit_cap": each active unit streams at bandwidth/load_units.
    # "equal_active": active units split the full bandwidth evenly.
    bw_mode: str = "per_unit_cap"

    forwarding: bool = False            # scalar result forwarding to readers
    ld_queue_depth: int = 8             # outstanding streams per load unit
    trace_queue_depth: int = 16         # vector instructions queued per CU

    max_trace_vectors: int = 2047       # instruction field limit
    acc_guard_products: int = 1 << 15   # compile-time accumulator guard

    mem_bytes: int = 256 * 1024 * 1024  # simulated flat main memory
    program_base: int = 0x1000
    max_cycles: int = 2_000_000_000     # simulation budget

    def __post_init__(self):
        if self.lanes * self.element_bytes * 8 != 256:
            raise ValueError("lanes * element_bytes must cover 256 bits")
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                continue
            # bandwidth 0 is legal: it models a stalled memory interface and
            # surfaces as a cycle-budget diagnostic in the simulator
            if f.name == "mem_bandwidth_bytes_per_s":
                if v < 0:
                    raise ValueError("mem_bandwidth_bytes_per_s must be >= 0")
            elif v <= 0:
                raise ValueError(f"{f.name} must be positive")
        if self.bw_mode not in ("per_unit_cap", "equal_active"):
            raise ValueError(f"unknown bw_mode {self.bw_mode!r}")

    @property
    def vector_bytes(self) -> int:
        return self.lanes * self.element_bytes

    @property
    def vmac_slots(self) -> int:
        return self.num_cus * self.vmacs_per_cu

    @property
    def bank_bytes(self) -> int:
        return self.icache_words_per_bank * 4

    @property
    def bytes_per_cycle(self) -> float:
        return self.mem_bandwidth_bytes_per_s / self.clock_hz

    def with_overrides(self, **kw) -> "HardwareConfig":
        return replace(self, **kw)
