//! Pooled symmetric memory shared by all simulated ranks.
//!
//! Every rank owns one byte slice with an identical symbol layout, so a
//! symbol name plus a rank id resolves to a concrete remote address. A slice
//! is a control prefix (count buffers, address slots — registered first by
//! the pipelines) followed by bump-allocated payload windows. Wait flags and
//! the world barrier are modeled as structured slots rather than raw words.
//!
//! Visibility is not immediate: a remote write only becomes readable after
//! the writer synchronizes (flag set or barrier) and the reader has observed
//! that event. In checked mode the pool tracks this with per-rank vector
//! clocks and a per-row write record, and a read that is not ordered after
//! the write fails deterministically (`ReadBeforeReady`), as does a second
//! write to the same row in one phase (`DoubleWrite`). Fast mode skips the
//! bookkeeping.
//!
//! Two execution modes drive the per-rank workers: free-running OS threads
//! with a timeout-based deadlock detector, and a deterministic single-stepped
//! round-robin schedule (each rank runs until it blocks, then the turn moves
//! to the next runnable rank). Correct pipelines produce identical outputs
//! and identical traffic totals in both.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use crate::error::{Result, SimError};
use crate::metrics::{MetricsReport, MetricsSink, Phase, TrafficClass};

/// How the per-rank workers are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    /// One OS thread per rank; blocking waits carry a timeout so a missing
    /// participant surfaces as a deadlock error instead of a hang.
    Threaded { timeout_ms: u64 },
    /// Deterministic single-stepped schedule: one rank runs until it blocks
    /// or finishes, then the turn passes round-robin to the next runnable
    /// rank. An unsatisfiable wait is detected immediately.
    RoundRobin,
}

impl ExecMode {
    pub fn threaded_default() -> Self {
        ExecMode::Threaded { timeout_ms: 10_000 }
    }
}

/// One named symbol in the slice layout.
#[derive(Debug, Clone)]
pub struct SymbolSpec {
    pub name: String,
    pub bytes: usize,
    pub row_bytes: usize,
    pub class: TrafficClass,
}

impl SymbolSpec {
    pub fn new(name: &str, bytes: usize, row_bytes: usize, class: TrafficClass) -> Self {
        SymbolSpec {
            name: name.to_string(),
            bytes,
            row_bytes,
            class,
        }
    }
}

/// A dereferenceable view of (a sub-range of) one rank's copy of a symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowHandle {
    pub rank: usize,
    sym: usize,
    /// Byte offset of the whole symbol (row records are kept per symbol).
    base: usize,
    pub symbol: String,
    /// Absolute byte offset within the owning slice.
    pub offset: usize,
    pub bytes: usize,
    pub row_bytes: usize,
    pub class: TrafficClass,
}

impl WindowHandle {
    pub fn rows(&self) -> usize {
        if self.row_bytes == 0 {
            0
        } else {
            self.bytes / self.row_bytes
        }
    }

    /// Narrow the handle to `nrows` rows starting at `start`.
    pub fn subrows(&self, start: usize, nrows: usize) -> Result<WindowHandle> {
        if start + nrows > self.rows() {
            return Err(SimError::RowOutOfRange {
                symbol: self.symbol.clone(),
                row: start + nrows,
                rows: self.rows(),
            });
        }
        Ok(WindowHandle {
            rank: self.rank,
            sym: self.sym,
            base: self.base,
            symbol: self.symbol.clone(),
            offset: self.offset + start * self.row_bytes,
            bytes: nrows * self.row_bytes,
            row_bytes: self.row_bytes,
            class: self.class,
        })
    }

    fn book_row(&self, row: usize) -> usize {
        (self.offset - self.base) / self.row_bytes + row
    }
}

type VClock = Vec<u64>;

fn vc_join(dst: &mut VClock, src: &[u64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        if s > *d {
            *d = s;
        }
    }
}

#[derive(Clone)]
struct RowRecord {
    writer: usize,
    step: u64,
    phase: u8,
    /// The writer's own clock component at write time. The write is visible
    /// to a reader iff the reader has (transitively) acquired a release the
    /// writer issued afterwards, i.e. `epoch < reader_clock[writer]`.
    epoch: u64,
}

struct SliceMem {
    bytes: Vec<u8>,
    /// One write-record book per symbol, indexed by symbol id.
    books: Vec<Vec<Option<RowRecord>>>,
}

struct SymbolEntry {
    name: String,
    offset: usize,
    bytes: usize,
    row_bytes: usize,
    class: TrafficClass,
}

struct PendingAlloc {
    bytes: usize,
    row_bytes: usize,
    class: TrafficClass,
    arrivals: usize,
}

struct Registry {
    symbols: Vec<SymbolEntry>,
    by_name: HashMap<String, usize>,
    heap_top: usize,
    pending: HashMap<String, PendingAlloc>,
}

#[derive(Clone, Debug)]
enum WaitCond {
    Flag {
        owner: usize,
        symbol: String,
        min: u64,
    },
    Barrier {
        gen: u64,
    },
}

#[derive(Clone, Debug)]
enum RankStatus {
    Active,
    Blocked(WaitCond),
    Done,
}

struct FlagSlot {
    value: u64,
    clock: VClock,
}

struct Coord {
    clocks: Vec<VClock>,
    flags: HashMap<(usize, String), FlagSlot>,
    barrier_gen: u64,
    barrier_arrived: usize,
    barrier_join: VClock,
    status: Vec<RankStatus>,
    turn: usize,
    poison: Option<SimError>,
}

impl Coord {
    fn cond_satisfied(&self, cond: &WaitCond) -> bool {
        match cond {
            WaitCond::Flag { owner, symbol, min } => self
                .flags
                .get(&(*owner, symbol.clone()))
                .map(|s| s.value >= *min)
                .unwrap_or(false),
            WaitCond::Barrier { gen } => self.barrier_gen > *gen,
        }
    }

    /// Re-activate every blocked rank whose condition now holds.
    fn requalify(&mut self) {
        for r in 0..self.status.len() {
            if let RankStatus::Blocked(cond) = &self.status[r] {
                if self.cond_satisfied(&cond.clone()) {
                    self.status[r] = RankStatus::Active;
                }
            }
        }
    }

    fn describe_blocked(&self) -> String {
        let parts: Vec<String> = self
            .status
            .iter()
            .enumerate()
            .filter_map(|(r, s)| match s {
                RankStatus::Blocked(WaitCond::Flag { owner, symbol, min }) => Some(format!(
                    "rank {r} waiting for flag `{symbol}`@rank{owner} >= {min}"
                )),
                RankStatus::Blocked(WaitCond::Barrier { .. }) => {
                    Some(format!("rank {r} waiting at barrier"))
                }
                _ => None,
            })
            .collect();
        parts.join("; ")
    }
}

pub const FLAG_WORD_BYTES: u64 = 8;

const SYMBOL_ALIGN: usize = 64;

fn align_up(v: usize) -> usize {
    v.div_ceil(SYMBOL_ALIGN) * SYMBOL_ALIGN
}

pub struct PoolOptions {
    pub num_ranks: usize,
    /// Upper bound on bytes registered per slice. Backing memory grows
    /// lazily to what is actually registered, so a generous worst-case
    /// budget costs nothing.
    pub slice_budget: usize,
    pub exec: ExecMode,
    /// Validate visibility ordering and single-writer discipline per row.
    pub checked: bool,
}

pub struct SymmetricPool {
    world: usize,
    slice_budget: usize,
    exec: ExecMode,
    checked: bool,
    phases: Vec<AtomicU8>,
    step: AtomicU64,
    slices: Vec<Mutex<SliceMem>>,
    registry: Mutex<Registry>,
    coord: Mutex<Coord>,
    cv: Condvar,
    metrics: MetricsSink,
}

impl std::fmt::Debug for SymmetricPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SymmetricPool")
            .field("world", &self.world)
            .field("slice_budget", &self.slice_budget)
            .field("exec", &self.exec)
            .field("checked", &self.checked)
            .finish_non_exhaustive()
    }
}

impl SymmetricPool {
    /// Create the pool and register the initial symbol layout identically on
    /// every rank. All state words start zeroed.
    pub fn bootstrap(opts: PoolOptions, layout: &[SymbolSpec]) -> Result<Arc<SymmetricPool>> {
        if opts.num_ranks == 0 {
            return Err(SimError::InvalidConfig("world size must be >= 1".into()));
        }
        let pool = SymmetricPool {
            world: opts.num_ranks,
            slice_budget: opts.slice_budget,
            exec: opts.exec,
            checked: opts.checked,
            phases: (0..opts.num_ranks)
                .map(|_| AtomicU8::new(Phase::Layout.index() as u8))
                .collect(),
            step: AtomicU64::new(0),
            slices: (0..opts.num_ranks)
                .map(|_| {
                    Mutex::new(SliceMem {
                        bytes: Vec::new(),
                        books: Vec::new(),
                    })
                })
                .collect(),
            registry: Mutex::new(Registry {
                symbols: Vec::new(),
                by_name: HashMap::new(),
                heap_top: 0,
                pending: HashMap::new(),
            }),
            coord: Mutex::new(Coord {
                clocks: vec![vec![0; opts.num_ranks]; opts.num_ranks],
                flags: HashMap::new(),
                barrier_gen: 0,
                barrier_arrived: 0,
                barrier_join: vec![0; opts.num_ranks],
                status: vec![RankStatus::Active; opts.num_ranks],
                turn: 0,
                poison: None,
            }),
            cv: Condvar::new(),
            metrics: MetricsSink::new(opts.num_ranks),
        };
        for spec in layout {
            pool.register_symbol(spec)?;
        }
        Ok(Arc::new(pool))
    }

    pub fn world(&self) -> usize {
        self.world
    }

    pub fn exec_mode(&self) -> ExecMode {
        self.exec
    }

    pub fn checked(&self) -> bool {
        self.checked
    }

    pub fn metrics(&self) -> &MetricsSink {
        &self.metrics
    }

    pub fn snapshot_metrics(&self) -> MetricsReport {
        self.metrics.snapshot()
    }

    fn register_symbol(&self, spec: &SymbolSpec) -> Result<usize> {
        let mut reg = self.registry.lock().unwrap();
        self.register_symbol_locked(&mut reg, spec)
    }

    fn register_symbol_locked(&self, reg: &mut Registry, spec: &SymbolSpec) -> Result<usize> {
        if spec.row_bytes == 0 {
            return Err(SimError::InvalidConfig(format!(
                "symbol `{}` has zero row_bytes",
                spec.name
            )));
        }
        if spec.bytes % spec.row_bytes != 0 {
            return Err(SimError::InvalidConfig(format!(
                "symbol `{}`: {} bytes not a multiple of row size {}",
                spec.name, spec.bytes, spec.row_bytes
            )));
        }
        if reg.by_name.contains_key(&spec.name) {
            return Err(SimError::DuplicateSymbol(spec.name.clone()));
        }
        let offset = reg.heap_top;
        if offset + spec.bytes > self.slice_budget {
            return Err(SimError::SliceOverflow {
                symbol: spec.name.clone(),
                requested: spec.bytes,
                available: self.slice_budget - offset,
            });
        }
        let id = reg.symbols.len();
        reg.symbols.push(SymbolEntry {
            name: spec.name.clone(),
            offset,
            bytes: spec.bytes,
            row_bytes: spec.row_bytes,
            class: spec.class,
        });
        reg.by_name.insert(spec.name.clone(), id);
        reg.heap_top = align_up(offset + spec.bytes);
        let rows = spec.bytes / spec.row_bytes;
        for slice in &self.slices {
            let mut mem = slice.lock().unwrap();
            mem.bytes.resize(reg.heap_top, 0);
            mem.books.push(vec![None; rows]);
        }
        Ok(id)
    }

    /// Names and classes of every registered symbol, in registration order —
    /// the communicator-state inventory assertions count these.
    pub fn registered_symbols(&self) -> Vec<(String, TrafficClass)> {
        let reg = self.registry.lock().unwrap();
        reg.symbols
            .iter()
            .map(|e| (e.name.clone(), e.class))
            .collect()
    }

    /// Resolve `symbol` on `rank`. Symmetric layout: the offset is the same
    /// on every rank.
    pub fn window(&self, symbol: &str, rank: usize) -> Result<WindowHandle> {
        self.check_rank(rank)?;
        let reg = self.registry.lock().unwrap();
        let &id = reg
            .by_name
            .get(symbol)
            .ok_or_else(|| SimError::UnknownSymbol(symbol.to_string()))?;
        let e = &reg.symbols[id];
        Ok(WindowHandle {
            rank,
            sym: id,
            base: e.offset,
            symbol: e.name.clone(),
            offset: e.offset,
            bytes: e.bytes,
            row_bytes: e.row_bytes,
            class: e.class,
        })
    }

    /// Resolve a raw (offset, length) pair — e.g. an address another rank
    /// published — back to a registered window. The range must sit inside
    /// one symbol and start on a row boundary.
    pub fn window_at(
        &self,
        rank: usize,
        offset: usize,
        bytes: usize,
        row_bytes: usize,
    ) -> Result<WindowHandle> {
        self.check_rank(rank)?;
        let reg = self.registry.lock().unwrap();
        for (id, e) in reg.symbols.iter().enumerate() {
            if offset >= e.offset && offset + bytes <= e.offset + e.bytes {
                if row_bytes != e.row_bytes || (offset - e.offset) % e.row_bytes != 0 {
                    break;
                }
                return Ok(WindowHandle {
                    rank,
                    sym: id,
                    base: e.offset,
                    symbol: e.name.clone(),
                    offset,
                    bytes,
                    row_bytes,
                    class: e.class,
                });
            }
        }
        Err(SimError::UnregisteredWindow {
            rank,
            offset,
            len: bytes,
        })
    }

    /// Symmetric allocation performed by all ranks together: every rank must
    /// call with identical arguments; the first caller stages the request,
    /// the last arrival commits the symbol, and the embedded barrier releases
    /// everyone with the window registered.
    pub fn collective_alloc(
        &self,
        rank: usize,
        symbol: &str,
        bytes: usize,
        row_bytes: usize,
        class: TrafficClass,
    ) -> Result<WindowHandle> {
        self.check_rank(rank)?;
        {
            let mut reg = self.registry.lock().unwrap();
            if reg.by_name.contains_key(symbol) {
                return Err(SimError::DuplicateSymbol(symbol.to_string()));
            }
            match reg.pending.get_mut(symbol) {
                None => {
                    reg.pending.insert(
                        symbol.to_string(),
                        PendingAlloc {
                            bytes,
                            row_bytes,
                            class,
                            arrivals: 1,
                        },
                    );
                }
                Some(p) => {
                    if p.bytes != bytes || p.row_bytes != row_bytes || p.class != class {
                        return Err(SimError::AllocMismatch {
                            symbol: symbol.to_string(),
                            detail: format!(
                                "rank {rank} asked for {bytes}x{row_bytes} {class:?}, \
                                 earlier arrival asked for {}x{} {:?}",
                                p.bytes, p.row_bytes, p.class
                            ),
                        });
                    }
                    p.arrivals += 1;
                    if p.arrivals == self.world {
                        let p = reg.pending.remove(symbol).unwrap();
                        self.register_symbol_locked(
                            &mut reg,
                            &SymbolSpec {
                                name: symbol.to_string(),
                                bytes: p.bytes,
                                row_bytes: p.row_bytes,
                                class: p.class,
                            },
                        )?;
                    }
                }
            }
        }
        if self.world == 1 {
            // Single rank: commit immediately (the arrival above staged it).
            let mut reg = self.registry.lock().unwrap();
            if !reg.by_name.contains_key(symbol) {
                let p = reg.pending.remove(symbol).unwrap();
                self.register_symbol_locked(
                    &mut reg,
                    &SymbolSpec {
                        name: symbol.to_string(),
                        bytes: p.bytes,
                        row_bytes: p.row_bytes,
                        class: p.class,
                    },
                )?;
            }
        }
        self.barrier(rank)?;
        self.window(symbol, rank)
    }

    fn check_rank(&self, rank: usize) -> Result<()> {
        if rank >= self.world {
            return Err(SimError::RankOutOfRange {
                rank,
                world: self.world,
            });
        }
        Ok(())
    }

    pub fn begin_phase(&self, rank: usize, phase: Phase) {
        self.phases[rank].store(phase.index() as u8, Ordering::Relaxed);
    }

    pub fn current_phase(&self, rank: usize) -> Phase {
        Phase::from_index(self.phases[rank].load(Ordering::Relaxed) as usize)
    }

    /// Advance the global step counter (driver-side, between repeated
    /// pipeline executions over the same windows).
    pub fn begin_step(&self) -> u64 {
        self.step.fetch_add(1, Ordering::SeqCst) + 1
    }

    pub fn current_step(&self) -> u64 {
        self.step.load(Ordering::Relaxed)
    }

    /// Record a fatal error so every blocked worker fails fast instead of
    /// hanging.
    pub fn poison(&self, err: SimError) {
        let mut g = self.coord.lock().unwrap();
        if g.poison.is_none() {
            g.poison = Some(err);
        }
        self.cv.notify_all();
    }

    fn validate_access(&self, win: &WindowHandle, row: usize, len: usize) -> Result<()> {
        self.check_rank(win.rank)?;
        if row >= win.rows() {
            return Err(SimError::RowOutOfRange {
                symbol: win.symbol.clone(),
                row,
                rows: win.rows(),
            });
        }
        if len != win.row_bytes {
            return Err(SimError::RowSizeMismatch {
                symbol: win.symbol.clone(),
                expected: win.row_bytes,
                got: len,
            });
        }
        Ok(())
    }

    fn clock_of(&self, rank: usize) -> VClock {
        self.coord.lock().unwrap().clocks[rank].clone()
    }

    fn epoch_of(&self, rank: usize) -> u64 {
        self.coord.lock().unwrap().clocks[rank][rank]
    }

    fn write_impl(
        &self,
        src: usize,
        win: &WindowHandle,
        row: usize,
        data: &[u8],
        class: TrafficClass,
        credited: bool,
    ) -> Result<()> {
        self.check_rank(src)?;
        self.validate_access(win, row, data.len())?;
        let phase = self.current_phase(src);
        if self.checked {
            let step = self.current_step();
            let epoch = self.epoch_of(src);
            let mut slice = self.slices[win.rank].lock().unwrap();
            // Row indices are relative to the handle; the book is per symbol.
            let book_row = win.book_row(row);
            let rec = &mut slice.books[win.sym][book_row];
            if let Some(prev) = rec {
                if prev.step == step && prev.phase == phase.index() as u8 {
                    return Err(SimError::DoubleWrite {
                        owner: win.rank,
                        symbol: win.symbol.clone(),
                        row: book_row,
                        first: prev.writer,
                        second: src,
                    });
                }
            }
            *rec = Some(RowRecord {
                writer: src,
                step,
                phase: phase.index() as u8,
                epoch,
            });
            let off = win.offset + row * win.row_bytes;
            slice.bytes[off..off + data.len()].copy_from_slice(data);
        } else {
            let mut slice = self.slices[win.rank].lock().unwrap();
            let off = win.offset + row * win.row_bytes;
            slice.bytes[off..off + data.len()].copy_from_slice(data);
        }
        if credited {
            self.metrics
                .credit_write(src, win.rank, phase, class, data.len() as u64);
        }
        Ok(())
    }

    fn read_impl(
        &self,
        reader: usize,
        win: &WindowHandle,
        row: usize,
        out: &mut [u8],
        credited: bool,
    ) -> Result<()> {
        self.check_rank(reader)?;
        self.validate_access(win, row, out.len())?;
        let phase = self.current_phase(reader);
        if self.checked {
            let my_clock = self.clock_of(reader);
            let slice = self.slices[win.rank].lock().unwrap();
            let book_row = win.book_row(row);
            match &slice.books[win.sym][book_row] {
                None => {
                    return Err(SimError::ReadBeforeReady {
                        reader,
                        owner: win.rank,
                        symbol: win.symbol.clone(),
                        row: book_row,
                    });
                }
                Some(rec) => {
                    // The write must happen-before this read: the reader
                    // needs a release the writer issued after the write.
                    let ordered = reader == rec.writer || rec.epoch < my_clock[rec.writer];
                    if !ordered {
                        return Err(SimError::ReadBeforeReady {
                            reader,
                            owner: win.rank,
                            symbol: win.symbol.clone(),
                            row: book_row,
                        });
                    }
                }
            }
            let off = win.offset + row * win.row_bytes;
            out.copy_from_slice(&slice.bytes[off..off + out.len()]);
        } else {
            let slice = self.slices[win.rank].lock().unwrap();
            let off = win.offset + row * win.row_bytes;
            out.copy_from_slice(&slice.bytes[off..off + out.len()]);
        }
        if credited {
            self.metrics
                .credit_read(reader, win.rank, phase, win.class, out.len() as u64);
        }
        Ok(())
    }

    /// Place one row into (possibly another rank's) window. Credited to the
    /// handle's traffic class.
    pub fn remote_write(
        &self,
        src: usize,
        win: &WindowHandle,
        row: usize,
        data: &[u8],
    ) -> Result<()> {
        self.write_impl(src, win, row, data, win.class, true)
    }

    /// Same as `remote_write` but credited to an explicit class (the relay
    /// pipeline writes payload windows under its relay budget).
    pub fn remote_write_as(
        &self,
        src: usize,
        win: &WindowHandle,
        row: usize,
        data: &[u8],
        class: TrafficClass,
    ) -> Result<()> {
        self.write_impl(src, win, row, data, class, true)
    }

    /// Read one row from (possibly another rank's) window.
    pub fn remote_read(
        &self,
        reader: usize,
        win: &WindowHandle,
        row: usize,
        out: &mut [u8],
    ) -> Result<()> {
        self.read_impl(reader, win, row, out, true)
    }

    /// Uncounted access to the caller's own slice (plain local loads/stores:
    /// staging consumption, window snapshots, expert compute). Still fully
    /// visibility-checked.
    pub fn local_read(
        &self,
        rank: usize,
        win: &WindowHandle,
        row: usize,
        out: &mut [u8],
    ) -> Result<()> {
        if rank != win.rank {
            return Err(SimError::InvalidConfig(format!(
                "local_read of rank {} slice from rank {rank}",
                win.rank
            )));
        }
        self.read_impl(rank, win, row, out, false)
    }

    pub fn local_write(
        &self,
        rank: usize,
        win: &WindowHandle,
        row: usize,
        data: &[u8],
    ) -> Result<()> {
        if rank != win.rank {
            return Err(SimError::InvalidConfig(format!(
                "local_write of rank {} slice from rank {rank}",
                win.rank
            )));
        }
        self.write_impl(rank, win, row, data, win.class, false)
    }

    /// Relay-region residency hook (high-water tracking for staged paths):
    /// `bytes` became resident in `owner`'s relay region. The phase label
    /// comes from the caller, whose position in the pipeline is what put the
    /// bytes there — the owner may still be in an earlier phase.
    pub fn relay_occupy(&self, caller: usize, owner: usize, bytes: u64) {
        self.metrics
            .relay_occupy(owner, self.current_phase(caller), bytes);
    }

    pub fn relay_drain(&self, rank: usize) {
        self.metrics.relay_drain(rank);
    }

    /// Publish `value` into the named flag word on `owner`'s slice with
    /// release semantics. Flags are monotone; moving one backwards is an
    /// ordering bug and fails loudly.
    pub fn set_flag(&self, setter: usize, owner: usize, symbol: &str, value: u64) -> Result<()> {
        self.check_rank(setter)?;
        self.check_rank(owner)?;
        let phase = self.current_phase(setter);
        let mut g = self.coord.lock().unwrap();
        if let Some(p) = &g.poison {
            return Err(p.clone());
        }
        let world = self.world;
        if let Some(slot) = g.flags.get(&(owner, symbol.to_string())) {
            if value < slot.value {
                return Err(SimError::FlagRegression {
                    owner,
                    symbol: symbol.to_string(),
                    from: slot.value,
                    to: value,
                });
            }
        }
        // Release: advance own time first, then publish the full clock with
        // the flag so acquirers order after every prior write by the setter.
        g.clocks[setter][setter] += 1;
        let setter_clock = g.clocks[setter].clone();
        let slot = g
            .flags
            .entry((owner, symbol.to_string()))
            .or_insert_with(|| FlagSlot {
                value: 0,
                clock: vec![0; world],
            });
        vc_join(&mut slot.clock, &setter_clock);
        slot.value = value;
        g.requalify();
        drop(g);
        self.cv.notify_all();
        self.metrics
            .credit_write(setter, owner, phase, TrafficClass::Control, FLAG_WORD_BYTES);
        self.metrics.add_sync_event(phase);
        Ok(())
    }

    /// Block until the named flag reaches `min`, acquiring the setter's
    /// clock. Returns the observed value.
    pub fn wait_flag(&self, waiter: usize, owner: usize, symbol: &str, min: u64) -> Result<u64> {
        self.check_rank(waiter)?;
        self.check_rank(owner)?;
        let phase = self.current_phase(waiter);
        let key = (owner, symbol.to_string());
        let deadline = self.wait_deadline();
        let mut g = self.coord.lock().unwrap();
        loop {
            if let Some(p) = &g.poison {
                return Err(p.clone());
            }
            if let Some(slot) = g.flags.get(&key) {
                if slot.value >= min {
                    let value = slot.value;
                    let slot_clock = slot.clock.clone();
                    vc_join(&mut g.clocks[waiter], &slot_clock);
                    drop(g);
                    self.metrics.credit_read(
                        waiter,
                        owner,
                        phase,
                        TrafficClass::Control,
                        FLAG_WORD_BYTES,
                    );
                    return Ok(value);
                }
            }
            g = self.block(
                g,
                waiter,
                WaitCond::Flag {
                    owner,
                    symbol: symbol.to_string(),
                    min,
                },
                deadline,
            )?;
        }
    }

    /// World barrier: release+acquire for every rank, counted once as a sync
    /// event. All clocks join and advance together.
    pub fn barrier(&self, rank: usize) -> Result<()> {
        self.check_rank(rank)?;
        let phase = self.current_phase(rank);
        let deadline = self.wait_deadline();
        let mut g = self.coord.lock().unwrap();
        if let Some(p) = &g.poison {
            return Err(p.clone());
        }
        let my_gen = g.barrier_gen;
        // Release half: advance own time, contribute the clock to the join.
        g.clocks[rank][rank] += 1;
        let my_clock = g.clocks[rank].clone();
        vc_join(&mut g.barrier_join, &my_clock);
        g.barrier_arrived += 1;
        if g.barrier_arrived == self.world {
            // Acquire half for everyone at once.
            let joined = std::mem::replace(&mut g.barrier_join, vec![0; self.world]);
            for r in 0..self.world {
                vc_join(&mut g.clocks[r], &joined);
            }
            g.barrier_gen += 1;
            g.barrier_arrived = 0;
            g.requalify();
            drop(g);
            self.cv.notify_all();
            self.metrics.add_sync_event(phase);
            return Ok(());
        }
        loop {
            g = self.block(g, rank, WaitCond::Barrier { gen: my_gen }, deadline)?;
            if let Some(p) = &g.poison {
                return Err(p.clone());
            }
            if g.barrier_gen > my_gen {
                return Ok(());
            }
        }
    }

    fn wait_deadline(&self) -> Option<Instant> {
        match self.exec {
            ExecMode::Threaded { timeout_ms } => {
                Some(Instant::now() + Duration::from_millis(timeout_ms))
            }
            ExecMode::RoundRobin => None,
        }
    }

    /// Park the calling rank until its wait condition can hold. Threaded
    /// mode sleeps on the condvar with a deadline; round-robin mode hands the
    /// turn to the next runnable rank and detects unsatisfiable waits.
    fn block<'a>(
        &'a self,
        mut g: MutexGuard<'a, Coord>,
        rank: usize,
        cond: WaitCond,
        deadline: Option<Instant>,
    ) -> Result<MutexGuard<'a, Coord>> {
        match self.exec {
            ExecMode::Threaded { .. } => {
                let deadline = deadline.expect("threaded wait carries a deadline");
                let now = Instant::now();
                if now >= deadline {
                    let detail = format!(
                        "rank {rank} timed out: {}",
                        describe_cond(&cond)
                    );
                    g.poison
                        .get_or_insert_with(|| SimError::Deadlock(detail.clone()));
                    drop(g);
                    self.cv.notify_all();
                    return Err(SimError::Deadlock(detail));
                }
                let (g2, _timeout) = self.cv.wait_timeout(g, deadline - now).unwrap();
                Ok(g2)
            }
            ExecMode::RoundRobin => {
                g.status[rank] = RankStatus::Blocked(cond);
                if g.turn == rank {
                    self.pass_turn(&mut g, rank)?;
                }
                self.cv.notify_all();
                loop {
                    g = self.cv.wait(g).unwrap();
                    if g.poison.is_some() {
                        return Ok(g); // caller surfaces the poison
                    }
                    if g.turn == rank && matches!(g.status[rank], RankStatus::Active) {
                        return Ok(g);
                    }
                }
            }
        }
    }

    /// Round-robin only: move the turn to the next runnable rank; if every
    /// rank is blocked or done while someone still waits, that is a
    /// deterministic deadlock.
    fn pass_turn(&self, g: &mut MutexGuard<'_, Coord>, from: usize) -> Result<()> {
        for i in 1..=self.world {
            let r = (from + i) % self.world;
            if matches!(g.status[r], RankStatus::Active) {
                g.turn = r;
                return Ok(());
            }
        }
        if g.status
            .iter()
            .all(|s| matches!(s, RankStatus::Done))
        {
            return Ok(());
        }
        let detail = format!("no runnable rank; {}", g.describe_blocked());
        let err = SimError::Deadlock(detail);
        g.poison.get_or_insert_with(|| err.clone());
        self.cv.notify_all();
        Err(err)
    }

    /// Prepare the scheduler for a fresh set of workers (drivers call this
    /// through `run_ranks`; no worker may be active). A poisoned pool stays
    /// poisoned.
    pub(crate) fn reset_schedule(&self) -> Result<()> {
        let mut g = self.coord.lock().unwrap();
        if let Some(p) = &g.poison {
            return Err(p.clone());
        }
        for s in g.status.iter_mut() {
            *s = RankStatus::Active;
        }
        g.turn = 0;
        Ok(())
    }

    /// Worker prologue: in round-robin mode, wait for the turn.
    pub(crate) fn sched_enter(&self, rank: usize) -> Result<()> {
        if !matches!(self.exec, ExecMode::RoundRobin) {
            return Ok(());
        }
        let mut g = self.coord.lock().unwrap();
        loop {
            if let Some(p) = &g.poison {
                return Err(p.clone());
            }
            if g.turn == rank && matches!(g.status[rank], RankStatus::Active) {
                return Ok(());
            }
            g = self.cv.wait(g).unwrap();
        }
    }

    /// Worker epilogue: mark the rank done and release the turn.
    pub(crate) fn sched_exit(&self, rank: usize) {
        if !matches!(self.exec, ExecMode::RoundRobin) {
            return;
        }
        let mut g = self.coord.lock().unwrap();
        g.status[rank] = RankStatus::Done;
        if g.turn == rank {
            // A deadlock among the remaining ranks is recorded as poison.
            let _ = self.pass_turn(&mut g, rank);
        }
        drop(g);
        self.cv.notify_all();
    }
}

fn describe_cond(cond: &WaitCond) -> String {
    match cond {
        WaitCond::Flag { owner, symbol, min } => {
            format!("waiting for flag `{symbol}`@rank{owner} >= {min}")
        }
        WaitCond::Barrier { .. } => "waiting at barrier".to_string(),
    }
}

/// Little-endian scalar/row conversion helpers used by every pipeline.
pub mod rows {
    pub fn f32s_to_bytes(vals: &[f32], out: &mut [u8]) {
        for (chunk, &v) in out.chunks_exact_mut(4).zip(vals) {
            chunk.copy_from_slice(&v.to_le_bytes());
        }
    }

    pub fn bytes_to_f32s(bytes: &[u8], out: &mut [f32]) {
        for (chunk, v) in bytes.chunks_exact(4).zip(out.iter_mut()) {
            *v = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }

    pub fn u32_to_bytes(v: u32) -> [u8; 4] {
        v.to_le_bytes()
    }

    pub fn bytes_to_u32(bytes: &[u8]) -> u32 {
        u32::from_le_bytes(bytes.try_into().unwrap())
    }

    pub fn u32s_to_bytes(vals: &[u32], out: &mut [u8]) {
        for (chunk, &v) in out.chunks_exact_mut(4).zip(vals) {
            chunk.copy_from_slice(&v.to_le_bytes());
        }
    }

    pub fn bytes_to_u32s(bytes: &[u8], out: &mut [u32]) {
        for (chunk, v) in bytes.chunks_exact(4).zip(out.iter_mut()) {
            *v = u32::from_le_bytes(chunk.try_into().unwrap());
        }
    }

    pub fn u64s_to_bytes(vals: &[u64], out: &mut [u8]) {
        for (chunk, &v) in out.chunks_exact_mut(8).zip(vals) {
            chunk.copy_from_slice(&v.to_le_bytes());
        }
    }

    pub fn bytes_to_u64s(bytes: &[u8], out: &mut [u64]) {
        for (chunk, v) in bytes.chunks_exact(8).zip(out.iter_mut()) {
            *v = u64::from_le_bytes(chunk.try_into().unwrap());
        }
    }

    pub fn i8s_to_bytes(vals: &[i8], out: &mut [u8]) {
        for (o, &v) in out.iter_mut().zip(vals) {
            *o = v as u8;
        }
    }

    pub fn bytes_to_i8s(bytes: &[u8], out: &mut [i8]) {
        for (o, &b) in out.iter_mut().zip(bytes) {
            *o = b as i8;
        }
    }
}
