use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config schema error at `{path}`: {msg}")]
    Schema { path: String, msg: String },
    #[error("invalid config at `{path}`: {msg}")]
    Invalid { path: String, msg: String },
    #[error("cannot read {0}: {1}")]
    Io(String, String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum MapError {
    #[error("physical address {0:#x} outside DRAM")]
    OutOfRange(u64),
    #[error("non-canonical virtual address {0:#x}")]
    NonCanonical(u64),
    #[error("bit layout is not invertible over GF(2)")]
    Singular,
    #[error("bit layout needs {need} address bits, DRAM has {have}")]
    Width { need: u32, have: u32 },
    #[error("access crosses a row boundary")]
    CrossRow,
    #[error("cell density above one cell per bit")]
    Density,
}

/// Page-table level, counted from the leaf (1 = L1PT) to the root (4 = PML4).
pub type Level = u8;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum PageFault {
    #[error("page fault at {va:#x}: entry not present at level {level}")]
    NotPresent { va: u64, level: Level },
    #[error("page fault at {va:#x}: non-canonical address")]
    NonCanonical { va: u64 },
    #[error("page fault at {va:#x}: entry points outside DRAM at level {level}")]
    BadFrame { va: u64, level: Level },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OsError {
    #[error("out of memory")]
    OutOfMemory,
    #[error("defense placement region exhausted")]
    PlacementExhausted,
    #[error("range {0:#x}+{1:#x} overlaps an existing mapping")]
    Overlap(u64, u64),
    #[error("address {0:#x} is not mapped")]
    Unmapped(u64),
    #[error("invalid argument: {0}")]
    Invalid(&'static str),
    #[error("access fault: {0}")]
    Fault(PageFault),
    #[error("no such process {0}")]
    NoProcess(u32),
}

impl From<PageFault> for OsError {
    fn from(f: PageFault) -> Self {
        OsError::Fault(f)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("precondition violated: {0}")]
    Precondition(&'static str),
    #[error("no candidate eviction sets")]
    NoCandidates,
    #[error("eviction pool incomplete: {0}")]
    Pool(String),
    #[error("escalation verification failed: {0}")]
    Verification(&'static str),
    #[error("credential layout mismatch")]
    CredMismatch,
    #[error("system call failed: {0}")]
    Sys(#[from] OsError),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<AttackError> for HarnessError {
    fn from(e: AttackError) -> Self {
        HarnessError::Runtime(e.to_string())
    }
}

impl From<OsError> for HarnessError {
    fn from(e: OsError) -> Self {
        HarnessError::Runtime(e.to_string())
    }
}
