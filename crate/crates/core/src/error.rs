use thiserror::Error;

use crate::object::ClassId;

pub type Result<T, E = HeapError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HeapError {
    #[error("invalid class layout: {0}")]
    Layout(String),

    #[error("unknown {0}")]
    UnknownClass(ClassId),

    #[error("invalid handle {0:#x}")]
    InvalidHandle(u64),

    #[error("invalid field {index} for {class}: {reason}")]
    InvalidField { class: ClassId, index: usize, reason: &'static str },

    #[error("invalid root slot {0}")]
    InvalidSlot(usize),

    #[error("heap exhausted: {needed} bytes needed, {available} available in {space}")]
    HeapExhausted { space: &'static str, needed: u64, available: u64 },

    #[error("H2 regions exhausted allocating {size} bytes for partition {partition}")]
    RegionExhausted { partition: u32, size: u64 },

    #[error("heap corruption at {addr:#x}: {reason}")]
    Corruption { addr: u64, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
