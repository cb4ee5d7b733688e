//! Object layout: class descriptors, the two-word header, and handles.
//!
//! Every object starts with a 16-byte header followed by 8-byte fields.
//!
//! ```text
//! word 0: class_id (bits 0..24) | age (bits 24..32) | forwarding >> 3 (bits 32..64)
//! word 1: tc word: marked (bit 63) | partition id (bits 0..32)
//! ```
//!
//! The forwarding bits are only non-zero while a collection is running.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use crate::error::{HeapError, Result};

pub const WORD: u64 = 8;
pub const HEADER_SIZE: u64 = 16;

/// Addresses must fit the 32-bit forwarding field after the 3-bit shift.
pub const MAX_ADDRESS: u64 = 1 << 35;

const CLASS_BITS: u64 = 24;
const CLASS_MASK: u64 = (1 << CLASS_BITS) - 1;
const AGE_SHIFT: u64 = 24;
const AGE_MASK: u64 = 0xff;
const FWD_SHIFT: u64 = 32;
const TC_MARK_BIT: u64 = 1 << 63;
const PARTITION_MASK: u64 = 0xffff_ffff;

pub const MAX_CLASS_ID: u32 = CLASS_MASK as u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "class#{}", self.0)
    }
}

/// Address of an object in the combined H1/H2 address space. Zero is null and
/// is never a valid handle; nullable slots use `Option<ObjectHandle>`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjectHandle(u64);

impl ObjectHandle {
    pub fn from_raw(addr: u64) -> Option<Self> {
        (addr != 0).then_some(ObjectHandle(addr))
    }

    /// Wraps an arbitrary address without checking it. Useful for tools that
    /// walk raw heap memory; the runtime validates it on use.
    pub fn from_addr(addr: u64) -> Self {
        ObjectHandle(addr)
    }

    pub fn addr(self) -> u64 {
        self.0
    }

    pub fn raw(h: Option<Self>) -> u64 {
        h.map_or(0, |h| h.0)
    }
}

impl fmt::Debug for ObjectHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "@{:#x}", self.0)
    }
}

/// The heap space an address belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Space {
    H1Young,
    H1Old,
    H2,
}

impl Space {
    pub fn is_h1(self) -> bool {
        !matches!(self, Space::H2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FieldKind {
    Reference,
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FieldSpec {
    /// Byte offset from the object start.
    pub offset: u32,
    pub kind: FieldKind,
    pub transient: bool,
}

impl FieldSpec {
    pub fn reference(offset: u32) -> Self {
        FieldSpec { offset, kind: FieldKind::Reference, transient: false }
    }

    pub fn transient_reference(offset: u32) -> Self {
        FieldSpec { offset, kind: FieldKind::Reference, transient: true }
    }

    pub fn scalar(offset: u32) -> Self {
        FieldSpec { offset, kind: FieldKind::Scalar, transient: false }
    }

    pub fn is_reference(&self) -> bool {
        self.kind == FieldKind::Reference
    }

    /// Builds a packed layout (fields laid out back to back after the header)
    /// from a list of (kind, transient) pairs.
    pub fn packed(kinds: &[(FieldKind, bool)]) -> Vec<FieldSpec> {
        kinds
            .iter()
            .enumerate()
            .map(|(i, &(kind, transient))| FieldSpec {
                offset: (HEADER_SIZE + i as u64 * WORD) as u32,
                kind,
                transient,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassDescriptor {
    pub class_id: ClassId,
    pub fields: Vec<FieldSpec>,
    pub instance_size: u32,
    ref_fields: Vec<usize>,
}

impl ClassDescriptor {
    pub fn field(&self, index: usize) -> Option<&FieldSpec> {
        self.fields.get(index)
    }

    /// Indices of all reference fields, in layout order.
    pub fn reference_fields(&self) -> &[usize] {
        &self.ref_fields
    }

    pub fn reference_offsets(&self) -> impl Iterator<Item = (u32, bool)> + '_ {
        self.ref_fields.iter().map(|&i| (self.fields[i].offset, self.fields[i].transient))
    }

    pub fn has_transient(&self) -> bool {
        self.fields.iter().any(|f| f.transient)
    }

    pub fn size(&self) -> u64 {
        self.instance_size as u64
    }
}

/// Append-only table of class descriptors. Ids start at 1 so a zeroed header
/// never names a valid class.
#[derive(Default, Debug)]
pub struct ClassRegistry {
    classes: Vec<Arc<ClassDescriptor>>,
}

impl ClassRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, layout: Vec<FieldSpec>) -> Result<Arc<ClassDescriptor>> {
        let instance_size = HEADER_SIZE + layout.len() as u64 * WORD;
        let mut seen = BTreeSet::new();
        for f in &layout {
            let off = f.offset as u64;
            if !off.is_multiple_of(WORD) {
                return Err(HeapError::Layout(format!("field offset {off} is not word aligned")));
            }
            if off < HEADER_SIZE {
                return Err(HeapError::Layout(format!("field offset {off} overlaps the header")));
            }
            if off + WORD > instance_size {
                return Err(HeapError::Layout(format!(
                    "field offset {off} outside instance size {instance_size}"
                )));
            }
            if !seen.insert(off) {
                return Err(HeapError::Layout(format!("overlapping fields at offset {off}")));
            }
            if f.transient && f.kind == FieldKind::Scalar {
                return Err(HeapError::Layout(format!(
                    "scalar field at offset {off} cannot be transient"
                )));
            }
        }
        let next = self.classes.len() as u32 + 1;
        if next > MAX_CLASS_ID {
            return Err(HeapError::Layout("class id space exhausted".into()));
        }
        let ref_fields = layout
            .iter()
            .enumerate()
            .filter(|(_, f)| f.is_reference())
            .map(|(i, _)| i)
            .collect();
        let desc = Arc::new(ClassDescriptor {
            class_id: ClassId(next),
            fields: layout,
            instance_size: instance_size as u32,
            ref_fields,
        });
        self.classes.push(desc.clone());
        Ok(desc)
    }

    pub fn get(&self, id: ClassId) -> Option<&Arc<ClassDescriptor>> {
        (id.0 as usize).checked_sub(1).and_then(|i| self.classes.get(i))
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Decoded form of the first header word.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObjectHeader {
    pub class_id: ClassId,
    pub age: u8,
    pub forwarding: Option<u64>,
    pub tc: TcWord,
}

impl ObjectHeader {
    pub fn decode(word0: u64, word1: u64) -> Self {
        ObjectHeader {
            class_id: class_of(word0),
            age: age_of(word0),
            forwarding: forwarding_of(word0),
            tc: TcWord::decode(word1),
        }
    }
}

pub fn class_of(word0: u64) -> ClassId {
    ClassId((word0 & CLASS_MASK) as u32)
}

pub fn age_of(word0: u64) -> u8 {
    ((word0 >> AGE_SHIFT) & AGE_MASK) as u8
}

pub fn forwarding_of(word0: u64) -> Option<u64> {
    let f = word0 >> FWD_SHIFT;
    (f != 0).then_some(f << 3)
}

pub fn make_word0(class: ClassId, age: u8) -> u64 {
    (class.0 as u64 & CLASS_MASK) | ((age as u64) << AGE_SHIFT)
}

pub fn with_age(word0: u64, age: u8) -> u64 {
    (word0 & !(AGE_MASK << AGE_SHIFT)) | ((age as u64) << AGE_SHIFT)
}

pub fn with_forwarding(word0: u64, addr: u64) -> u64 {
    debug_assert!(addr.is_multiple_of(WORD) && addr < MAX_ADDRESS);
    (word0 & ((1 << FWD_SHIFT) - 1)) | ((addr >> 3) << FWD_SHIFT)
}

pub fn clear_forwarding(word0: u64) -> u64 {
    word0 & ((1 << FWD_SHIFT) - 1)
}

/// Cache-candidate mark and owning partition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TcWord {
    pub marked: bool,
    pub partition: u32,
}

impl TcWord {
    pub fn marked(partition: u32) -> Self {
        TcWord { marked: true, partition }
    }

    pub fn encode(self) -> u64 {
        if self.marked {
            TC_MARK_BIT | self.partition as u64
        } else {
            0
        }
    }

    pub fn decode(word: u64) -> Self {
        TcWord { marked: word & TC_MARK_BIT != 0, partition: (word & PARTITION_MASK) as u32 }
    }
}
