//! Reference serializer used by the SD baseline.
//!
//! Encoding: a `u64` object count, then for every object of the
//! non-transient closure in depth-first preorder a record of
//! `u32 class id`, `u32 word count` and that many `u64` field words.
//! Scalars are stored as-is, non-transient references as `index + 1`
//! (zero for null) and transient references as zero.

use crate::error::{HeapError, Result};
use crate::object::{ClassId, FieldKind, ObjectHandle};
use crate::runtime::{RootSlot, Runtime};

/// Non-transient closure of `root` in depth-first preorder.
pub fn dfs_closure(rt: &Runtime, root: ObjectHandle) -> Result<Vec<u64>> {
    let mut order = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut stack = vec![root.addr()];
    seen.insert(root.addr());
    while let Some(a) = stack.pop() {
        order.push(a);
        let desc = rt.class_of(ObjectHandle::from_addr(a))?;
        // Reverse push so the first field is visited first.
        for (off, transient) in desc.reference_offsets().collect::<Vec<_>>().into_iter().rev() {
            let v = rt.load(a + off as u64);
            if !transient && v != 0 && seen.insert(v) {
                stack.push(v);
            }
        }
    }
    Ok(order)
}

pub fn serialize(rt: &Runtime, root: ObjectHandle) -> Result<Vec<u8>> {
    let order = dfs_closure(rt, root)?;
    let index: std::collections::HashMap<u64, u64> =
        order.iter().enumerate().map(|(i, &a)| (a, i as u64)).collect();
    let mut out = Vec::new();
    out.extend_from_slice(&(order.len() as u64).to_le_bytes());
    for &a in &order {
        let desc = rt.class_of(ObjectHandle::from_addr(a))?;
        out.extend_from_slice(&desc.class_id.0.to_le_bytes());
        out.extend_from_slice(&(desc.fields.len() as u32).to_le_bytes());
        for f in &desc.fields {
            let v = rt.load(a + f.offset as u64);
            let w = match f.kind {
                FieldKind::Scalar => v,
                FieldKind::Reference if f.transient || v == 0 => 0,
                FieldKind::Reference => index[&v] + 1,
            };
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let s = self.buf.get(self.pos..self.pos + N).ok_or_else(|| truncated(self.pos))?;
        self.pos += N;
        Ok(s.try_into().unwrap())
    }
    fn u32(&mut self) -> Result<u32> {
        self.take::<4>().map(u32::from_le_bytes)
    }
    fn u64(&mut self) -> Result<u64> {
        self.take::<8>().map(u64::from_le_bytes)
    }
}

fn truncated(pos: usize) -> HeapError {
    HeapError::Corruption { addr: pos as u64, reason: "truncated serialized partition".into() }
}

/// Rebuilds a serialized graph in H1. The returned root slot keeps it alive.
pub fn deserialize(rt: &mut Runtime, bytes: &[u8]) -> Result<RootSlot> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let n = r.u64()? as usize;
    if n == 0 {
        return Err(truncated(0));
    }
    let mut records = Vec::with_capacity(n.min(bytes.len() / 8));
    for _ in 0..n {
        let class = ClassId(r.u32()?);
        let len = r.u32()? as usize;
        let mut words = Vec::with_capacity(len);
        for _ in 0..len {
            words.push(r.u64()?);
        }
        records.push((class, words));
    }
    for (class, words) in &records {
        if rt.class(*class)?.fields.len() != words.len() {
            return Err(HeapError::Corruption { addr: r.pos as u64, reason: format!("field count mismatch for {class}") });
        }
    }
    let mut slots = Vec::with_capacity(n);
    let mut result = Ok(());
    for (class, words) in &records {
        let desc = rt.class(*class)?.clone();
        match rt.allocate(*class) {
            Ok(h) => {
                for (f, &w) in desc.fields.iter().zip(words) {
                    if f.kind == FieldKind::Scalar {
                        rt.store(h.addr() + f.offset as u64, w);
                    }
                }
                slots.push(rt.add_root(Some(h)));
            }
            Err(e) => {
                result = Err(e);
                break;
            }
        }
    }
    if result.is_ok() {
        result = (|| {
            for (i, (class, words)) in records.iter().enumerate() {
                let desc = rt.class(*class)?.clone();
                let obj = rt.root(slots[i])?.expect("deserialized object rooted");
                for (fi, (f, &w)) in desc.fields.iter().zip(words).enumerate() {
                    if f.kind == FieldKind::Reference && w != 0 {
                        let t = slots.get(w as usize - 1).ok_or_else(|| truncated(0))?;
                        let target = rt.root(*t)?;
                        rt.write_ref(obj, fi, target)?;
                    }
                }
            }
            Ok(())
        })();
    }
    let mut keep = None;
    for (i, s) in slots.into_iter().enumerate() {
        if i == 0 && result.is_ok() {
            keep = Some(s);
        } else {
            rt.drop_root(s)?;
        }
    }
    result.map(|_| keep.expect("at least one object"))
}
