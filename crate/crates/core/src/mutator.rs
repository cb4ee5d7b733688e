//! Field access for the application, with the dual-range post-write barrier.
//!
//! H1 and H2 objects are read and written the same way: the handle is an
//! address and the field is a fixed offset from it.

use crate::error::{HeapError, Result};
use crate::object::{FieldKind, ObjectHandle, Space};
use crate::runtime::Runtime;

impl Runtime {
    fn field_slot(&self, obj: ObjectHandle, index: usize, kind: FieldKind) -> Result<(u64, Space)> {
        let space = self.check_object(obj.addr())?;
        let desc = self.descriptor_at(obj.addr())?;
        let field = desc.field(index).ok_or(HeapError::InvalidField {
            class: desc.class_id,
            index,
            reason: "no such field",
        })?;
        if field.kind != kind {
            return Err(HeapError::InvalidField {
                class: desc.class_id,
                index,
                reason: match kind {
                    FieldKind::Reference => "not a reference field",
                    FieldKind::Scalar => "not a scalar field",
                },
            });
        }
        Ok((obj.addr() + field.offset as u64, space))
    }

    pub fn read_ref(&self, obj: ObjectHandle, index: usize) -> Result<Option<ObjectHandle>> {
        let (slot, _) = self.field_slot(obj, index, FieldKind::Reference)?;
        Ok(ObjectHandle::from_raw(self.load(slot)))
    }

    pub fn read_scalar(&self, obj: ObjectHandle, index: usize) -> Result<u64> {
        let (slot, _) = self.field_slot(obj, index, FieldKind::Scalar)?;
        Ok(self.load(slot))
    }

    pub fn write_ref(
        &mut self,
        obj: ObjectHandle,
        index: usize,
        target: Option<ObjectHandle>,
    ) -> Result<()> {
        let (slot, space) = self.field_slot(obj, index, FieldKind::Reference)?;
        let target_space = match target {
            Some(t) => Some(self.check_object(t.addr())?),
            None => None,
        };
        self.store(slot, ObjectHandle::raw(target));
        self.post_write_barrier(obj, space, target, target_space);
        Ok(())
    }

    pub fn write_scalar(&mut self, obj: ObjectHandle, index: usize, value: u64) -> Result<()> {
        let (slot, space) = self.field_slot(obj, index, FieldKind::Scalar)?;
        self.store(slot, value);
        self.metrics.barrier_ops += 1;
        if space == Space::H2 && self.scalar_barrier {
            self.h2.dirty_card(obj.addr());
            self.metrics.h2_barrier_hits += 1;
            self.metrics.barrier_ops += 1;
        }
        Ok(())
    }

    /// One range check, then at most one card store. An H2-to-H2 store that
    /// crosses regions also links the two regions' groups.
    fn post_write_barrier(
        &mut self,
        obj: ObjectHandle,
        space: Space,
        target: Option<ObjectHandle>,
        target_space: Option<Space>,
    ) {
        self.metrics.barrier_ops += 1;
        match space {
            Space::H1Old if target_space == Some(Space::H1Young) => {
                self.h1.cards.dirty(obj.addr());
                self.metrics.h1_barrier_hits += 1;
                self.metrics.barrier_ops += 1;
            }
            Space::H2 => {
                self.h2.dirty_card(obj.addr());
                self.metrics.h2_barrier_hits += 1;
                self.metrics.barrier_ops += 1;
                if let (Some(t), Some(Space::H2)) = (target, target_space) {
                    let (src, dst) = (self.h2.region_of(obj.addr()), self.h2.region_of(t.addr()));
                    if src != dst && self.h2.merge_groups(src, dst) {
                        self.metrics.group_merges += 1;
                    }
                }
            }
            _ => {}
        }
    }
}
