//! Decoding of sync-convention integer slots into call arguments.

use super::{CallRef, Kernel, Pid, SyncPending};
use crate::errno::{Errno, SysResult};
use crate::guest::Reply;
use crate::region::SharedRegion;
use crate::wire::{unpack_strvec, ArgKind, Trap, TrapSig, Value, SYNC_SLOTS};

/// Reads the arguments of `sig` out of `slots` and the region they point into.
pub(crate) fn decode(
    sig: &TrapSig,
    slots: &[i64; SYNC_SLOTS],
    region: &SharedRegion,
) -> SysResult<(Vec<Value>, SyncPending)> {
    let mut it = slots.iter().copied();
    let mut next = || it.next().ok_or(Errno::EINVAL);
    let off = |v: i64| usize::try_from(v).map_err(|_| Errno::EFAULT);
    let mut args = Vec::with_capacity(sig.args.len());
    let mut pending = SyncPending::default();
    for kind in sig.args {
        let v = match kind {
            ArgKind::Int => Value::Int(next()?),
            ArgKind::Str => {
                let bytes = region.read_cstr(off(next()?)?).map_err(|_| Errno::EFAULT)?;
                Value::Str(String::from_utf8(bytes).map_err(|_| Errno::EINVAL)?)
            }
            ArgKind::StrVec => {
                let start = off(next()?)?;
                if start >= region.size() {
                    return Err(Errno::EFAULT);
                }
                let tail = region.read_vec(start, region.size() - start).map_err(|_| Errno::EFAULT)?;
                let (_, used) = unpack_strvec(&tail).map_err(|_| Errno::EFAULT)?;
                Value::Bytes(tail[..used].to_vec())
            }
            ArgKind::Bytes => {
                let (start, len) = (off(next()?)?, off(next()?)?);
                Value::Bytes(region.read_vec(start, len).map_err(|_| Errno::EFAULT)?)
            }
            ArgKind::IntList => {
                let (start, count) = (off(next()?)?, off(next()?)?);
                let raw = region.read_vec(start, count.checked_mul(8).ok_or(Errno::EFAULT)?).map_err(|_| Errno::EFAULT)?;
                Value::IntList(raw.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect())
            }
            ArgKind::Out => {
                let (start, cap) = (off(next()?)?, off(next()?)?);
                if start.checked_add(cap).is_none_or(|end| end > region.size()) {
                    return Err(Errno::EFAULT);
                }
                pending.out = Some((start, cap));
                Value::Int(cap as i64)
            }
        };
        args.push(v);
    }
    if sig.aux {
        let at = off(next()?)?;
        if at.checked_add(8).is_none_or(|end| end > region.size()) {
            return Err(Errno::EFAULT);
        }
        pending.aux = Some(at);
    }
    Ok((args, pending))
}

impl Kernel {
    pub(super) fn dispatch_sync(&mut self, pid: Pid, trap: u32, slots: [i64; SYNC_SLOTS]) {
        let decoded = {
            let task = &self.tasks[&pid];
            let shared = task.worker.as_ref().and_then(|w| w.shared());
            match (Trap::from_u32(trap), shared) {
                (_, None) => return,
                (None, _) => Err(Errno::ENOSYS),
                (Some(t), _) if t.sig().async_only => Err(Errno::EINVAL),
                (Some(t), Some((region, _))) => decode(t.sig(), &slots, region),
            }
        };
        match decoded {
            Ok((args, pending)) => {
                self.tasks.get_mut(&pid).unwrap().sync_pending = Some(pending);
                self.dispatch(pid, CallRef::Sync, trap, args);
            }
            Err(e) => self.reply(pid, CallRef::Sync, Reply::err(e)),
        }
    }
}
