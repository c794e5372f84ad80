//! Completion slot for the synchronous convention.
//!
//! At `retval_off` the region holds `seq: u32 | errno: i32 | ret: i64`; the
//! 32-bit wake word lives at `wake_off`. The kernel writes the result, then
//! publishes a wake state with release ordering and wakes the guest; the guest
//! acquires the wake word before reading the result.

use std::sync::atomic::Ordering;

use crate::region::SharedRegion;

/// Number of integer argument slots in a sync call.
pub const SYNC_SLOTS: usize = 6;

/// Bytes reserved at `retval_off`.
pub const RETVAL_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum WakeState {
    Parked = 0,
    Complete = 1,
    Signal = 2,
    Killed = 3,
}

impl WakeState {
    fn from_u32(v: u32) -> WakeState {
        match v {
            0 => WakeState::Parked,
            1 => WakeState::Complete,
            2 => WakeState::Signal,
            _ => WakeState::Killed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyncCallSlot {
    pub retval_off: usize,
    pub wake_off: usize,
}

/// Spin iterations before yielding the CPU.
const SPIN: u32 = 64;
/// Yields before falling back to a futex wait. Yielding lets the kernel thread
/// run when it shares a core with the guest.
const YIELDS: u32 = 64;

impl SyncCallSlot {
    /// Checks the offset constraints for a region of `size` bytes.
    pub fn new(size: usize, retval_off: usize, wake_off: usize) -> Option<SyncCallSlot> {
        let fits = |off: usize| off.checked_add(RETVAL_LEN).is_some_and(|end| end <= size);
        let overlap = retval_off < wake_off + 4 && wake_off < retval_off + RETVAL_LEN;
        if !fits(retval_off) || !fits(wake_off) || wake_off % 4 != 0 || overlap {
            return None;
        }
        Some(SyncCallSlot { retval_off, wake_off })
    }

    fn wake_word<'a>(&self, region: &'a SharedRegion) -> &'a std::sync::atomic::AtomicU32 {
        region.word(self.wake_off)
    }

    pub fn state(&self, region: &SharedRegion) -> WakeState {
        WakeState::from_u32(self.wake_word(region).load(Ordering::Acquire))
    }

    /// Kernel side: store the result, flip the wake word to COMPLETE, wake one waiter.
    pub fn complete(&self, region: &SharedRegion, ret: i64, errno: i32) {
        let seq = region.read_u32(self.retval_off).unwrap_or(0).wrapping_add(1);
        region.write_u32(self.retval_off, seq).expect("slot bounds checked at attach");
        region.write(self.retval_off + 4, &errno.to_le_bytes()).expect("slot bounds");
        region.write_i64(self.retval_off + 8, ret).expect("slot bounds");
        self.publish(region, WakeState::Complete);
    }

    /// Kernel side: wake the guest because a signal arrived; the result slot is untouched.
    pub fn signal(&self, region: &SharedRegion) {
        self.publish(region, WakeState::Signal);
    }

    /// Kernel side: wake the guest for teardown.
    pub fn kill(&self, region: &SharedRegion) {
        self.publish(region, WakeState::Killed);
    }

    fn publish(&self, region: &SharedRegion, state: WakeState) {
        let w = self.wake_word(region);
        // A kill is final; later completions must not overwrite it.
        if w.load(Ordering::Relaxed) == WakeState::Killed as u32 {
            return;
        }
        w.store(state as u32, Ordering::Release);
        atomic_wait::wake_one(w);
    }

    /// Guest side: mark the slot parked before issuing a call. Returns false if
    /// the guest has already been killed.
    pub fn arm(&self, region: &SharedRegion) -> bool {
        let prev = self.wake_word(region).swap(WakeState::Parked as u32, Ordering::AcqRel);
        if prev == WakeState::Killed as u32 {
            self.wake_word(region).store(prev, Ordering::Release);
            return false;
        }
        true
    }

    /// Guest side: block until the wake word leaves PARKED.
    pub fn wait(&self, region: &SharedRegion) -> WakeState {
        let w = self.wake_word(region);
        for _ in 0..SPIN {
            let v = w.load(Ordering::Acquire);
            if v != 0 {
                return WakeState::from_u32(v);
            }
            std::hint::spin_loop();
        }
        for _ in 0..YIELDS {
            let v = w.load(Ordering::Acquire);
            if v != 0 {
                return WakeState::from_u32(v);
            }
            std::thread::yield_now();
        }
        loop {
            let v = w.load(Ordering::Acquire);
            if v != 0 {
                return WakeState::from_u32(v);
            }
            atomic_wait::wait(w, 0);
        }
    }

    /// Guest side: consume a wake (COMPLETE or SIGNAL) by resetting to PARKED.
    /// Returns false if the word was changed to KILLED meanwhile.
    pub fn consume(&self, region: &SharedRegion, seen: WakeState) -> bool {
        self.wake_word(region)
            .compare_exchange(seen as u32, WakeState::Parked as u32, Ordering::AcqRel, Ordering::Acquire)
            .is_ok()
    }

    /// `(ret, errno, seq)` as last written by [`complete`](Self::complete).
    pub fn result(&self, region: &SharedRegion) -> (i64, i32, u32) {
        let seq = region.read_u32(self.retval_off).unwrap_or(0);
        let mut e = [0u8; 4];
        region.read(self.retval_off + 4, &mut e).unwrap_or(());
        let ret = region.read_i64(self.retval_off + 8).unwrap_or(0);
        (ret, i32::from_le_bytes(e), seq)
    }
}
