//! Thread-local instrumentation: operation counts and live working-buffer
//! accounting.
//!
//! The mixture layers make two measurable promises: one convolution per layer
//! evaluation regardless of the pool size, and a peak working-set that does
//! not grow with the pool size. Both are asserted in tests through these
//! counters instead of being taken on faith.

use std::cell::Cell;

thread_local! {
    static CONV_CALLS: Cell<u64> = const { Cell::new(0) };
    static FORWARD_PASSES: Cell<u64> = const { Cell::new(0) };
    static BACKWARD_PASSES: Cell<u64> = const { Cell::new(0) };
    static LIVE_F32: Cell<usize> = const { Cell::new(0) };
    static PEAK_F32: Cell<usize> = const { Cell::new(0) };
}

/// Snapshot of the per-thread operation counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpCounts {
    pub conv_calls: u64,
    pub forward_passes: u64,
    pub backward_passes: u64,
}

pub fn reset_ops() {
    CONV_CALLS.with(|c| c.set(0));
    FORWARD_PASSES.with(|c| c.set(0));
    BACKWARD_PASSES.with(|c| c.set(0));
}

pub fn ops() -> OpCounts {
    OpCounts {
        conv_calls: CONV_CALLS.with(Cell::get),
        forward_passes: FORWARD_PASSES.with(Cell::get),
        backward_passes: BACKWARD_PASSES.with(Cell::get),
    }
}

pub(crate) fn note_conv() {
    CONV_CALLS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn note_forward() {
    FORWARD_PASSES.with(|c| c.set(c.get() + 1));
}

pub(crate) fn note_backward() {
    BACKWARD_PASSES.with(|c| c.set(c.get() + 1));
}

/// Reset the peak-live-floats watermark to the current live count.
pub fn reset_peak_live() {
    let live = LIVE_F32.with(Cell::get);
    PEAK_F32.with(|p| p.set(live));
}

/// Peak number of live tracked f32 elements since the last reset.
pub fn peak_live_f32() -> usize {
    PEAK_F32.with(Cell::get)
}

/// Currently live tracked f32 elements.
pub fn live_f32() -> usize {
    LIVE_F32.with(Cell::get)
}

fn note_alloc(n: usize) {
    let live = LIVE_F32.with(|c| {
        c.set(c.get() + n);
        c.get()
    });
    PEAK_F32.with(|p| {
        if live > p.get() {
            p.set(live);
        }
    });
}

fn note_free(n: usize) {
    LIVE_F32.with(|c| c.set(c.get().saturating_sub(n)));
}

/// A `Vec<f32>` whose size is charged against the live-buffer counters for
/// as long as it is alive. All full-size working buffers inside the engine
/// (tape node values, mixture temporaries, gradients) use this wrapper so
/// the memory claims are observable.
#[derive(Debug, Default)]
pub struct TrackedVec {
    data: Vec<f32>,
}

impl Clone for TrackedVec {
    fn clone(&self) -> Self {
        Self::from_slice(&self.data)
    }
}

impl TrackedVec {
    pub fn zeros(n: usize) -> Self {
        note_alloc(n);
        TrackedVec {
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        note_alloc(data.len());
        TrackedVec { data }
    }

    pub fn from_slice(s: &[f32]) -> Self {
        Self::from_vec(s.to_vec())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(mut self) -> Vec<f32> {
        note_free(self.data.len());
        std::mem::take(&mut self.data)
    }
}

impl Drop for TrackedVec {
    fn drop(&mut self) {
        note_free(self.data.len());
    }
}

impl std::ops::Deref for TrackedVec {
    type Target = [f32];
    fn deref(&self) -> &[f32] {
        &self.data
    }
}

impl std::ops::DerefMut for TrackedVec {
    fn deref_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tracked_vec_counts_live_and_peak() {
        let base = live_f32();
        reset_peak_live();
        {
            let a = TrackedVec::zeros(100);
            let b = TrackedVec::zeros(50);
            assert_eq!(live_f32(), base + 150);
            drop(a);
            assert_eq!(live_f32(), base + 50);
            drop(b);
        }
        assert_eq!(live_f32(), base);
        assert!(peak_live_f32() >= base + 150);
    }

    #[test]
    fn clone_is_also_tracked() {
        let base = live_f32();
        let a = TrackedVec::from_vec(vec![1.0; 10]);
        let b = a.clone();
        assert_eq!(live_f32(), base + 20);
        drop(a);
        drop(b);
        assert_eq!(live_f32(), base);
    }
}
