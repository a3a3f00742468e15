//! Byte-exact accounting of live activation and gradient buffers.

use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Forward,
    Backward,
}

/// Counts live bytes at buffer granularity. Parameters and their gradients
/// are not tracked here.
#[derive(Clone, Debug)]
pub struct MemoryTracker {
    live: usize,
    phase: Phase,
    peak_forward: usize,
    peak_backward: usize,
    segment_live: BTreeMap<usize, usize>,
    max_concurrent_segments: usize,
}

impl Default for MemoryTracker {
    fn default() -> Self {
        MemoryTracker {
            live: 0,
            phase: Phase::Forward,
            peak_forward: 0,
            peak_backward: 0,
            segment_live: BTreeMap::new(),
            max_concurrent_segments: 0,
        }
    }
}

impl MemoryTracker {
    pub fn alloc(&mut self, bytes: usize) {
        self.live += bytes;
        match self.phase {
            Phase::Forward => self.peak_forward = self.peak_forward.max(self.live),
            Phase::Backward => self.peak_backward = self.peak_backward.max(self.live),
        }
    }

    pub fn free(&mut self, bytes: usize) {
        debug_assert!(bytes <= self.live, "freeing more than is live");
        self.live -= bytes;
    }

    pub fn live(&self) -> usize {
        self.live
    }

    pub fn begin_backward(&mut self) {
        self.phase = Phase::Backward;
        self.peak_backward = self.live;
    }

    /// Records a buffer of recomputation cache belonging to `segment`.
    pub fn alloc_recompute(&mut self, segment: usize, bytes: usize) {
        *self.segment_live.entry(segment).or_insert(0) += bytes;
        self.max_concurrent_segments = self.max_concurrent_segments.max(self.segment_live.len());
        self.alloc(bytes);
    }

    pub fn free_recompute(&mut self, segment: usize, bytes: usize) {
        if let Some(b) = self.segment_live.get_mut(&segment) {
            *b -= bytes;
            if *b == 0 {
                self.segment_live.remove(&segment);
            }
        }
        self.free(bytes);
    }

    /// Bytes of recomputation cache still held by `segment`.
    pub fn segment_bytes(&self, segment: usize) -> usize {
        self.segment_live.get(&segment).copied().unwrap_or(0)
    }

    pub fn peak_forward(&self) -> usize {
        self.peak_forward
    }

    pub fn peak_backward(&self) -> usize {
        self.peak_backward
    }

    pub fn max_concurrent_segments(&self) -> usize {
        self.max_concurrent_segments
    }
}

/// Measured memory and time of one training step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemoryReport {
    pub policy: String,
    pub batch: usize,
    pub peak_forward_bytes: usize,
    pub peak_backward_bytes: usize,
    pub peak_total_bytes: usize,
    /// Activation bytes still live when the forward pass ends.
    pub retained_bytes: usize,
    pub param_bytes: usize,
    pub recompute_kernel_invocations: usize,
    pub max_concurrent_segment_caches: usize,
    pub wall_time_forward: f64,
    pub wall_time_total: f64,
}

impl MemoryReport {
    pub const CSV_HEADER: &'static str =
        "policy,batch,peak_forward_bytes,peak_backward_bytes,peak_total_bytes,\
retained_bytes,param_bytes,recompute_kernel_invocations,wall_time_forward,wall_time_total";

    pub fn peak_total_mb(&self) -> f64 {
        self.peak_total_bytes as f64 / (1024.0 * 1024.0)
    }

    /// Images per second over a full training step.
    pub fn fps(&self) -> f64 {
        if self.wall_time_total > 0.0 {
            self.batch as f64 / self.wall_time_total
        } else {
            0.0
        }
    }

    /// Largest batch whose peak fits `budget_bytes`, assuming activation
    /// memory scales linearly with the batch (parameters do not).
    pub fn max_batch_for(&self, budget_bytes: usize) -> usize {
        if self.batch == 0 || self.peak_total_bytes == 0 {
            return 0;
        }
        let per_image = self.peak_total_bytes as f64 / self.batch as f64;
        let room = budget_bytes.saturating_sub(self.param_bytes) as f64;
        (room / per_image).floor() as usize
    }

    /// Plain `key=value` lines in sorted key order.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "batch={}", self.batch);
        let _ = writeln!(
            s,
            "max_concurrent_segment_caches={}",
            self.max_concurrent_segment_caches
        );
        let _ = writeln!(s, "param_bytes={}", self.param_bytes);
        let _ = writeln!(s, "peak_backward_bytes={}", self.peak_backward_bytes);
        let _ = writeln!(s, "peak_forward_bytes={}", self.peak_forward_bytes);
        let _ = writeln!(s, "peak_total_bytes={}", self.peak_total_bytes);
        let _ = writeln!(s, "policy={}", self.policy);
        let _ = writeln!(
            s,
            "recompute_kernel_invocations={}",
            self.recompute_kernel_invocations
        );
        let _ = writeln!(s, "retained_bytes={}", self.retained_bytes);
        let _ = writeln!(s, "wall_time_forward={:.6}", self.wall_time_forward);
        let _ = writeln!(s, "wall_time_total={:.6}", self.wall_time_total);
        s
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.6},{:.6}",
            self.policy,
            self.batch,
            self.peak_forward_bytes,
            self.peak_backward_bytes,
            self.peak_total_bytes,
            self.retained_bytes,
            self.param_bytes,
            self.recompute_kernel_invocations,
            self.wall_time_forward,
            self.wall_time_total
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peaks_follow_phases() {
        let mut t = MemoryTracker::default();
        t.alloc(100);
        t.alloc(50);
        t.free(120);
        t.begin_backward();
        t.alloc(10);
        t.free(40);
        assert_eq!(t.peak_forward(), 150);
        assert_eq!(t.peak_backward(), 40);
        assert_eq!(t.live(), 0);
    }

    #[test]
    fn concurrent_segments_are_counted() {
        let mut t = MemoryTracker::default();
        t.alloc_recompute(3, 8);
        t.free_recompute(3, 8);
        t.alloc_recompute(2, 8);
        assert_eq!(t.max_concurrent_segments(), 1);
        t.alloc_recompute(1, 8);
        assert_eq!(t.max_concurrent_segments(), 2);
    }

    #[test]
    fn max_batch_scales_linearly() {
        let r = MemoryReport {
            batch: 2,
            peak_total_bytes: 200,
            param_bytes: 50,
            ..Default::default()
        };
        assert_eq!(r.max_batch_for(1050), 10);
        assert_eq!(r.max_batch_for(10), 0);
    }
}
