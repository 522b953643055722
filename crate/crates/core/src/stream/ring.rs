use std::sync::atomic::{fence, AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;

use crate::audio::AudioSignal;
use crate::error::{Error, Result};

/// Samples held by a buffer of `minutes` at `sample_rate`.
pub fn capacity_for(sample_rate: u32, minutes: f64) -> usize {
    (minutes * 60.0 * f64::from(sample_rate)).round() as usize
}

struct Shared {
    // f32 bit patterns; atomics make concurrent overwrite well defined.
    data: Box<[AtomicU32]>,
    unit: usize,
    sample_rate: u32,
    /// Samples published so far.
    cursor: AtomicU64,
    /// End of the unit currently being written (ahead of `cursor` mid-push).
    claim: AtomicU64,
}

impl Shared {
    fn capacity(&self) -> u64 {
        self.data.len() as u64
    }
}

/// Producer half. Exactly one exists per buffer.
pub struct RingWriter {
    shared: Arc<Shared>,
}

/// Consumer half. Exactly one exists per buffer.
pub struct RingReader {
    shared: Arc<Shared>,
}

/// Allocates a buffer of `capacity` samples filled in units of `unit` samples.
pub fn ring_buffer(capacity: usize, unit: usize, sample_rate: u32) -> Result<(RingWriter, RingReader)> {
    if unit == 0 || capacity == 0 || !capacity.is_multiple_of(unit) {
        return Err(Error::invalid(format!(
            "capacity {capacity} must be a positive multiple of the {unit}-sample unit"
        )));
    }
    let data: Box<[AtomicU32]> = std::iter::repeat_with(|| AtomicU32::new(0)).take(capacity).collect();
    let shared = Arc::new(Shared {
        data,
        unit,
        sample_rate,
        cursor: AtomicU64::new(0),
        claim: AtomicU64::new(0),
    });
    Ok((RingWriter { shared: shared.clone() }, RingReader { shared }))
}

impl RingWriter {
    pub fn capacity(&self) -> usize {
        self.shared.data.len()
    }

    pub fn cursor(&self) -> u64 {
        self.shared.cursor.load(Ordering::Relaxed)
    }

    /// Appends one unit, overwriting the oldest samples once full. Returns the new cursor.
    pub fn push(&mut self, unit: &[f32]) -> Result<u64> {
        let s = &*self.shared;
        if unit.len() != s.unit {
            return Err(Error::invalid(format!("unit of {} samples, expected {}", unit.len(), s.unit)));
        }
        let c = s.cursor.load(Ordering::Relaxed);
        let next = c + s.unit as u64;
        s.claim.store(next, Ordering::Relaxed);
        fence(Ordering::Release);
        for (i, &v) in unit.iter().enumerate() {
            s.data[((c + i as u64) % s.capacity()) as usize].store(v.to_bits(), Ordering::Relaxed);
        }
        s.cursor.store(next, Ordering::Release);
        Ok(next)
    }
}

impl RingReader {
    pub fn capacity(&self) -> usize {
        self.shared.data.len()
    }

    pub fn sample_rate(&self) -> u32 {
        self.shared.sample_rate
    }

    /// Absolute index one past the newest published sample.
    pub fn cursor(&self) -> u64 {
        self.shared.cursor.load(Ordering::Acquire)
    }

    /// Copies absolute samples `[start, start + len)`.
    pub fn read_span(&self, start: u64, len: usize) -> Result<Vec<f32>> {
        let s = &*self.shared;
        let end = start + len as u64;
        let c = s.cursor.load(Ordering::Acquire);
        if end > c {
            return Err(Error::NotReady { needed: end, available: c });
        }
        if len as u64 > s.capacity() {
            return Err(Error::invalid(format!("span of {len} samples exceeds capacity {}", s.capacity())));
        }
        let oldest = c.saturating_sub(s.capacity());
        if start < oldest {
            return Err(Error::Overwritten { start, oldest });
        }
        let out: Vec<f32> = (start..end)
            .map(|i| f32::from_bits(s.data[(i % s.capacity()) as usize].load(Ordering::Relaxed)))
            .collect();
        // Any unit that clobbered part of the copy has its claim visible here.
        fence(Ordering::Acquire);
        let oldest = s.claim.load(Ordering::Relaxed).saturating_sub(s.capacity());
        if start < oldest {
            return Err(Error::Overwritten { start, oldest });
        }
        Ok(out)
    }

    /// The newest `len` samples and their absolute start, retrying if the
    /// writer laps the copy.
    pub fn read_latest(&self, len: usize) -> Result<(u64, Vec<f32>)> {
        loop {
            let c = self.cursor();
            if c < len as u64 {
                return Err(Error::NotReady { needed: len as u64, available: c });
            }
            let start = c - len as u64;
            match self.read_span(start, len) {
                Err(Error::Overwritten { .. }) => continue,
                other => return other.map(|v| (start, v)),
            }
        }
    }

    /// The most recent `duration_s` seconds in chronological order.
    pub fn read_window(&self, duration_s: f64) -> Result<AudioSignal> {
        let len = (duration_s * f64::from(self.shared.sample_rate)).round() as usize;
        let (_, v) = self.read_latest(len)?;
        AudioSignal::new(v.into_iter().map(f64::from).collect(), self.shared.sample_rate)
    }
}
