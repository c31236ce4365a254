use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open frame interval `[start, end)` on a passage's audio timeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameSpan {
    pub start: usize,
    pub end: usize,
}

impl FrameSpan {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start > end {
            return Err(Error::contract(format!("frame span [{start}, {end}) is reversed")));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn intersection_len(&self, other: &FrameSpan) -> usize {
        self.end.min(other.end).saturating_sub(self.start.max(other.start))
    }

    pub fn union_len(&self, other: &FrameSpan) -> usize {
        self.len() + other.len() - self.intersection_len(other)
    }

    /// Smallest span covering both.
    pub fn hull(&self, other: &FrameSpan) -> FrameSpan {
        FrameSpan {
            start: self.start.min(other.start),
            end: self.end.max(other.end),
        }
    }
}
