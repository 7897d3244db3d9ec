use crate::mask::{score_order, union_all, BinaryMask, MaskError, ScoredMask};

/// Ordered set of pairwise-disjoint, nonempty scored masks.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityMap {
    height: u32,
    width: u32,
    masks: Vec<ScoredMask>,
}

impl EntityMap {
    pub fn empty(height: u32, width: u32) -> Self {
        Self { height, width, masks: Vec::new() }
    }

    /// Checks sizes, non-emptiness and pairwise disjointness.
    pub fn new(height: u32, width: u32, masks: Vec<ScoredMask>) -> Result<Self, MaskError> {
        let mut seen = BinaryMask::empty(height, width)?;
        for m in &masks {
            if m.mask.height() != height || m.mask.width() != width {
                return Err(MaskError::Mismatch {
                    a_h: height,
                    a_w: width,
                    b_h: m.mask.height(),
                    b_w: m.mask.width(),
                });
            }
            if m.mask.is_empty() {
                return Err(MaskError::Empty);
            }
            let shared = seen.intersection_area(&m.mask)?;
            if shared > 0 {
                return Err(MaskError::Overlap(shared));
            }
            seen = seen.union(&m.mask)?;
        }
        Ok(Self { height, width, masks })
    }

    /// Wraps masks already known to be disjoint and nonempty.
    pub(crate) fn from_disjoint(height: u32, width: u32, masks: Vec<ScoredMask>) -> Self {
        debug_assert!(masks.iter().all(|m| !m.mask.is_empty()));
        Self { height, width, masks }
    }

    /// Makes arbitrary masks disjoint by pasting in score order: each mask
    /// loses the pixels already claimed by higher-scored masks. Masks left
    /// empty are dropped.
    pub fn paste_by_score(height: u32, width: u32, masks: &[ScoredMask]) -> Result<Self, MaskError> {
        let mut claimed = BinaryMask::empty(height, width)?;
        let mut out = Vec::new();
        for idx in score_order(masks) {
            let m = &masks[idx];
            let clipped = m.mask.subtract(&claimed)?;
            if clipped.is_empty() {
                continue;
            }
            claimed = claimed.union(&clipped)?;
            out.push(m.with_mask(clipped));
        }
        Ok(Self { height, width, masks: out })
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn masks(&self) -> &[ScoredMask] {
        &self.masks
    }

    pub fn into_masks(self) -> Vec<ScoredMask> {
        self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn union_mask(&self) -> BinaryMask {
        union_all(self.height, self.width, self.masks.iter().map(|m| &m.mask))
            .expect("entity masks share the map size")
    }

    pub fn covered_area(&self) -> u64 {
        self.masks.iter().map(|m| m.area()).sum()
    }

    /// Total number of pixels claimed by more than one mask.
    pub fn overlap_pixels(&self) -> u64 {
        self.covered_area() - self.union_mask().area()
    }
}
