use serde::{Deserialize, Serialize};

use super::DataError;

/// Axis-aligned slot rectangle in normalised image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    fn contains(&self, px: f64, py: f64) -> bool {
        px >= self.x && px <= self.x + self.w && py >= self.y && py <= self.y + self.h
    }

    fn overlaps(&self, other: &Rect) -> bool {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        ix > 1e-12 && iy > 1e-12
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }
}

/// Interface geometry: slot rectangles over a patch grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layout {
    pub id: String,
    pub slots: Vec<Rect>,
    /// `[rows, cols]` of visual patches covering the unit square.
    pub patch_grid: [usize; 2],
}

impl Layout {
    /// `rows × cols` carousel grid filling the image, slots numbered row-major.
    pub fn grid(id: &str, rows: usize, cols: usize, patch_rows: usize, patch_cols: usize) -> Self {
        let (w, h) = (1.0 / cols as f64, 1.0 / rows as f64);
        let slots = (0..rows * cols)
            .map(|n| Rect {
                x: (n % cols) as f64 * w,
                y: (n / cols) as f64 * h,
                w,
                h,
            })
            .collect();
        Self {
            id: id.into(),
            slots,
            patch_grid: [patch_rows, patch_cols],
        }
    }

    /// Vertically stacked list of full-width results.
    pub fn vertical_list(id: &str, n: usize, patch_rows: usize, patch_cols: usize) -> Self {
        Self::grid(id, n, 1, patch_rows, patch_cols)
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn num_patches(&self) -> usize {
        self.patch_grid[0] * self.patch_grid[1]
    }

    fn layout_err(&self, message: String) -> DataError {
        DataError::Layout {
            id: self.id.clone(),
            message,
        }
    }

    /// Slot owning each patch (row-major), `None` for background patches.
    /// A patch centre on a shared boundary goes to the lower-indexed slot.
    pub fn patch_slot_map(&self) -> Result<Vec<Option<usize>>, DataError> {
        let [rows, cols] = self.patch_grid;
        if rows == 0 || cols == 0 {
            return Err(self.layout_err("empty patch grid".into()));
        }
        for (i, r) in self.slots.iter().enumerate() {
            let valid = [r.x, r.y, r.w, r.h].iter().all(|v| v.is_finite())
                && r.w > 0.0
                && r.h > 0.0
                && r.x >= 0.0
                && r.y >= 0.0
                && r.x + r.w <= 1.0 + 1e-9
                && r.y + r.h <= 1.0 + 1e-9;
            if !valid {
                return Err(self.layout_err(format!("slot {i} rectangle {r:?} outside the unit square")));
            }
            for (j, other) in self.slots.iter().enumerate().skip(i + 1) {
                if r.overlaps(other) {
                    return Err(self.layout_err(format!("slots {i} and {j} overlap")));
                }
            }
        }
        let mut map = Vec::with_capacity(rows * cols);
        for pr in 0..rows {
            for pc in 0..cols {
                let cx = (pc as f64 + 0.5) / cols as f64;
                let cy = (pr as f64 + 0.5) / rows as f64;
                map.push(self.slots.iter().position(|s| s.contains(cx, cy)));
            }
        }
        Ok(map)
    }
}
