//! Training-time geometric augmentation: square crop, quarter turns, flips, resize.

use crate::error::{Error, Result};
use crate::image::tile::{resize_bilinear, ImageTile, CHANNELS};
use crate::rng::CounterRng;

pub const MIN_CROP_SCALE: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Crop edge as a fraction of the shorter tile edge, in `[0.8, 1]`.
    pub crop_scale: f64,
    /// Crop origin as fractions of the free margin, each in `[0, 1]`.
    pub offset_y: f64,
    pub offset_x: f64,
    /// Counter-clockwise rotation in multiples of 90°.
    pub quarter_turns: u8,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        crop_scale: 1.0,
        offset_y: 0.0,
        offset_x: 0.0,
        quarter_turns: 0,
        flip_h: false,
        flip_v: false,
    };

    pub fn sample(rng: &mut CounterRng) -> Self {
        Self {
            crop_scale: rng.uniform_range(MIN_CROP_SCALE, 1.0),
            offset_y: rng.uniform(),
            offset_x: rng.uniform(),
            quarter_turns: rng.below(4) as u8,
            flip_h: rng.bernoulli(0.5),
            flip_v: rng.bernoulli(0.5),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_CROP_SCALE..=1.0).contains(&self.crop_scale) {
            return Err(Error::domain(format!("crop scale {} outside [0.8, 1]", self.crop_scale)));
        }
        if !(0.0..=1.0).contains(&self.offset_y) || !(0.0..=1.0).contains(&self.offset_x) {
            return Err(Error::domain("crop offsets must lie in [0, 1]"));
        }
        if self.quarter_turns > 3 {
            return Err(Error::domain("quarter turns must be 0..=3"));
        }
        Ok(())
    }
}

/// Apply `p` to `tile` and resample to `out × out`.
pub fn augment(tile: &ImageTile, p: &AugmentParams, out: usize) -> Result<ImageTile> {
    p.validate()?;
    if out == 0 {
        return Err(Error::domain("output size must be positive"));
    }
    let (h, w) = (tile.height, tile.width);
    let side = ((p.crop_scale * h.min(w) as f64).round() as usize).clamp(1, h.min(w));
    let y0 = (p.offset_y * (h - side) as f64).round() as usize;
    let x0 = (p.offset_x * (w - side) as f64).round() as usize;

    let mut buf = vec![0f32; CHANNELS * side * side];
    for c in 0..CHANNELS {
        for y in 0..side {
            for x in 0..side {
                // destination (y, x) after rotation/flip reads source (sy, sx) of the crop
                let (mut sy, mut sx) = (y, x);
                if p.flip_v {
                    sy = side - 1 - sy;
                }
                if p.flip_h {
                    sx = side - 1 - sx;
                }
                let (ry, rx) = unrotate(sy, sx, side, p.quarter_turns);
                buf[(c * side + y) * side + x] = tile.at(c, y0 + ry, x0 + rx);
            }
        }
    }
    let pixels = resize_bilinear(&buf, side, side, out, out);
    ImageTile::new(out, out, pixels, tile.key.clone())
}

/// Source coordinate that lands at `(y, x)` after `k` counter-clockwise quarter turns.
fn unrotate(y: usize, x: usize, n: usize, k: u8) -> (usize, usize) {
    match k % 4 {
        0 => (y, x),
        1 => (x, n - 1 - y),
        2 => (n - 1 - y, n - 1 - x),
        _ => (n - 1 - x, y),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::TileKey;

    fn ramp(n: usize) -> ImageTile {
        let total = CHANNELS * n * n;
        let px = (0..total).map(|i| i as f32 / total as f32).collect();
        ImageTile::new(n, n, px, TileKey::default()).unwrap()
    }

    #[test]
    fn identity_is_noop() {
        let t = ramp(6);
        assert_eq!(augment(&t, &AugmentParams::IDENTITY, 6).unwrap(), t);
    }

    #[test]
    fn four_quarter_turns_compose_to_identity() {
        let t = ramp(5);
        let p = AugmentParams { quarter_turns: 1, ..AugmentParams::IDENTITY };
        let mut cur = t.clone();
        for _ in 0..4 {
            cur = augment(&cur, &p, 5).unwrap();
        }
        assert_eq!(cur, t);
    }

    #[test]
    fn quarter_turn_moves_top_right_to_top_left() {
        let t = ramp(3);
        let p = AugmentParams { quarter_turns: 1, ..AugmentParams::IDENTITY };
        let r = augment(&t, &p, 3).unwrap();
        assert_eq!(r.at(0, 0, 0), t.at(0, 0, 2));
    }

    #[test]
    fn rejects_bad_scale() {
        let p = AugmentParams { crop_scale: 0.5, ..AugmentParams::IDENTITY };
        assert!(augment(&ramp(4), &p, 4).is_err());
    }
}
