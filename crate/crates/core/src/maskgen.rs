//! Artificial forgery masks: the all-zeros and all-ones masks, and the
//! convex-hull mask rasterized from facial landmarks.
//!
//! Rasterization convention: pixel (r, c) samples its center point
//! (c+0.5, r+0.5), and centers exactly on a polygon edge are included.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary H×W label image; 1 marks the positive class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::dim(format!(
                "mask data length {} does not match {h}x{w}",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Contract("mask values must be 0 or 1".into()));
        }
        Ok(Mask { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        self.data[r * self.w + c] = v & 1;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Sub-mask of `size×size` starting at (top, left).
    pub fn crop(&self, top: usize, left: usize, size: usize) -> Result<Mask> {
        if top + size > self.h || left + size > self.w {
            return Err(Error::dim(format!(
                "crop {size} at ({top},{left}) exceeds mask {}x{}",
                self.h, self.w
            )));
        }
        let mut data = Vec::with_capacity(size * size);
        for r in top..top + size {
            data.extend_from_slice(&self.data[r * self.w + left..r * self.w + left + size]);
        }
        Ok(Mask {
            h: size,
            w: size,
            data,
        })
    }
}

/// All pixels real.
pub fn zeros_mask(h: usize, w: usize) -> Mask {
    Mask {
        h,
        w,
        data: vec![0; h * w],
    }
}

/// All pixels generated.
pub fn ones_mask(h: usize, w: usize) -> Mask {
    Mask {
        h,
        w,
        data: vec![1; h * w],
    }
}

/// 2-D landmark points in the pixel frame of the cropped image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LandmarkSet {
    points: Vec<[f64; 2]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::Contract(format!(
                "landmark set needs at least 3 points, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Contract("non-finite landmark coordinate".into()));
        }
        Ok(LandmarkSet { points })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Convex hull by monotone chain: counter-clockwise vertex order, collinear
/// interior points dropped. Errors when all points are collinear.
pub fn convex_hull(points: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    let mut pts: Vec<[f64; 2]> = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite coordinates"));
    pts.dedup();
    if pts.len() < 3 {
        return Err(Error::DegenerateHull(format!(
            "{} distinct points",
            pts.len()
        )));
    }

    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    if lower.len() < 3 {
        return Err(Error::DegenerateHull("all points collinear".into()));
    }
    Ok(lower)
}

/// Pixel center inside-or-on-boundary test for a counter-clockwise convex
/// polygon: non-negative cross product against every directed edge.
pub fn point_in_convex(poly: &[[f64; 2]], x: f64, y: f64) -> bool {
    let n = poly.len();
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        let c = (q[0] - p[0]) * (y - p[1]) - (q[1] - p[1]) * (x - p[0]);
        if c < 0.0 {
            return false;
        }
    }
    true
}

/// Scanline fill of a convex polygon onto an `h×w` mask. Pixel (r, c) is set
/// iff its center (c+0.5, r+0.5) lies inside or on the polygon; parts of the
/// polygon outside the image are clipped.
pub fn rasterize_hull(polygon: &[[f64; 2]], h: usize, w: usize) -> Mask {
    let mut mask = zeros_mask(h, w);
    if polygon.len() < 3 {
        return mask;
    }
    // Normalize to counter-clockwise orientation (positive signed area).
    let mut poly: Vec<[f64; 2]> = polygon.to_vec();
    let area2: f64 = (0..poly.len())
        .map(|i| {
            let p = poly[i];
            let q = poly[(i + 1) % poly.len()];
            p[0] * q[1] - q[0] * p[1]
        })
        .sum();
    if area2 < 0.0 {
        poly.reverse();
    }

    let y_min = poly.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let y_max = poly.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
    let r_lo = (y_min - 0.5).ceil().max(0.0) as usize;
    let r_hi = ((y_max - 0.5).floor().min(h as f64 - 1.0)).max(0.0);
    if (y_max - 0.5).floor() < 0.0 {
        return mask;
    }
    let r_hi = r_hi as usize;

    for r in r_lo..=r_hi.min(h.saturating_sub(1)) {
        let y = r as f64 + 0.5;
        // Intersect half-planes with the horizontal line at y.
        let mut xl = f64::NEG_INFINITY;
        let mut xr = f64::INFINITY;
        let mut row_empty = false;
        for i in 0..poly.len() {
            let p = poly[i];
            let q = poly[(i + 1) % poly.len()];
            let dx = q[0] - p[0];
            let dy = q[1] - p[1];
            // Constraint dx·(y−p.y) − dy·(x−p.x) ≥ 0 resolved for x.
            if dy > 0.0 {
                xr = xr.min(dx * (y - p[1]) / dy + p[0]);
            } else if dy < 0.0 {
                xl = xl.max(dx * (y - p[1]) / dy + p[0]);
            } else if dx * (y - p[1]) < 0.0 {
                row_empty = true;
                break;
            }
        }
        if row_empty || xl > xr {
            continue;
        }
        // A 1-pixel guard band around the interval endpoints gets the exact
        // per-center test; the interior span is filled directly.
        let c_lo = ((xl - 1.5).ceil().max(0.0)) as usize;
        if (xr + 0.5).floor() < 0.0 {
            continue;
        }
        let c_hi = (((xr + 0.5).floor()).min(w as f64 - 1.0)).max(0.0) as usize;
        if c_lo >= w {
            continue;
        }
        for c in c_lo..=c_hi.min(w - 1) {
            let x = c as f64 + 0.5;
            let v = if x >= xl + 1.0 && x <= xr - 1.0 {
                true
            } else {
                point_in_convex(&poly, x, y)
            };
            if v {
                mask.set(r, c, 1);
            }
        }
    }
    mask
}

/// Positive class for every pixel inside the convex hull of the landmarks.
pub fn convex_hull_mask(landmarks: &LandmarkSet, h: usize, w: usize) -> Result<Mask> {
    let hull = convex_hull(landmarks.points())?;
    Ok(rasterize_hull(&hull, h, w))
}

// ── File formats ───────────────────────────────────────────────────

/// Landmark file: JSON array of [x, y] pairs in cropped-image coordinates.
pub fn load_landmarks(path: &Path) -> Result<LandmarkSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let points: Vec<[f64; 2]> = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("landmark file {}: {e}", path.display())))?;
    LandmarkSet::new(points)
}

pub fn save_landmarks(landmarks: &LandmarkSet, path: &Path) -> Result<()> {
    let text = serde_json::to_string(landmarks.points())
        .map_err(|e| Error::format(format!("landmark serialization: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Mask file: 8-bit grayscale PNG holding 0 or 255.
pub fn save_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    let pixels: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    let img = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, pixels)
        .expect("buffer sized from mask dims");
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Load a grayscale PNG as a mask, thresholding at 128.
pub fn load_mask_png(path: &Path) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let data: Vec<u8> = img.into_raw().iter().map(|&v| u8::from(v >= 128)).collect();
    Mask::new(h as usize, w as usize, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_and_ones_masks() {
        let z = zeros_mask(4, 4);
        assert_eq!(z.count_ones(), 0);
        let o = ones_mask(5, 3);
        assert_eq!(o.count_ones(), 15);
        assert_eq!(o.height(), 5);
        assert_eq!(o.width(), 3);
    }

    #[test]
    fn hull_of_triangle_is_triangle() {
        let hull = convex_hull(&[[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]]).unwrap();
        assert_eq!(hull.len(), 3);
        for p in [[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]] {
            assert!(hull.contains(&p));
        }
    }

    #[test]
    fn hull_drops_interior_point() {
        let hull =
            convex_hull(&[[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0], [2.0, 2.0]]).unwrap();
        assert_eq!(hull.len(), 4);
        assert!(!hull.contains(&[2.0, 2.0]));
    }

    #[test]
    fn hull_is_counter_clockwise() {
        let hull = convex_hull(&[[1.0, 0.0], [3.0, 2.0], [0.5, 2.5], [2.0, 0.5]]).unwrap();
        let area2: f64 = (0..hull.len())
            .map(|i| {
                let p = hull[i];
                let q = hull[(i + 1) % hull.len()];
                p[0] * q[1] - q[0] * p[1]
            })
            .sum();
        assert!(area2 > 0.0);
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let err = convex_hull(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]).unwrap_err();
        assert!(matches!(err, Error::DegenerateHull(_)));
    }

    #[test]
    fn landmark_set_needs_three_points() {
        assert!(LandmarkSet::new(vec![[0.0, 0.0], [1.0, 1.0]]).is_err());
    }

    #[test]
    fn rasterize_lower_left_triangle() {
        let mask = rasterize_hull(&[[0.0, 0.0], [8.0, 0.0], [0.0, 8.0]], 8, 8);
        assert_eq!(mask.get(0, 0), 1);
        assert_eq!(mask.get(7, 7), 0);
        // centers on the hypotenuse x+y=8 count as inside
        assert_eq!(mask.get(3, 4), 1);
        assert_eq!(mask.get(4, 4), 0);
    }

    #[test]
    fn hull_covering_image_equals_ones() {
        let mask = rasterize_hull(
            &[[-1.0, -1.0], [10.0, -1.0], [10.0, 10.0], [-1.0, 10.0]],
            6,
            6,
        );
        assert_eq!(mask, ones_mask(6, 6));
    }

    #[test]
    fn hull_outside_bounds_equals_zeros() {
        let mask = rasterize_hull(&[[20.0, 20.0], [30.0, 20.0], [25.0, 30.0]], 8, 8);
        assert_eq!(mask, zeros_mask(8, 8));
    }

    #[test]
    fn cvm_mask_composes_hull_and_raster() {
        let lm = LandmarkSet::new(vec![[0.0, 0.0], [8.0, 0.0], [0.0, 8.0], [2.0, 2.0]]).unwrap();
        let composed = convex_hull_mask(&lm, 8, 8).unwrap();
        let direct = rasterize_hull(&convex_hull(lm.points()).unwrap(), 8, 8);
        assert_eq!(composed, direct);
    }

    #[test]
    fn mask_png_roundtrip() {
        let dir = std::env::temp_dir().join(format!("fg_maskio_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let mask = rasterize_hull(&[[0.5, 0.5], [7.0, 1.0], [4.0, 7.5]], 8, 8);
        let path = dir.join("m.png");
        save_mask_png(&mask, &path).unwrap();
        let loaded = load_mask_png(&path).unwrap();
        assert_eq!(mask, loaded);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn crop_window_contents() {
        let mut mask = zeros_mask(6, 6);
        mask.set(2, 3, 1);
        let crop = mask.crop(1, 2, 4).unwrap();
        assert_eq!(crop.get(1, 1), 1);
        assert_eq!(crop.count_ones(), 1);
        assert!(mask.crop(4, 4, 4).is_err());
    }
}
