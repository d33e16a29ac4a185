//! Pose conventions, angle arithmetic, ground-truth label construction and
//! the image-space panorama manipulations.
//!
//! Aerial pixel coordinates: `u` runs along the first (row) axis with 0 at the
//! North edge, `v` along the second (column) axis with 0 at the West edge.
//! Heading 0 means North (up in the aerial image) and increases clockwise, so
//! the unit heading direction in `(u, v)` coordinates is `(-cos h, sin h)`.

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Tensor, TensorError};

/// Planar location in aerial-image pixels plus heading in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose3Dof {
    pub u: f64,
    pub v: f64,
    /// Degrees in `[0, 360)`, 0 = North, clockwise.
    pub heading: f64,
}

impl Pose3Dof {
    pub fn new(u: f64, v: f64, heading: f64) -> Self {
        Pose3Dof {
            u,
            v,
            heading: normalize_degrees(heading),
        }
    }

    /// Nearest pixel indices under the pixel-center convention.
    pub fn gt_pixel(&self, size: usize) -> (usize, usize) {
        let clamp = |x: f64| ((x - 0.5).round().max(0.0) as usize).min(size - 1);
        (clamp(self.u), clamp(self.v))
    }
}

/// Isotropic ground-resolution scale of an aerial image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetersPerPixel(pub f64);

impl MetersPerPixel {
    pub fn new(scale: f64) -> Result<Self> {
        if scale > 0.0 && scale.is_finite() {
            Ok(MetersPerPixel(scale))
        } else {
            Err(TensorError::Shape(format!(
                "meters-per-pixel scale must be positive, got {scale}"
            )))
        }
    }
}

/// Smooth ground-truth localization distribution.
#[derive(Debug, Clone)]
pub struct GaussianLabel {
    /// `size x size` map, normalized to sum 1, peaked at `gt_pixel`.
    pub map: Tensor<f32>,
    pub sigma: f64,
    pub gt_pixel: (usize, usize),
}

pub fn normalize_degrees(d: f64) -> f64 {
    let mut x = d % 360.0;
    if x < 0.0 {
        x += 360.0;
    }
    x
}

/// Minimal angular difference in degrees, in `[0, 180]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).abs() % 360.0;
    d.min(360.0 - d)
}

/// Places a normalized 2-D Gaussian at the ground-truth pixel.
pub fn make_label(gt: &Pose3Dof, size: usize, sigma: f64) -> Result<GaussianLabel> {
    if sigma <= 0.0 {
        return Err(TensorError::Shape(format!("sigma must be > 0, got {sigma}")));
    }
    if gt.u < 0.0 || gt.v < 0.0 || gt.u >= size as f64 || gt.v >= size as f64 {
        return Err(TensorError::Shape(format!(
            "ground truth ({}, {}) lies outside a {size}x{size} image",
            gt.u, gt.v
        )));
    }
    let (iu, iv) = gt.gt_pixel(size);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut map = Tensor::zeros(&[size, size]);
    let mut sum = 0.0f64;
    for i in 0..size {
        for j in 0..size {
            let di = i as f64 - iu as f64;
            let dj = j as f64 - iv as f64;
            let val = (-(di * di + dj * dj) * inv).exp();
            map.data_mut()[i * size + j] = val as f32;
            sum += val;
        }
    }
    for v in map.data_mut() {
        *v = (*v as f64 / sum) as f32;
    }
    Ok(GaussianLabel {
        map,
        sigma,
        gt_pixel: (iu, iv),
    })
}

/// Circular column shift of a full panorama by `delta` degrees clockwise.
/// A camera rotated clockwise by `delta` sees the panorama shifted left, i.e.
/// `out[c] = in[(c + round(W*delta/360)) mod W]`.
pub fn shift_panorama(ground: &Tensor<f32>, delta: f64) -> Result<Tensor<f32>> {
    let shape = ground.shape();
    if shape.len() != 3 {
        return Err(TensorError::Shape(format!(
            "shift_panorama expects [h,w,3], got {shape:?}"
        )));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let cols = (w as f64 * delta / 360.0).round() as i64;
    let shift = cols.rem_euclid(w as i64) as usize;
    let mut out = Tensor::zeros(shape);
    for row in 0..h {
        for col in 0..w {
            let src = (row * w + (col + shift) % w) * c;
            let dst = (row * w + col) * c;
            out.data_mut()[dst..dst + c].copy_from_slice(&ground.data()[src..src + c]);
        }
    }
    Ok(out)
}

/// Columns a shift by `delta` degrees maps to, after snapping to the grid.
pub fn shift_columns(width: usize, delta: f64) -> i64 {
    (width as f64 * delta / 360.0).round() as i64
}

/// Effective degrees of a whole-column shift.
pub fn columns_to_degrees(width: usize, cols: i64) -> f64 {
    normalize_degrees(cols as f64 * 360.0 / width as f64)
}

/// Crops a panorama to `fov` degrees, centered on the forward column.
/// The crop keeps source columns `[(w - w')/2, (w - w')/2 + w')`.
pub fn crop_fov(ground: &Tensor<f32>, fov: f64) -> Result<Tensor<f32>> {
    let shape = ground.shape();
    if shape.len() != 3 {
        return Err(TensorError::Shape(format!(
            "crop_fov expects [h,w,3], got {shape:?}"
        )));
    }
    if fov <= 0.0 || fov > 360.0 {
        return Err(TensorError::Shape(format!(
            "field of view must be in (0, 360], got {fov}"
        )));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let w_crop = ((w as f64 * fov / 360.0).round() as usize).clamp(1, w);
    if w_crop == w {
        return Ok(ground.clone());
    }
    let start = (w - w_crop) / 2;
    let mut out = Tensor::zeros(&[h, w_crop, c]);
    for row in 0..h {
        let src = (row * w + start) * c;
        let dst = row * w_crop * c;
        out.data_mut()[dst..dst + w_crop * c]
            .copy_from_slice(&ground.data()[src..src + w_crop * c]);
    }
    Ok(out)
}

/// Width in columns of a `fov`-degree crop of a `width`-column panorama.
pub fn fov_columns(width: usize, fov: f64) -> usize {
    ((width as f64 * fov / 360.0).round() as usize).clamp(1, width)
}

/// Splits the localization error into components perpendicular (lateral) and
/// parallel (longitudinal) to the ground-truth heading, in meters. Absolute
/// values are returned.
pub fn decompose_error(
    pred: &Pose3Dof,
    gt: &Pose3Dof,
    scale: MetersPerPixel,
) -> (f64, f64) {
    let du = (pred.u - gt.u) * scale.0;
    let dv = (pred.v - gt.v) * scale.0;
    let h = gt.heading.to_radians();
    // Heading direction in (u, v): (-cos h, sin h); lateral axis: (sin h, cos h).
    let longitudinal = -du * h.cos() + dv * h.sin();
    let lateral = du * h.sin() + dv * h.cos();
    (lateral.abs(), longitudinal.abs())
}

/// Euclidean localization error in meters.
pub fn localization_error_m(pred: &Pose3Dof, gt: &Pose3Dof, scale: MetersPerPixel) -> f64 {
    let du = pred.u - gt.u;
    let dv = pred.v - gt.v;
    (du * du + dv * dv).sqrt() * scale.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn angle_diff_examples() {
        assert_eq!(angle_diff(350.0, 10.0), 20.0);
        assert_eq!(angle_diff(90.0, 90.0), 0.0);
        assert_eq!(angle_diff(0.0, 180.0), 180.0);
    }

    #[test]
    fn label_sums_to_one_and_peaks_at_gt() {
        let gt = Pose3Dof::new(20.3, 41.8, 0.0);
        let label = make_label(&gt, 64, 2.5).unwrap();
        let sum: f64 = label.map.data().iter().map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() < 1e-5);
        assert_eq!(label.gt_pixel, (20, 41));
        let peak = label.map.at2(20, 41);
        assert!(label.map.data().iter().all(|&v| v <= peak));
    }

    #[test]
    fn label_neighbor_ratio_is_analytic() {
        let gt = Pose3Dof::new(32.5, 32.5, 0.0);
        let sigma = 2.5;
        let label = make_label(&gt, 64, sigma).unwrap();
        let peak = label.map.at2(32, 32) as f64;
        let neighbor = label.map.at2(32, 33) as f64;
        let expected = (-1.0 / (2.0 * sigma * sigma)).exp();
        assert!((neighbor / peak - expected).abs() < 1e-6);
    }

    #[test]
    fn label_small_sigma_approaches_one_hot() {
        let gt = Pose3Dof::new(10.5, 10.5, 0.0);
        let label = make_label(&gt, 64, 0.25).unwrap();
        assert!(label.map.at2(10, 10) > 0.99);
    }

    #[test]
    fn label_rejects_out_of_bounds_gt() {
        let gt = Pose3Dof::new(64.0, 5.0, 0.0);
        assert!(make_label(&gt, 64, 2.5).is_err());
    }

    #[test]
    fn shift_by_zero_and_full_turn_is_identity() {
        let img = Tensor::from_vec(&[1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(shift_panorama(&img, 0.0).unwrap(), img);
        assert_eq!(shift_panorama(&img, 360.0).unwrap(), img);
    }

    #[test]
    fn shift_then_unshift_is_identity() {
        let img = Tensor::from_vec(&[2, 8, 1], (0..16).map(|v| v as f32).collect()).unwrap();
        let delta = 3.0 * 360.0 / 8.0;
        let back = shift_panorama(&shift_panorama(&img, delta).unwrap(), -delta).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn shift_matches_column_loop_oracle() {
        let w = 360;
        let data: Vec<f32> = (0..w).map(|c| (c * 7 % 31) as f32).collect();
        let img = Tensor::from_vec(&[1, w, 1], data.clone()).unwrap();
        let shifted = shift_panorama(&img, 90.0).unwrap();
        for c in 0..w {
            assert_eq!(shifted.data()[c], data[(c + 90) % w]);
        }
    }

    #[test]
    fn crop_full_fov_is_identity() {
        let img = Tensor::from_vec(&[2, 8, 1], (0..16).map(|v| v as f32).collect()).unwrap();
        assert_eq!(crop_fov(&img, 360.0).unwrap(), img);
    }

    #[test]
    fn crop_half_fov_keeps_centered_columns() {
        let mut data = vec![0.0f32; 64];
        for (c, v) in data.iter_mut().enumerate() {
            *v = c as f32;
        }
        let img = Tensor::from_vec(&[1, 64, 1], data).unwrap();
        let cropped = crop_fov(&img, 180.0).unwrap();
        assert_eq!(cropped.shape(), &[1, 32, 1]);
        for c in 0..32 {
            assert_eq!(cropped.data()[c], (16 + c) as f32);
        }
    }

    #[test]
    fn crop_commutes_with_shift_on_stripes() {
        // crop(shift(p, delta), f) equals slicing the shifted stripe pattern.
        let w = 64;
        let mut rng = crate::rng::stream(5, "stripes", 0);
        let data: Vec<f32> = (0..w).map(|_| crate::rng::randn(&mut rng) as f32).collect();
        let img = Tensor::from_vec(&[1, w, 1], data.clone()).unwrap();
        for &(delta_cols, fov) in &[(5i64, 180.0), (17, 90.0), (40, 247.5)] {
            let delta = delta_cols as f64 * 360.0 / w as f64;
            let got = crop_fov(&shift_panorama(&img, delta).unwrap(), fov).unwrap();
            let w_crop = fov_columns(w, fov);
            let start = (w - w_crop) / 2;
            for c in 0..w_crop {
                let src = (start + c + delta_cols as usize) % w;
                assert_eq!(got.data()[c], data[src], "col {c}");
            }
        }
    }

    #[test]
    fn crop_rejects_widened_fov() {
        let img = Tensor::zeros(&[1, 8, 3]);
        assert!(crop_fov(&img, 361.0).is_err());
        assert!(crop_fov(&img, 0.0).is_err());
    }

    #[test]
    fn decompose_error_examples() {
        let scale = MetersPerPixel(1.0);
        let gt = Pose3Dof::new(10.0, 10.0, 0.0);
        assert_eq!(decompose_error(&gt, &gt, scale), (0.0, 0.0));
        // 3 px due East with heading North: purely lateral.
        let pred = Pose3Dof::new(10.0, 13.0, 0.0);
        let (lat, lon) = decompose_error(&pred, &gt, scale);
        assert!((lat - 3.0).abs() < 1e-12 && lon.abs() < 1e-12);
    }

    #[test]
    fn decompose_matches_rotation_matrix_oracle() {
        let mut rng = crate::rng::stream(9, "decomp", 0);
        for _ in 0..50 {
            let gt = Pose3Dof::new(
                32.0 + crate::rng::randn(&mut rng),
                32.0 + crate::rng::randn(&mut rng),
                crate::rng::randn(&mut rng) * 90.0 + 180.0,
            );
            let pred = Pose3Dof::new(
                gt.u + crate::rng::randn(&mut rng) * 3.0,
                gt.v + crate::rng::randn(&mut rng) * 3.0,
                0.0,
            );
            let scale = MetersPerPixel(1.09);
            let (lat, lon) = decompose_error(&pred, &gt, scale);
            // Oracle: rotate the east/north error vector by the heading.
            let east = (pred.v - gt.v) * scale.0;
            let north = -(pred.u - gt.u) * scale.0;
            let h = gt.heading.to_radians();
            let lon_o = north * h.cos() + east * h.sin();
            let lat_o = -north * h.sin() + east * h.cos();
            assert!((lon - lon_o.abs()).abs() < 1e-9);
            assert!((lat - lat_o.abs()).abs() < 1e-9);
            // Pythagoras against the straight-line error.
            let d = localization_error_m(&pred, &gt, scale);
            assert!((lat * lat + lon * lon - d * d).abs() < 1e-6);
        }
    }
}
