//! Thin-plate splines and a simple image warper for previewing keypoint
//! sequences.
//!
//! A transform maps `p` to `A [p; 1] + sum_i w_i U(|p - s_i|)` with
//! `U(r) = r^2 log r^2` and `U(0) = 0`. Preview warps solve in normalized
//! image coordinates; pixel `(x, y)` corresponds to `(x / W, y / H)`.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::write_json;
use crate::error::{Error, Result};
use crate::types::{KeypointFrame, KeypointSequence};

pub type Point = [f64; 2];

pub const DEFAULT_LAMBDA: f64 = 1e-3;
pub const DISC_RADIUS: i64 = 3;

pub fn tps_kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

fn dist2(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpsTransform {
    pub src: Vec<Point>,
    /// Row `d` holds `[coef_x, coef_y, offset]` for output coordinate `d`.
    pub affine: [[f64; 3]; 2],
    pub weights: Vec<Point>,
    pub lambda: f64,
}

/// Relative spread of the points along their thinnest direction.
fn thinness(points: &[Point]) -> f64 {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p[0] - cx, p[1] - cy);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let tr = sxx + syy;
    if tr <= 0.0 {
        return 0.0;
    }
    let det = sxx * syy - sxy * sxy;
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let small = tr / 2.0 - disc;
    (small.max(0.0) / tr).sqrt()
}

/// Solves for the spline taking `src` to `dst`; `lambda > 0` relaxes exact
/// interpolation.
pub fn solve_tps(src: &[Point], dst: &[Point], lambda: f64) -> Result<TpsTransform> {
    let p = src.len();
    if p < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 control points, got {p}")));
    }
    if dst.len() != p {
        return Err(Error::Shape(format!("{p} source points but {} targets", dst.len())));
    }
    if src.iter().chain(dst).any(|q| !q[0].is_finite() || !q[1].is_finite()) {
        return Err(Error::InvalidArgument("control points must be finite".into()));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument("lambda must be finite and non-negative".into()));
    }
    if thinness(src) < 1e-9 {
        return Err(Error::Singular("source control points are collinear or coincident".into()));
    }
    let n = p + 3;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for i in 0..p {
        for j in 0..p {
            l[(i, j)] = tps_kernel(dist2(src[i], src[j]));
        }
        l[(i, i)] += lambda;
        l[(i, p)] = 1.0;
        l[(i, p + 1)] = src[i][0];
        l[(i, p + 2)] = src[i][1];
        l[(p, i)] = 1.0;
        l[(p + 1, i)] = src[i][0];
        l[(p + 2, i)] = src[i][1];
    }
    let mut rhs = DMatrix::<f64>::zeros(n, 2);
    for i in 0..p {
        rhs[(i, 0)] = dst[i][0];
        rhs[(i, 1)] = dst[i][1];
    }
    let sol = l
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("thin-plate-spline system is singular".into()))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("thin-plate-spline solution is not finite".into()));
    }
    let weights = (0..p).map(|i| [sol[(i, 0)], sol[(i, 1)]]).collect();
    let affine = [
        [sol[(p + 1, 0)], sol[(p + 2, 0)], sol[(p, 0)]],
        [sol[(p + 1, 1)], sol[(p + 2, 1)], sol[(p, 1)]],
    ];
    Ok(TpsTransform {
        src: src.to_vec(),
        affine,
        weights,
        lambda,
    })
}

impl TpsTransform {
    pub fn identity(src: &[Point]) -> Self {
        Self {
            src: src.to_vec(),
            affine: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            weights: vec![[0.0, 0.0]; src.len()],
            lambda: 0.0,
        }
    }

    pub fn apply_point(&self, q: Point) -> Point {
        let a = &self.affine;
        let mut out = [
            a[0][0] * q[0] + a[0][1] * q[1] + a[0][2],
            a[1][0] * q[0] + a[1][1] * q[1] + a[1][2],
        ];
        for (s, w) in self.src.iter().zip(&self.weights) {
            let u = tps_kernel(dist2(q, *s));
            out[0] += w[0] * u;
            out[1] += w[1] * u;
        }
        out
    }

    pub fn weight_norm(&self) -> f64 {
        self.weights.iter().map(|w| w[0] * w[0] + w[1] * w[1]).sum::<f64>().sqrt()
    }
}

pub fn apply_tps(t: &TpsTransform, points: &[Point]) -> Vec<Point> {
    points.iter().map(|p| t.apply_point(*p)).collect()
}

/// Row-major `H x W x C` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::Shape(format!("image {width}x{height}x{channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "image {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("image values must be finite".into()));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn blank(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::new(width, height, channels, vec![0.0; width * height * channels])
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, data)
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Bilinear sample at pixel coordinates, clamped to the border.
    pub fn sample(&self, x: f64, y: f64, c: usize) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let top = self.get(x0, y0, c) * (1.0 - fx) + self.get(x1, y0, c) * fx;
        let bottom = self.get(x0, y1, c) * (1.0 - fx) + self.get(x1, y1, c) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn to_rgb(&self) -> Self {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Self {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (channels, raw) = if img.color().has_color() {
            (3, img.to_rgb8().into_raw())
        } else {
            (1, img.to_luma8().into_raw())
        };
        Self::new(w, h, channels, raw.into_iter().map(|v| v as f64 / 255.0).collect())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let res = if self.channels == 3 {
            image::RgbImage::from_raw(w, h, raw).expect("sized buffer").save(path)
        } else {
            image::GrayImage::from_raw(w, h, raw).expect("sized buffer").save(path)
        };
        res.map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

/// Backward warp: output pixel `q` takes the source value at `map(q)`.
pub fn warp_with(img: &ImageGrid, map: impl Fn(Point) -> Point) -> ImageGrid {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let s = map([x as f64, y as f64]);
            for c in 0..img.channels {
                out.set(x, y, c, img.sample(s[0], s[1], c));
            }
        }
    }
    out
}

/// Backward warp with a transform expressed in pixel coordinates.
pub fn warp_image(img: &ImageGrid, t_inverse: &TpsTransform) -> ImageGrid {
    warp_with(img, |q| t_inverse.apply_point(q))
}

/// Backward warp with a transform expressed in normalized coordinates.
pub fn warp_image_normalized(img: &ImageGrid, t_inverse: &TpsTransform) -> ImageGrid {
    let (w, h) = (img.width as f64, img.height as f64);
    warp_with(img, |q| {
        let s = t_inverse.apply_point([q[0] / w, q[1] / h]);
        [s[0] * w, s[1] * h]
    })
}

/// Deterministic, well-separated color for keypoint `i`.
pub fn keypoint_color(i: usize) -> [f64; 3] {
    let hue = (i as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let x = 1.0 - ((hue % 2.0) - 1.0).abs();
    match hue as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Draws every keypoint as a filled disc. Returns the image and the number
/// of points that had to be clipped into `[0, 1]^2`.
pub fn render_overlay(frame: &KeypointFrame, canvas: &ImageGrid) -> (ImageGrid, usize) {
    let mut out = canvas.to_rgb();
    let (w, h) = (out.width as i64, out.height as i64);
    let mut clipped = 0;
    for (i, p) in frame.coords.iter().enumerate() {
        let (x, y) = (p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0));
        if x != p[0] || y != p[1] || !p[0].is_finite() || !p[1].is_finite() {
            clipped += 1;
        }
        let x = if x.is_finite() { x } else { 0.0 };
        let y = if y.is_finite() { y } else { 0.0 };
        let cx = ((x * w as f64).round() as i64).min(w - 1);
        let cy = ((y * h as f64).round() as i64).min(h - 1);
        let color = keypoint_color(i);
        for dy in -DISC_RADIUS..=DISC_RADIUS {
            for dx in -DISC_RADIUS..=DISC_RADIUS {
                if dx * dx + dy * dy > DISC_RADIUS * DISC_RADIUS {
                    continue;
                }
                let (px, py) = (cx + dx, cy + dy);
                if px < 0 || py < 0 || px >= w || py >= h {
                    continue;
                }
                for (c, v) in color.iter().enumerate() {
                    out.set(px as usize, py as usize, c, *v);
                }
            }
        }
    }
    if clipped > 0 {
        log::warn!("{clipped} keypoint(s) outside [0, 1] clipped to the border");
    }
    (out, clipped)
}

pub const PREVIEW_META_FILE: &str = "preview_meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreviewMeta {
    pub fidelity: String,
    pub lambda: f64,
    #[serde(rename = "K")]
    pub num_keypoints: usize,
    pub num_frames: usize,
    pub skipped_frames: Vec<usize>,
}

pub fn frame_file_name(i: usize) -> String {
    format!("frame_{i:05}.png")
}

/// Warps the source image to every driving frame with one global spline
/// (driving keypoints back to source keypoints), overlays the driving
/// keypoints and writes `frame_XXXXX.png` plus `preview_meta.json`.
///
/// Frames whose spline cannot be solved are skipped with a warning.
pub fn preview_sequence(
    source: &ImageGrid,
    source_kp: &KeypointFrame,
    driving: &KeypointSequence,
    out_dir: &Path,
    lambda: f64,
) -> Result<PreviewMeta> {
    if driving.num_keypoints() != source_kp.num_keypoints() {
        return Err(Error::KeypointMismatch {
            expected: source_kp.num_keypoints(),
            found: driving.num_keypoints(),
        });
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let results: Vec<Result<bool>> = (0..driving.len())
        .into_par_iter()
        .map(|i| {
            let frame = driving.frame(i);
            match solve_tps(&frame.coords, &source_kp.coords, lambda) {
                Ok(t) => {
                    let warped = warp_image_normalized(source, &t);
                    let (img, _) = render_overlay(&frame, &warped);
                    img.save_png(&out_dir.join(frame_file_name(i)))?;
                    Ok(true)
                }
                Err(e @ (Error::Singular(_) | Error::InvalidArgument(_))) => {
                    log::warn!("frame {i}: {e}; skipped");
                    Ok(false)
                }
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut skipped = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        if !r? {
            skipped.push(i);
        }
    }
    let meta = PreviewMeta {
        fidelity: "tps-preview".into(),
        lambda,
        num_keypoints: source_kp.num_keypoints(),
        num_frames: driving.len(),
        skipped_frames: skipped,
    };
    write_json(&out_dir.join(PREVIEW_META_FILE), &meta)?;
    Ok(meta)
}
