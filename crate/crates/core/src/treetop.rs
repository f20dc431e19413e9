//! Treetop candidate detection on a canopy height model: height clipping,
//! Gaussian smoothing, then windowed local-maxima extraction with plateau
//! suppression.

use crate::error::{Error, Result};
use crate::geodata::RasterCube;

/// Detection parameters. Heights are meters, window sizes pixels.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TreetopConfig {
    pub clip_lo: f32,
    pub clip_hi: f32,
    pub sigma: f64,
    pub window: usize,
    pub h_min: f32,
}

impl Default for TreetopConfig {
    fn default() -> Self {
        TreetopConfig {
            clip_lo: 5.0,
            clip_hi: 40.0,
            sigma: 1.0,
            window: 5,
            h_min: 5.0,
        }
    }
}

impl TreetopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_lo < self.clip_hi) {
            return Err(Error::Validation(format!(
                "clip_lo {} must be below clip_hi {}",
                self.clip_lo, self.clip_hi
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Validation(format!("sigma {} must be > 0", self.sigma)));
        }
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::Validation(format!(
                "window {} must be odd and >= 3",
                self.window
            )));
        }
        Ok(())
    }
}

/// A detected treetop pixel and its smoothed-CHM height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Treetop {
    pub x: usize,
    pub y: usize,
    pub height: f32,
}

/// Mirror-at-edge index (edge pixel included), so borders see reflected
/// interior values instead of an artificial falloff.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= sum;
    }
    kernel
}

/// Clamps heights to `[clip_lo, clip_hi]` (NaN and sub-floor values go to
/// `clip_lo`), then applies a separable Gaussian truncated at 3σ with
/// reflect padding. Output is a 1-band cube on the same grid.
pub fn preprocess_chm(chm: &RasterCube, cfg: &TreetopConfig) -> Result<RasterCube> {
    cfg.validate()?;
    if chm.bands != 1 {
        return Err(Error::Validation(format!(
            "CHM '{}' has {} bands, expected 1",
            chm.name, chm.bands
        )));
    }
    let (w, h) = (chm.width, chm.height);
    let clamped: Vec<f64> = chm
        .values
        .iter()
        .map(|&v| {
            if v.is_nan() || v < cfg.clip_lo {
                cfg.clip_lo as f64
            } else if v > cfg.clip_hi {
                cfg.clip_hi as f64
            } else {
                v as f64
            }
        })
        .collect();
    let kernel = gaussian_kernel(cfg.sigma);
    let radius = (kernel.len() / 2) as isize;

    // Horizontal then vertical pass.
    let mut tmp = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let xi = reflect(x as isize + k as isize - radius, w);
                acc += clamped[y * w + xi] * kv;
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = RasterCube::zeros(w, h, 1, &chm.name);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let yi = reflect(y as isize + k as isize - radius, h);
                acc += tmp[yi * w + x] * kv;
            }
            out.values[y * w + x] = acc as f32;
        }
    }
    Ok(out)
}

/// Center weight of the normalized 2-D kernel, for impulse-response checks.
pub fn kernel_center_weight(sigma: f64) -> f64 {
    let k = gaussian_kernel(sigma);
    let c = k[k.len() / 2];
    c * c
}

/// Extracts windowed local maxima from a preprocessed CHM.
///
/// A pixel survives iff its height is at least `h_min`, no pixel in its
/// window is higher, and no equal-height pixel in the window precedes it
/// in (y, x) scan order; the latter collapses each flat plateau to a
/// single representative. Border windows clip at the raster edge.
pub fn detect_treetops(smoothed: &RasterCube, cfg: &TreetopConfig) -> Result<Vec<Treetop>> {
    cfg.validate()?;
    if smoothed.bands != 1 {
        return Err(Error::Validation(format!(
            "CHM '{}' has {} bands, expected 1",
            smoothed.name, smoothed.bands
        )));
    }
    let (w, h) = (smoothed.width, smoothed.height);
    let r = (cfg.window / 2) as isize;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = smoothed.values[y * w + x];
            if v < cfg.h_min {
                continue;
            }
            let mut dominated = false;
            'scan: for dy in -r..=r {
                let yy = y as isize + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in -r..=r {
                    let xx = x as isize + dx;
                    if xx < 0 || xx >= w as isize || (dx == 0 && dy == 0) {
                        continue;
                    }
                    let q = smoothed.values[yy as usize * w + xx as usize];
                    if q > v || (q == v && (yy, xx) < (y as isize, x as isize)) {
                        dominated = true;
                        break 'scan;
                    }
                }
            }
            if !dominated {
                out.push(Treetop { x, y, height: v });
            }
        }
    }
    Ok(out)
}

/// Preprocess + detect in one call.
pub fn find_treetops(chm: &RasterCube, cfg: &TreetopConfig) -> Result<Vec<Treetop>> {
    let smoothed = preprocess_chm(chm, cfg)?;
    detect_treetops(&smoothed, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flat(w: usize, h: usize, v: f32) -> RasterCube {
        let mut c = RasterCube::zeros(w, h, 1, "chm");
        c.values.fill(v);
        c
    }

    /// Reference scan used by the equivalence tests: O(N · window²).
    fn brute_force(smoothed: &RasterCube, cfg: &TreetopConfig) -> Vec<Treetop> {
        let r = (cfg.window / 2) as isize;
        let (w, h) = (smoothed.width, smoothed.height);
        let mut out = Vec::new();
        for y in 0..h as isize {
            for x in 0..w as isize {
                let v = smoothed.values[y as usize * w + x as usize];
                if v < cfg.h_min {
                    continue;
                }
                let mut keep = true;
                for yy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                    for xx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                        if yy == y && xx == x {
                            continue;
                        }
                        let q = smoothed.values[yy as usize * w + xx as usize];
                        if q > v || (q == v && (yy, xx) < (y, x)) {
                            keep = false;
                        }
                    }
                }
                if keep {
                    out.push(Treetop {
                        x: x as usize,
                        y: y as usize,
                        height: v,
                    });
                }
            }
        }
        out
    }

    #[test]
    fn constant_raster_unchanged_by_smoothing() {
        let cfg = TreetopConfig::default();
        let chm = flat(9, 7, 10.0);
        let smoothed = preprocess_chm(&chm, &cfg).unwrap();
        for &v in &smoothed.values {
            assert!((v - 10.0).abs() < 1e-5, "{v}");
        }
    }

    #[test]
    fn values_above_clip_hi_are_clamped_before_smoothing() {
        let cfg = TreetopConfig::default();
        let chm = flat(9, 9, 50.0);
        let smoothed = preprocess_chm(&chm, &cfg).unwrap();
        for &v in &smoothed.values {
            assert!((v - 40.0).abs() < 1e-5, "{v}");
        }
    }

    #[test]
    fn impulse_response_matches_kernel_center_weight() {
        let cfg = TreetopConfig::default();
        let mut chm = flat(15, 15, cfg.clip_lo);
        let peak = 30.0f32;
        chm.set(7, 7, 0, peak);
        let smoothed = preprocess_chm(&chm, &cfg).unwrap();
        let k00 = kernel_center_weight(cfg.sigma);
        let expect = cfg.clip_lo as f64 + (peak as f64 - cfg.clip_lo as f64) * k00;
        assert!(
            (smoothed.get(7, 7, 0) as f64 - expect).abs() < 1e-5,
            "got {} want {}",
            smoothed.get(7, 7, 0),
            expect
        );
    }

    #[test]
    fn nan_maps_to_ground_level() {
        let cfg = TreetopConfig::default();
        let mut chm = flat(9, 9, cfg.clip_lo);
        chm.set(4, 4, 0, f32::NAN);
        let smoothed = preprocess_chm(&chm, &cfg).unwrap();
        for &v in &smoothed.values {
            assert!((v - cfg.clip_lo).abs() < 1e-5);
        }
    }

    #[test]
    fn multi_band_input_rejected() {
        let cfg = TreetopConfig::default();
        let chm = RasterCube::zeros(4, 4, 2, "x");
        assert!(preprocess_chm(&chm, &cfg).is_err());
        assert!(detect_treetops(&chm, &cfg).is_err());
    }

    #[test]
    fn fully_flat_raster_at_hmin_keeps_one_candidate() {
        let cfg = TreetopConfig::default();
        let chm = flat(5, 5, cfg.h_min);
        let tops = detect_treetops(&chm, &cfg).unwrap();
        assert_eq!(tops.len(), 1);
        assert_eq!((tops[0].x, tops[0].y), (0, 0));
    }

    #[test]
    fn single_bump_yields_single_candidate_at_peak() {
        let cfg = TreetopConfig::default();
        let mut chm = flat(21, 21, 5.0);
        for y in 0..21 {
            for x in 0..21 {
                let d2 = (x as f64 - 10.0).powi(2) + (y as f64 - 10.0).powi(2);
                let v = 5.0 + 15.0 * (-d2 / 8.0).exp();
                chm.set(x, y, 0, v as f32);
            }
        }
        let tops = find_treetops(&chm, &cfg).unwrap();
        assert_eq!(tops.len(), 1);
        assert_eq!((tops[0].x, tops[0].y), (10, 10));
    }

    #[test]
    fn close_bumps_suppress_and_distant_bumps_survive() {
        let cfg = TreetopConfig::default();
        let bump = |chm: &mut RasterCube, cx: f64, peak: f64| {
            for y in 0..chm.height {
                for x in 0..chm.width {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - 12.0).powi(2);
                    let v = chm.get(x, y, 0).max((5.0 + (peak - 5.0) * (-d2 / 3.0).exp()) as f32);
                    chm.set(x, y, 0, v);
                }
            }
        };
        // 3 px apart with window 5: the shorter peak is inside the taller
        // peak's window.
        let mut close = flat(25, 25, 5.0);
        bump(&mut close, 10.0, 30.0);
        bump(&mut close, 13.0, 20.0);
        let tops = detect_treetops(&close, &cfg).unwrap();
        assert_eq!(tops.len(), 1, "{tops:?}");
        assert_eq!((tops[0].x, tops[0].y), (10, 12));

        let mut far = flat(25, 25, 5.0);
        bump(&mut far, 9.0, 30.0);
        bump(&mut far, 15.0, 20.0);
        let tops = detect_treetops(&far, &cfg).unwrap();
        assert_eq!(tops.len(), 2, "{tops:?}");
    }

    #[test]
    fn detection_matches_brute_force_on_random_rasters() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..60 {
            let w = rng.random_range(3..=64);
            let h = rng.random_range(3..=64);
            let mut chm = RasterCube::zeros(w, h, 1, "rand");
            for v in chm.values.iter_mut() {
                // Duplicate values on purpose: plateau handling must agree.
                *v = rng.random_range(0..80) as f32 / 2.0;
            }
            let mut cfg = TreetopConfig::default();
            cfg.window = [3, 5, 7][case % 3];
            let smoothed = preprocess_chm(&chm, &cfg).unwrap();
            let fast = detect_treetops(&smoothed, &cfg).unwrap();
            let slow = brute_force(&smoothed, &cfg);
            assert_eq!(fast, slow, "case {case} {w}x{h} window {}", cfg.window);
        }
    }

    #[test]
    fn raising_hmin_never_adds_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut chm = RasterCube::zeros(32, 32, 1, "rand");
        for v in chm.values.iter_mut() {
            *v = rng.random::<f32>() * 35.0;
        }
        let mut cfg = TreetopConfig::default();
        let smoothed = preprocess_chm(&chm, &cfg).unwrap();
        let mut prev: Option<Vec<Treetop>> = None;
        for h_min in [5.0f32, 10.0, 15.0, 20.0, 25.0] {
            cfg.h_min = h_min;
            let tops = detect_treetops(&smoothed, &cfg).unwrap();
            if let Some(prev) = &prev {
                for t in &tops {
                    assert!(prev.contains(t), "raising h_min added {t:?}");
                }
            }
            prev = Some(tops);
        }
    }
}
