//! Data model and I/O for co-registered rasters, labeled samples,
//! polygon-aware splits, and per-band feature standardization.
//!
//! Cubes are stored on disk as a raw little-endian float32 band-sequential
//! payload (`<name>.f32`) next to a JSON sidecar (`<name>.json`) carrying
//! `{width, height, bands, dtype, layout, nodata, band_names[]}`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sentinel for pixels outside every labeled region.
pub const UNLABELED: i32 = -1;

// ---------------------------------------------------------------------------
// RasterCube
// ---------------------------------------------------------------------------

/// A width × height × bands grid of 32-bit float measurements.
///
/// Values are band-sequential: band plane by band plane, each plane
/// row-major. `nodata` defaults to NaN; NaN payload bits survive a
/// save/load round trip untouched.
#[derive(Debug, Clone)]
pub struct RasterCube {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub values: Vec<f32>,
    pub nodata: f32,
    pub name: String,
    pub band_names: Vec<String>,
}

impl PartialEq for RasterCube {
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.bands == other.bands
            && self.nodata.to_bits() == other.nodata.to_bits()
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl RasterCube {
    /// Zero-filled cube.
    pub fn zeros(width: usize, height: usize, bands: usize, name: &str) -> Self {
        RasterCube {
            width,
            height,
            bands,
            values: vec![0.0; width * height * bands],
            nodata: f32::NAN,
            name: name.to_string(),
            band_names: Vec::new(),
        }
    }

    pub fn from_values(
        width: usize,
        height: usize,
        bands: usize,
        values: Vec<f32>,
        name: &str,
    ) -> Result<Self> {
        if values.len() != width * height * bands {
            return Err(Error::Validation(format!(
                "cube '{}': {} values, expected {}x{}x{} = {}",
                name,
                values.len(),
                width,
                height,
                bands,
                width * height * bands
            )));
        }
        Ok(RasterCube {
            width,
            height,
            bands,
            values,
            nodata: f32::NAN,
            name: name.to_string(),
            band_names: Vec::new(),
        })
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, band: usize) -> usize {
        band * self.width * self.height + y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, band: usize) -> f32 {
        self.values[self.index(x, y, band)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, band: usize, v: f32) {
        let i = self.index(x, y, band);
        self.values[i] = v;
    }

    /// True when `v` equals the nodata sentinel (NaN-aware).
    #[inline]
    pub fn is_nodata(&self, v: f32) -> bool {
        if self.nodata.is_nan() {
            v.is_nan()
        } else {
            v == self.nodata
        }
    }

    /// Feature vector of all bands at one pixel.
    pub fn pixel(&self, x: usize, y: usize) -> Vec<f32> {
        (0..self.bands).map(|b| self.get(x, y, b)).collect()
    }

    /// Checks the type invariants: value count and finiteness of
    /// non-nodata entries.
    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.width * self.height * self.bands {
            return Err(Error::Validation(format!(
                "cube '{}': {} values, expected {}",
                self.name,
                self.values.len(),
                self.width * self.height * self.bands
            )));
        }
        for (i, &v) in self.values.iter().enumerate() {
            if !v.is_finite() && !self.is_nodata(v) {
                return Err(Error::Validation(format!(
                    "cube '{}': non-finite value {} at flat index {}",
                    self.name, v, i
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CubeHeader {
    width: usize,
    height: usize,
    bands: usize,
    dtype: String,
    layout: String,
    /// `null` encodes a NaN sentinel (JSON has no NaN literal).
    nodata: Option<f64>,
    #[serde(default)]
    band_names: Vec<String>,
}

/// Resolves `<stem>.json` / `<stem>.f32` from a path given with either
/// extension or none.
fn cube_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("f32") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    (stem.with_extension("json"), stem.with_extension("f32"))
}

/// Loads a cube from its header + payload pair.
pub fn load_cube(path: &Path) -> Result<RasterCube> {
    let (header_path, data_path) = cube_paths(path);
    let header_text =
        fs::read_to_string(&header_path).map_err(|e| Error::io_at(&header_path, e))?;
    let header: CubeHeader = serde_json::from_str(&header_text)
        .map_err(|e| Error::Validation(format!("{}: bad header: {}", header_path.display(), e)))?;
    if header.dtype != "f32" {
        return Err(Error::Validation(format!(
            "{}: unsupported dtype '{}', only f32 is supported",
            header_path.display(),
            header.dtype
        )));
    }
    if header.layout != "bsq" {
        return Err(Error::Validation(format!(
            "{}: unsupported layout '{}', only bsq is supported",
            header_path.display(),
            header.layout
        )));
    }
    let bytes = fs::read(&data_path).map_err(|e| Error::io_at(&data_path, e))?;
    let expected = header.width * header.height * header.bands * 4;
    if bytes.len() != expected {
        return Err(Error::Validation(format!(
            "{}: payload is {} bytes, header implies {} ({}x{}x{} f32)",
            data_path.display(),
            bytes.len(),
            expected,
            header.width,
            header.height,
            header.bands
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let name = data_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("cube")
        .to_string();
    Ok(RasterCube {
        width: header.width,
        height: header.height,
        bands: header.bands,
        values,
        nodata: header.nodata.map(|v| v as f32).unwrap_or(f32::NAN),
        name,
        band_names: header.band_names,
    })
}

/// Writes the header + payload pair for `cube`.
pub fn save_cube(cube: &RasterCube, path: &Path) -> Result<()> {
    cube.validate()?;
    let (header_path, data_path) = cube_paths(path);
    let header = CubeHeader {
        width: cube.width,
        height: cube.height,
        bands: cube.bands,
        dtype: "f32".to_string(),
        layout: "bsq".to_string(),
        nodata: if cube.nodata.is_nan() {
            None
        } else {
            Some(cube.nodata as f64)
        },
        band_names: cube.band_names.clone(),
    };
    let header_text = serde_json::to_string_pretty(&header)
        .map_err(|e| Error::Io(format!("header serialization: {e}")))?;
    fs::write(&header_path, header_text).map_err(|e| Error::io_at(&header_path, e))?;
    let mut bytes = Vec::with_capacity(cube.values.len() * 4);
    for v in &cube.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&data_path, bytes).map_err(|e| Error::io_at(&data_path, e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Label maps
// ---------------------------------------------------------------------------

/// Per-pixel class indices with -1 marking unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<i32>,
}

impl LabelMap {
    pub fn unlabeled(width: usize, height: usize) -> Self {
        LabelMap {
            width,
            height,
            labels: vec![UNLABELED; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> i32 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, label: i32) {
        self.labels[y * self.width + x] = label;
    }

    /// Stores the map as a 1-band f32 cube (-1 for unlabeled).
    pub fn to_cube(&self, name: &str) -> RasterCube {
        let mut cube = RasterCube::zeros(self.width, self.height, 1, name);
        for (dst, &src) in cube.values.iter_mut().zip(&self.labels) {
            *dst = src as f32;
        }
        cube
    }

    /// Reads a map back from a 1-band f32 cube; values must be integral
    /// and ≥ -1.
    pub fn from_cube(cube: &RasterCube) -> Result<Self> {
        if cube.bands != 1 {
            return Err(Error::Validation(format!(
                "label raster '{}' has {} bands, expected 1",
                cube.name, cube.bands
            )));
        }
        let mut labels = Vec::with_capacity(cube.values.len());
        for &v in &cube.values {
            if cube.is_nodata(v) {
                labels.push(UNLABELED);
                continue;
            }
            if v.fract() != 0.0 || v < -1.0 {
                return Err(Error::Validation(format!(
                    "label raster '{}': value {} is not a class index",
                    cube.name, v
                )));
            }
            labels.push(v as i32);
        }
        Ok(LabelMap {
            width: cube.width,
            height: cube.height,
            labels,
        })
    }
}

// ---------------------------------------------------------------------------
// Polygons and rasterization
// ---------------------------------------------------------------------------

/// A circular reference polygon around a surveyed tree crown center.
#[derive(Debug, Clone, PartialEq)]
pub struct PolygonLabel {
    pub polygon_id: u32,
    pub center_x: f64,
    pub center_y: f64,
    pub radius: f64,
    pub label: usize,
}

impl PolygonLabel {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(Error::Validation(format!(
                "polygon {}: radius {} must be > 0",
                self.polygon_id, self.radius
            )));
        }
        Ok(())
    }
}

/// Reads `polygon_id,center_x,center_y,radius,label` CSV.
pub fn read_polygons_csv(path: &Path) -> Result<Vec<PolygonLabel>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    parse_polygons_csv(&text)
}

pub fn parse_polygons_csv(text: &str) -> Result<Vec<PolygonLabel>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Validation(format!("polygon csv: {e}")))?;
        if record.len() != 5 {
            return Err(Error::Validation(format!(
                "polygon csv row {}: {} fields, expected 5",
                i + 1,
                record.len()
            )));
        }
        let field = |j: usize, name: &str| -> Result<f64> {
            record[j].trim().parse::<f64>().map_err(|_| {
                Error::Validation(format!(
                    "polygon csv row {}: bad {} '{}'",
                    i + 1,
                    name,
                    &record[j]
                ))
            })
        };
        let poly = PolygonLabel {
            polygon_id: field(0, "polygon_id")? as u32,
            center_x: field(1, "center_x")?,
            center_y: field(2, "center_y")?,
            radius: field(3, "radius")?,
            label: field(4, "label")? as usize,
        };
        poly.validate()?;
        out.push(poly);
    }
    Ok(out)
}

pub fn write_polygons_csv(polygons: &[PolygonLabel], path: &Path) -> Result<()> {
    let mut text = String::from("polygon_id,center_x,center_y,radius,label\n");
    for p in polygons {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            p.polygon_id, p.center_x, p.center_y, p.radius, p.label
        ));
    }
    fs::write(path, text).map_err(|e| Error::io_at(path, e))
}

/// Rasterizes circle polygons onto a pixel grid.
///
/// A pixel (x, y) takes label L iff its center lies within Euclidean
/// distance `radius` of a polygon center labeled L. Where polygons
/// overlap the smallest `polygon_id` wins. Out-of-bounds portions clip.
pub fn rasterize_polygons(polygons: &[PolygonLabel], width: usize, height: usize) -> LabelMap {
    rasterize_polygons_with_owners(polygons, width, height).0
}

/// Same as [`rasterize_polygons`] but also reports which polygon claimed
/// each pixel (-1 for none).
pub fn rasterize_polygons_with_owners(
    polygons: &[PolygonLabel],
    width: usize,
    height: usize,
) -> (LabelMap, Vec<i64>) {
    let mut map = LabelMap::unlabeled(width, height);
    let mut owners = vec![-1i64; width * height];
    let mut order: Vec<&PolygonLabel> = polygons.iter().collect();
    order.sort_by_key(|p| p.polygon_id);
    for poly in order {
        let r = poly.radius;
        let x0 = (poly.center_x - r).floor().max(0.0) as usize;
        let x1 = (poly.center_x + r).ceil().min((width.max(1) - 1) as f64) as usize;
        let y0 = (poly.center_y - r).floor().max(0.0) as usize;
        let y1 = (poly.center_y + r).ceil().min((height.max(1) - 1) as f64) as usize;
        if width == 0 || height == 0 {
            continue;
        }
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = x as f64 - poly.center_x;
                let dy = y as f64 - poly.center_y;
                if dx * dx + dy * dy <= r * r && map.get(x, y) == UNLABELED {
                    map.set(x, y, poly.label as i32);
                    owners[y * width + x] = poly.polygon_id as i64;
                }
            }
        }
    }
    (map, owners)
}

// ---------------------------------------------------------------------------
// Polygon-level splits
// ---------------------------------------------------------------------------

/// A split tag. Polygons are assigned whole; pixels inherit their
/// polygon's tag, so tree crowns never straddle splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Validation => write!(f, "validation"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Outcome of a polygon-level split: the per-polygon assignment plus any
/// small-class warnings.
#[derive(Debug, Clone, Serialize)]
pub struct SplitAssignment {
    pub by_polygon: BTreeMap<u32, Split>,
    pub warnings: Vec<String>,
}

/// Largest-remainder allocation of `n` items to three fractions.
/// Remainders tie toward the earlier bucket (train, then val, then test).
fn allocate(n: usize, fractions: (f64, f64, f64)) -> [usize; 3] {
    let fr = [fractions.0, fractions.1, fractions.2];
    let ideal: Vec<f64> = fr.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    let mut assigned = 0;
    for i in 0..3 {
        counts[i] = ideal[i].floor() as usize;
        assigned += counts[i];
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - ideal[a].floor();
        let rb = ideal[b] - ideal[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(n - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Assigns each polygon to train/validation/test, stratified per class,
/// with a seeded shuffle. Classes with fewer than 3 polygons go entirely
/// to train with a recorded warning.
pub fn split_by_polygon(
    polygons: &[PolygonLabel],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<SplitAssignment> {
    let sum = fractions.0 + fractions.1 + fractions.2;
    if fractions.0 < 0.0 || fractions.1 < 0.0 || fractions.2 < 0.0 || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!(
            "split fractions {:?} must be non-negative and sum to 1",
            fractions
        )));
    }
    // Distinct polygons; a polygon id must carry a single label.
    let mut label_of: BTreeMap<u32, usize> = BTreeMap::new();
    for p in polygons {
        match label_of.get(&p.polygon_id) {
            Some(&l) if l != p.label => {
                return Err(Error::Validation(format!(
                    "polygon {} appears with labels {} and {}",
                    p.polygon_id, l, p.label
                )))
            }
            _ => {
                label_of.insert(p.polygon_id, p.label);
            }
        }
    }
    let mut per_class: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
    for (&id, &label) in &label_of {
        per_class.entry(label).or_default().push(id);
    }
    let mut assignment = SplitAssignment {
        by_polygon: BTreeMap::new(),
        warnings: Vec::new(),
    };
    for (&label, ids) in per_class.iter_mut() {
        if ids.len() < 3 {
            assignment.warnings.push(format!(
                "class {} has only {} polygon(s); assigning all to train",
                label,
                ids.len()
            ));
            for &id in ids.iter() {
                assignment.by_polygon.insert(id, Split::Train);
            }
            continue;
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (label as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        ids.shuffle(&mut rng);
        let counts = allocate(ids.len(), fractions);
        for (i, &id) in ids.iter().enumerate() {
            let split = if i < counts[0] {
                Split::Train
            } else if i < counts[0] + counts[1] {
                Split::Validation
            } else {
                Split::Test
            };
            assignment.by_polygon.insert(id, split);
        }
    }
    Ok(assignment)
}

// ---------------------------------------------------------------------------
// Labeled samples
// ---------------------------------------------------------------------------

/// One labeled training pixel with both feature streams.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub x: usize,
    pub y: usize,
    pub hsi: Vec<f32>,
    pub als: Vec<f32>,
    pub label: usize,
    pub polygon_id: u32,
    pub split: Split,
}

/// Rasterizes polygons over the cube grid and extracts one sample per
/// labeled pixel, carrying the owning polygon's split tag.
pub fn extract_samples(
    hsi: &RasterCube,
    als: &RasterCube,
    polygons: &[PolygonLabel],
    assignment: &SplitAssignment,
) -> Result<Vec<LabeledSample>> {
    if hsi.width != als.width || hsi.height != als.height {
        return Err(Error::Validation(format!(
            "cube grids differ: hsi {}x{}, als {}x{}",
            hsi.width, hsi.height, als.width, als.height
        )));
    }
    let (map, owners) = rasterize_polygons_with_owners(polygons, hsi.width, hsi.height);
    let mut samples = Vec::new();
    for y in 0..hsi.height {
        for x in 0..hsi.width {
            let label = map.get(x, y);
            if label == UNLABELED {
                continue;
            }
            let polygon_id = owners[y * hsi.width + x] as u32;
            let split = *assignment.by_polygon.get(&polygon_id).ok_or_else(|| {
                Error::Validation(format!("polygon {} has no split assignment", polygon_id))
            })?;
            samples.push(LabeledSample {
                x,
                y,
                hsi: hsi.pixel(x, y),
                als: als.pixel(x, y),
                label: label as usize,
                polygon_id,
                split,
            });
        }
    }
    Ok(samples)
}

// ---------------------------------------------------------------------------
// Standardization
// ---------------------------------------------------------------------------

/// Which feature stream a standardizer was fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureStream {
    Hsi,
    Als,
}

/// Per-band mean/std fitted on training features only (population std).
/// Bands with std below 1e-12 are degenerate and map to 0.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit_rows<'a, I>(rows: I, bands: usize) -> Result<Standardizer>
    where
        I: Iterator<Item = &'a [f32]> + Clone,
    {
        let n = rows.clone().count();
        if n == 0 {
            return Err(Error::Validation(
                "cannot fit a standardizer on an empty training set".to_string(),
            ));
        }
        let mut mean = vec![0.0f64; bands];
        for row in rows.clone() {
            if row.len() != bands {
                return Err(Error::Validation(format!(
                    "standardizer: row has {} bands, expected {}",
                    row.len(),
                    bands
                )));
            }
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut var = vec![0.0f64; bands];
        for row in rows {
            for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(row) {
                let d = v as f64 - m;
                *s += d * d;
            }
        }
        let std = var.iter().map(|s| (s / n as f64).sqrt()).collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, v: &[f32]) -> Vec<f32> {
        v.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&x, (&m, &s))| {
                if s < 1e-12 {
                    0.0
                } else {
                    ((x as f64 - m) / s) as f32
                }
            })
            .collect()
    }
}

/// Fits a standardizer on the chosen stream of the given samples.
pub fn fit_standardizer(samples: &[LabeledSample], which: FeatureStream) -> Result<Standardizer> {
    let bands = match which {
        FeatureStream::Hsi => samples.first().map(|s| s.hsi.len()).unwrap_or(0),
        FeatureStream::Als => samples.first().map(|s| s.als.len()).unwrap_or(0),
    };
    match which {
        FeatureStream::Hsi => Standardizer::fit_rows(samples.iter().map(|s| s.hsi.as_slice()), bands),
        FeatureStream::Als => Standardizer::fit_rows(samples.iter().map(|s| s.als.as_slice()), bands),
    }
}

// ---------------------------------------------------------------------------
// Class lists
// ---------------------------------------------------------------------------

/// Reads an ordered class list, one name per line; index = line number.
pub fn read_class_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    let classes: Vec<String> = text
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    if classes.is_empty() {
        return Err(Error::Validation(format!(
            "{}: class list is empty",
            path.display()
        )));
    }
    Ok(classes)
}

pub fn write_class_list(classes: &[String], path: &Path) -> Result<()> {
    let mut text = classes.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io_at(path, e))
}

/// Checks the polygon-split leakage invariant: every pixel of a polygon
/// carries exactly the polygon's split tag.
pub fn check_split_leakage(samples: &[LabeledSample]) -> Result<()> {
    let mut seen: HashMap<u32, Split> = HashMap::new();
    for s in samples {
        match seen.get(&s.polygon_id) {
            Some(&split) if split != s.split => {
                return Err(Error::Validation(format!(
                    "polygon {} appears in both {} and {}",
                    s.polygon_id, split, s.split
                )))
            }
            _ => {
                seen.insert(s.polygon_id, s.split);
            }
        }
    }
    Ok(())
}
