//! Test-set construction: spatial information and colorfulness of images,
//! MOS-band sampling, and BT.500 subject screening.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{csv_field, DatasetManifest};

/// Row-major 8-bit-range samples with 1 (luminance) or 3 (RGB) channels.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub samples: Vec<f64>,
}

impl PixelImage {
    pub fn new(width: usize, height: usize, channels: usize, samples: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be >= 1"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("unsupported channel count {channels}")));
        }
        if samples.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "{} samples for a {width}x{height}x{channels} image",
                samples.len()
            )));
        }
        if let Some(&bad) = samples.iter().find(|s| !s.is_finite()) {
            return Err(Error::NonFinite(bad));
        }
        Ok(Self {
            width,
            height,
            channels,
            samples,
        })
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let mut samples = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    samples.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, samples)
    }

    fn at(&self, x: usize, y: usize) -> f64 {
        self.samples[y * self.width + x]
    }

    /// Rec.601 luma; single-channel images are returned unchanged.
    pub fn luma(&self) -> PixelImage {
        if self.channels == 1 {
            return self.clone();
        }
        let samples = self
            .samples
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        PixelImage {
            width: self.width,
            height: self.height,
            channels: 1,
            samples,
        }
    }

    /// Parses binary PGM (`P5`) or PPM (`P6`) with maxval 255.
    pub fn from_pnm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut token = || -> Result<String> {
            loop {
                match bytes.get(pos) {
                    Some(b'#') => {
                        while pos < bytes.len() && bytes[pos] != b'\n' {
                            pos += 1;
                        }
                    }
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(_) => break,
                    None => return Err(Error::invalid("truncated PNM header")),
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
                pos += 1;
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let channels = match token()?.as_str() {
            "P5" => 1,
            "P6" => 3,
            other => return Err(Error::invalid(format!("unsupported PNM magic `{other}` (expected P5 or P6)"))),
        };
        let mut number = |what: &str| -> Result<usize> {
            let t = token()?;
            t.parse().map_err(|_| Error::invalid(format!("bad PNM {what} `{t}`")))
        };
        let width = number("width")?;
        let height = number("height")?;
        let maxval = number("maxval")?;
        if maxval != 255 {
            return Err(Error::invalid(format!("PNM maxval {maxval} unsupported (expected 255)")));
        }
        // exactly one whitespace byte separates the header from the raster
        let raster = bytes.get(pos + 1..).unwrap_or_default();
        let need = width * height * channels;
        if raster.len() < need {
            return Err(Error::invalid(format!("PNM raster has {} bytes, expected {need}", raster.len())));
        }
        Self::new(width, height, channels, raster[..need].iter().map(|&b| b as f64).collect())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pnm(&bytes)
    }

    /// Binary PGM/PPM encoding; samples are rounded and clamped to `0..=255`.
    pub fn to_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.samples.iter().map(|s| s.round().clamp(0.0, 255.0) as u8));
        out
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Population standard deviation of the 3×3 Sobel gradient magnitude over
/// interior pixels. RGB input is reduced to luma first.
pub fn spatial_information(img: &PixelImage) -> Result<f64> {
    if img.width < 3 || img.height < 3 {
        return Err(Error::invalid(format!("SI needs at least 3x3 pixels, got {}x{}", img.width, img.height)));
    }
    let lum = img.luma();
    let mut mags = Vec::with_capacity((lum.width - 2) * (lum.height - 2));
    for y in 1..lum.height - 1 {
        for x in 1..lum.width - 1 {
            let p = |dx: isize, dy: isize| lum.at((x as isize + dx) as usize, (y as isize + dy) as usize);
            let gx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let gy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            mags.push(gx.hypot(gy));
        }
    }
    Ok(mean_std(mags.iter().copied()).1)
}

/// Hasler–Süsstrunk colorfulness with population statistics.
pub fn colorfulness(img: &PixelImage) -> Result<f64> {
    if img.channels != 3 {
        return Err(Error::invalid(format!("colorfulness needs RGB input, got {} channel(s)", img.channels)));
    }
    let px = img.samples.chunks_exact(3);
    let rg = px.clone().map(|p| p[0] - p[1]);
    let yb = px.map(|p| 0.5 * (p[0] + p[1]) - p[2]);
    let (mu_rg, sd_rg) = mean_std(rg);
    let (mu_yb, sd_yb) = mean_std(yb);
    Ok(sd_rg.hypot(sd_yb) + 0.3 * mu_rg.hypot(mu_yb))
}

pub const BAND_NAMES: [&str; 5] = ["bad", "poor", "fair", "good", "excellent"];

/// Index of the equal-width quality band of `mos` on `scale`; the top band
/// is closed.
pub fn band_of(mos: f64, scale: (f64, f64)) -> Option<usize> {
    let (lo, hi) = scale;
    if !(lo..=hi).contains(&mos) {
        return None;
    }
    let k = ((mos - lo) / (hi - lo) * 5.0).floor() as usize;
    Some(k.min(4))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSummary {
    pub band: String,
    pub candidates: usize,
    pub taken: usize,
    pub shortfall: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MosSample {
    /// Selected images in input order.
    pub manifest: DatasetManifest,
    pub bands: Vec<BandSummary>,
}

/// Seeded selection of up to `k` images from each of five equal MOS bands of
/// the manifest's scale. Images sharing a `reference_id` are never both
/// selected.
pub fn uniform_mos_sample(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<MosSample> {
    let mut by_band: Vec<Vec<usize>> = vec![Vec::new(); 5];
    for (i, img) in manifest.images.iter().enumerate() {
        let mos = img.mos.ok_or_else(|| Error::MissingMos(img.id.clone()))?;
        let band = band_of(mos, manifest.mos_scale).ok_or(Error::MosOutOfRange {
            id: img.id.clone(),
            mos,
            min: manifest.mos_scale.0,
            max: manifest.mos_scale.1,
        })?;
        by_band[band].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used_refs: HashSet<&str> = HashSet::new();
    let mut chosen = vec![false; manifest.len()];
    let mut bands = Vec::with_capacity(5);
    for (b, mut members) in by_band.into_iter().enumerate() {
        let candidates = members.len();
        members.shuffle(&mut rng);
        let mut taken = 0;
        for i in members {
            if taken == k {
                break;
            }
            if let Some(r) = manifest.images[i].reference_id.as_deref() {
                if !used_refs.insert(r) {
                    continue;
                }
            }
            chosen[i] = true;
            taken += 1;
        }
        bands.push(BandSummary {
            band: BAND_NAMES[b].to_string(),
            candidates,
            taken,
            shortfall: taken < k,
        });
    }
    let images = manifest
        .images
        .iter()
        .zip(&chosen)
        .filter(|(_, &c)| c)
        .map(|(img, _)| img.clone())
        .collect();
    let subset = DatasetManifest {
        name: manifest.name.clone(),
        mos_scale: manifest.mos_scale,
        images,
    };
    Ok(MosSample { manifest: subset, bands })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurationRow {
    pub id: String,
    pub si: f64,
    /// `None` for grayscale images.
    pub cf: Option<f64>,
    pub band: Option<String>,
}

/// SI, CF and MOS band of every manifest image, reading PGM/PPM files
/// relative to `image_root`.
pub fn curation_report(manifest: &DatasetManifest, image_root: &Path) -> Result<Vec<CurationRow>> {
    manifest
        .images
        .iter()
        .map(|img| {
            let pixels = PixelImage::load(image_root.join(&img.file_ref))?;
            Ok(CurationRow {
                id: img.id.clone(),
                si: spatial_information(&pixels)?,
                cf: if pixels.channels == 3 { Some(colorfulness(&pixels)?) } else { None },
                band: img
                    .mos
                    .and_then(|m| band_of(m, manifest.mos_scale))
                    .map(|b| BAND_NAMES[b].to_string()),
            })
        })
        .collect()
}

pub fn curation_csv(rows: &[CurationRow]) -> String {
    let mut out = String::from("id,si,cf,band\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{},{}\n",
            csv_field(&r.id),
            r.si,
            r.cf.map(|c| format!("{c:.6}")).unwrap_or_default(),
            r.band.as_deref().unwrap_or_default()
        ));
    }
    out
}

/// Subjects × conditions opinion scores on `[0, 100]`; `None` is missing.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectScores {
    pub subjects: Vec<String>,
    pub conditions: Vec<String>,
    pub scores: Vec<Vec<Option<f64>>>,
}

impl SubjectScores {
    pub fn new(subjects: Vec<String>, conditions: Vec<String>, scores: Vec<Vec<Option<f64>>>) -> Result<Self> {
        if subjects.len() != scores.len() {
            return Err(Error::invalid("one score row per subject required"));
        }
        for (s, row) in subjects.iter().zip(&scores) {
            if row.len() != conditions.len() {
                return Err(Error::invalid(format!("subject `{s}` has {} scores for {} conditions", row.len(), conditions.len())));
            }
            for &v in row.iter().flatten() {
                if !(0.0..=100.0).contains(&v) {
                    return Err(Error::invalid(format!("subject `{s}`: score {v} outside [0, 100]")));
                }
            }
        }
        Ok(Self {
            subjects,
            conditions,
            scores,
        })
    }

    /// Dense matrix with generated subject and condition names.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        Self::new(
            (0..rows.len()).map(|s| format!("s{s}")).collect(),
            (0..m).map(|c| format!("c{c}")).collect(),
            rows.into_iter().map(|r| r.into_iter().map(Some).collect()).collect(),
        )
    }

    /// CSV with a `subject,<condition>...` header; empty cells are missing.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let conditions: Vec<String> = reader.headers()?.iter().skip(1).map(str::to_owned).collect();
        let mut subjects = Vec::new();
        let mut scores = Vec::new();
        for (k, rec) in reader.records().enumerate() {
            let rec = rec?;
            let row = k + 2;
            subjects.push(rec.get(0).unwrap_or_default().to_string());
            let values = rec
                .iter()
                .skip(1)
                .map(|cell| {
                    if cell.is_empty() {
                        Ok(None)
                    } else {
                        cell.parse::<f64>().map(Some).map_err(|_| Error::MalformedRow {
                            row,
                            message: format!("bad score `{cell}`"),
                        })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            scores.push(values);
        }
        Self::new(subjects, conditions, scores)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScreeningResult {
    pub kept: Vec<usize>,
    pub rejected: Vec<usize>,
    /// Per subject: scores above / below the condition bounds.
    pub above: Vec<usize>,
    pub below: Vec<usize>,
    /// Per condition mean over kept subjects.
    pub mos: Vec<Option<f64>>,
}

/// BT.500 observer screening: per condition, bounds of `μ ± 2s` when the
/// kurtosis lies in `[2, 4]` and `μ ± √20·s` otherwise; a subject is
/// rejected when more than 5% of their scores fall outside and the excess is
/// not one-sided (`|P−Q|/(P+Q) < 0.3`).
pub fn bt500_screen(data: &SubjectScores) -> Result<ScreeningResult> {
    let n = data.subjects.len();
    let m = data.conditions.len();
    if n < 3 {
        return Err(Error::invalid("BT.500 screening needs at least 3 subjects"));
    }
    if m < 2 {
        return Err(Error::invalid("BT.500 screening needs at least 2 conditions"));
    }
    let mut above = vec![0usize; n];
    let mut below = vec![0usize; n];
    let mut rated = vec![0usize; n];
    for c in 0..m {
        let col: Vec<(usize, f64)> = (0..n).filter_map(|s| data.scores[s][c].map(|v| (s, v))).collect();
        for &(s, _) in &col {
            rated[s] += 1;
        }
        if col.len() < 2 {
            continue;
        }
        let k = col.len() as f64;
        let mu = col.iter().map(|p| p.1).sum::<f64>() / k;
        let m2 = col.iter().map(|p| (p.1 - mu).powi(2)).sum::<f64>() / k;
        let m4 = col.iter().map(|p| (p.1 - mu).powi(4)).sum::<f64>() / k;
        let sd = (m2 * k / (k - 1.0)).sqrt();
        let beta2 = if m2 > 0.0 { m4 / (m2 * m2) } else { 3.0 };
        let width = if (2.0..=4.0).contains(&beta2) { 2.0 * sd } else { 20f64.sqrt() * sd };
        for &(s, v) in &col {
            if v > mu + width {
                above[s] += 1;
            } else if v < mu - width {
                below[s] += 1;
            }
        }
    }
    let (mut kept, mut rejected) = (Vec::new(), Vec::new());
    for s in 0..n {
        let (p, q) = (above[s] as f64, below[s] as f64);
        let outlying = rated[s] > 0 && (p + q) / rated[s] as f64 > 0.05 && (p - q).abs() / (p + q) < 0.3;
        if outlying {
            rejected.push(s);
        } else {
            kept.push(s);
        }
    }
    if kept.is_empty() {
        return Err(Error::invalid(format!("all {n} subjects were rejected")));
    }
    let mos = (0..m)
        .map(|c| {
            let v: Vec<f64> = kept.iter().filter_map(|&s| data.scores[s][c]).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    Ok(ScreeningResult {
        kept,
        rejected,
        above,
        below,
        mos,
    })
}
