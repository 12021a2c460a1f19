//! Deterministic synthetic crater fields.
//!
//! Two parameter sets ([`BodyParams::domain_a`], [`BodyParams::domain_b`])
//! stand in for a pretraining body and a transfer target: both produce the
//! same kind of image and the same rim masks, but crater density, size range,
//! contrast, noise and illumination differ.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::catalog::{self, rasterize_mask, PixelCrater};
use crate::error::{Error, Result};
use crate::grid::{quantize, Grid};
use crate::mix_seed;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BodyParams {
    /// Mean crater count per tile.
    pub crater_density: f64,
    pub radius_min_px: f64,
    pub radius_max_px: f64,
    /// Exponent of the size-frequency law `p(r) ~ r^exp`.
    pub radius_powerlaw_exp: f64,
    /// Direction the light comes from, degrees counter-clockwise from +x.
    pub sun_azimuth_deg: f64,
    pub sun_elevation_deg: f64,
    pub albedo_noise_sigma: f64,
    pub rim_contrast: f64,
}

impl BodyParams {
    pub fn domain_a() -> Self {
        BodyParams {
            crater_density: 6.0,
            radius_min_px: 5.0,
            radius_max_px: 28.0,
            radius_powerlaw_exp: -2.0,
            sun_azimuth_deg: 45.0,
            sun_elevation_deg: 30.0,
            albedo_noise_sigma: 0.03,
            rim_contrast: 0.30,
        }
    }

    pub fn domain_b() -> Self {
        BodyParams {
            crater_density: 9.0,
            radius_min_px: 5.0,
            radius_max_px: 20.0,
            radius_powerlaw_exp: -2.0,
            sun_azimuth_deg: 160.0,
            sun_elevation_deg: 20.0,
            albedo_noise_sigma: 0.05,
            rim_contrast: 0.22,
        }
    }

    pub fn validate(&self, size: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if !(self.crater_density > 0.0) {
            return bad(format!("crater density {} must be positive", self.crater_density));
        }
        if !(self.radius_min_px >= 3.0) {
            return bad(format!("radius_min_px {} below 3", self.radius_min_px));
        }
        if !(self.radius_max_px >= self.radius_min_px) {
            return bad(format!(
                "radius_max_px {} below radius_min_px {}",
                self.radius_max_px, self.radius_min_px
            ));
        }
        if self.radius_max_px > size as f64 / 2.0 {
            return bad(format!(
                "radius_max_px {} exceeds half the tile size {size}",
                self.radius_max_px
            ));
        }
        if (size as f64) < 4.0 * self.radius_min_px {
            return bad(format!("tile size {size} below 4 * radius_min_px"));
        }
        if !(self.rim_contrast > 0.0) {
            return bad(format!("rim contrast {} must be positive", self.rim_contrast));
        }
        if !(self.albedo_noise_sigma >= 0.0) {
            return bad(format!("noise sigma {} must be non-negative", self.albedo_noise_sigma));
        }
        if !(0.0..=90.0).contains(&self.sun_elevation_deg) || !self.sun_azimuth_deg.is_finite() {
            return bad("sun angles out of range".into());
        }
        Ok(())
    }

    /// `(name, value)` for every field, in declaration order.
    pub fn fields(&self) -> [(&'static str, f64); 8] {
        [
            ("crater_density", self.crater_density),
            ("radius_min_px", self.radius_min_px),
            ("radius_max_px", self.radius_max_px),
            ("radius_powerlaw_exp", self.radius_powerlaw_exp),
            ("sun_azimuth_deg", self.sun_azimuth_deg),
            ("sun_elevation_deg", self.sun_elevation_deg),
            ("albedo_noise_sigma", self.albedo_noise_sigma),
            ("rim_contrast", self.rim_contrast),
        ]
    }

    /// Sets a field by name. Returns false for unknown names.
    pub fn set(&mut self, name: &str, value: f64) -> bool {
        let slot = match name {
            "crater_density" => &mut self.crater_density,
            "radius_min_px" => &mut self.radius_min_px,
            "radius_max_px" => &mut self.radius_max_px,
            "radius_powerlaw_exp" => &mut self.radius_powerlaw_exp,
            "sun_azimuth_deg" => &mut self.sun_azimuth_deg,
            "sun_elevation_deg" => &mut self.sun_elevation_deg,
            "albedo_noise_sigma" => &mut self.albedo_noise_sigma,
            "rim_contrast" => &mut self.rim_contrast,
            _ => return false,
        };
        *slot = value;
        true
    }
}

/// Image, rim mask and pixel truth of one tile.
#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub tile_id: String,
    pub image: Grid,
    pub mask: Grid,
    pub truth: Vec<PixelCrater>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthTile {
    pub tile: Tile,
    pub seed: u64,
}

/// Inverse-CDF draw from `p(r) ~ r^exp` on `[lo, hi]`.
fn sample_power_law(rng: &mut impl Rng, lo: f64, hi: f64, exp: f64) -> f64 {
    let u: f64 = rng.random();
    if lo == hi {
        return lo;
    }
    let k = exp + 1.0;
    if k.abs() < 1e-12 {
        lo * (hi / lo).powf(u)
    } else {
        (lo.powf(k) + u * (hi.powf(k) - lo.powf(k))).powf(1.0 / k)
    }
}

/// Renders one tile. Images are quantized to 8 bits so that tiles read back
/// from PNG are identical to the generated ones.
pub fn generate_tile(params: &BodyParams, size: usize, seed: u64) -> Result<SynthTile> {
    generate_tile_with_id(params, size, seed, format!("tile_{seed:016x}"))
}

fn generate_tile_with_id(params: &BodyParams, size: usize, seed: u64, tile_id: String) -> Result<SynthTile> {
    params.validate(size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let count = Poisson::new(params.crater_density)
        .map_err(|e| Error::Validation(format!("crater density: {e}")))?
        .sample(&mut rng) as usize;
    let extent = (size - 1) as f64;
    let truth: Vec<PixelCrater> = (0..count)
        .map(|_| {
            let x = rng.random_range(0.0..=extent);
            let y = rng.random_range(0.0..=extent);
            let r = sample_power_law(
                &mut rng,
                params.radius_min_px,
                params.radius_max_px,
                params.radius_powerlaw_exp,
            );
            PixelCrater::new(x, y, r)
        })
        .collect();

    let mut field = vec![0.5f64; size * size];

    // Low-frequency albedo variation: a few random plane waves.
    for _ in 0..3 {
        let k = rng.random_range(0.5..2.5) * std::f64::consts::TAU / size as f64;
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let amp = rng.random_range(0.01..0.04);
        let (kx, ky) = (k * theta.cos(), k * theta.sin());
        for y in 0..size {
            for x in 0..size {
                field[y * size + x] += amp * (kx * x as f64 + ky * y as f64 + phase).sin();
            }
        }
    }

    let az = params.sun_azimuth_deg.to_radians();
    // Image rows grow downward, so the sun's y component flips sign.
    let sun = (az.cos(), -az.sin());
    let elev = params.sun_elevation_deg.to_radians();
    let directional = elev.cos();
    let uniform = 0.3 + 0.3 * elev.sin();
    for c in &truth {
        let sigma = (0.12 * c.r_px).max(1.0);
        let reach = c.r_px + 4.0 * sigma;
        let x_lo = (c.x_px - reach).floor().max(0.0) as usize;
        let y_lo = (c.y_px - reach).floor().max(0.0) as usize;
        let x_hi = ((c.x_px + reach).ceil() as usize).min(size - 1);
        let y_hi = ((c.y_px + reach).ceil() as usize).min(size - 1);
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let dx = x as f64 - c.x_px;
                let dy = y as f64 - c.y_px;
                let d = dx.hypot(dy);
                let cos_sun = if d > 0.0 {
                    (dx * sun.0 + dy * sun.1) / d
                } else {
                    0.0
                };
                let rim = (-(d - c.r_px).powi(2) / (2.0 * sigma * sigma)).exp();
                let s_in = 1.5 * sigma;
                let inner = (-(d - 0.75 * c.r_px).powi(2) / (2.0 * s_in * s_in)).exp();
                let highlight = rim * (uniform + directional * cos_sun.max(0.0));
                let shadow = inner * directional * (-cos_sun).max(0.0);
                field[y * size + x] += params.rim_contrast * (highlight - shadow);
            }
        }
    }

    if params.albedo_noise_sigma > 0.0 {
        let noise = Normal::new(0.0, params.albedo_noise_sigma)
            .map_err(|e| Error::Validation(format!("noise sigma: {e}")))?;
        for v in field.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }

    let image = Grid {
        width: size,
        height: size,
        data: field
            .iter()
            .map(|&v| quantize(v as f32) as f32 / 255.0)
            .collect(),
    };
    let mask = rasterize_mask(&truth, size, size);
    Ok(SynthTile {
        tile: Tile {
            tile_id,
            image,
            mask,
            truth,
        },
        seed,
    })
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<SynthTile>,
    pub val: Vec<SynthTile>,
    pub test: Vec<SynthTile>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Option<&[SynthTile]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Seed of tile `index` in split `split` (0 = train, 1 = val, 2 = test).
pub fn tile_seed(master: u64, split: usize, index: usize) -> u64 {
    mix_seed(master, &[split as u64, index as u64])
}

/// Generates one split in memory.
pub fn generate_split(
    params: &BodyParams,
    split: usize,
    n: usize,
    size: usize,
    master_seed: u64,
) -> Result<Vec<SynthTile>> {
    (0..n)
        .map(|i| {
            generate_tile_with_id(
                params,
                size,
                tile_seed(master_seed, split, i),
                format!("{}_{i:05}", SPLITS[split]),
            )
        })
        .collect()
}

/// Generates train/val/test splits and, when `root` is given, writes them:
/// `<root>/<split>/<tile_id>.png`, `<root>/<split>/<tile_id>_mask.png`,
/// `<root>/<split>_truth.csv` and a `<root>/dataset.txt` manifest.
pub fn generate_dataset(
    params: &BodyParams,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    size: usize,
    seed: u64,
    root: Option<&Path>,
) -> Result<Dataset> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Validation(format!(
            "split sizes must be positive, got ({n_train}, {n_val}, {n_test})"
        )));
    }
    params.validate(size)?;
    let ds = Dataset {
        train: generate_split(params, 0, n_train, size, seed)?,
        val: generate_split(params, 1, n_val, size, seed)?,
        test: generate_split(params, 2, n_test, size, seed)?,
    };
    if let Some(root) = root {
        write_dataset(&ds, params, size, seed, root)?;
    }
    Ok(ds)
}

fn write_dataset(ds: &Dataset, params: &BodyParams, size: usize, seed: u64, root: &Path) -> Result<()> {
    for split in SPLITS {
        let dir = root.join(split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let tiles = ds.split(split).unwrap_or_default();
        for t in tiles {
            t.tile.image.save_png(&dir.join(format!("{}.png", t.tile.tile_id)))?;
            t.tile.mask.save_png(&dir.join(format!("{}_mask.png", t.tile.tile_id)))?;
        }
        catalog::save_truth(
            tiles
                .iter()
                .map(|t| (t.tile.tile_id.as_str(), t.tile.truth.as_slice())),
            &root.join(format!("{split}_truth.csv")),
        )?;
    }
    let mut manifest = String::new();
    for (k, v) in params.fields() {
        manifest.push_str(&format!("{k}={v}\n"));
    }
    manifest.push_str(&format!(
        "size={size}\nn_train={}\nn_val={}\nn_test={}\nseed={seed}\n",
        ds.train.len(),
        ds.val.len(),
        ds.test.len()
    ));
    let path = root.join("dataset.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Parses a `key=value` manifest.
pub fn read_manifest(root: &Path) -> Result<BTreeMap<String, String>> {
    let path = root.join("dataset.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.clone(),
            line: i as u64 + 1,
            msg: format!("expected key=value, got `{line}`"),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Reads one split written by [`generate_dataset`], tiles sorted by id.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<Tile>> {
    let dir = root.join(split);
    let mut ids: Vec<String> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter_map(|n| n.strip_suffix(".png").map(str::to_string))
        .filter(|n| !n.ends_with("_mask"))
        .collect();
    ids.sort();
    let mut truth = catalog::load_truth(&root.join(format!("{split}_truth.csv")))?;
    ids.into_iter()
        .map(|id| {
            let image = Grid::load_png(&dir.join(format!("{id}.png")))?;
            let mask = Grid::load_png(&dir.join(format!("{id}_mask.png")))?;
            let truth = truth.remove(&id).unwrap_or_default();
            Ok(Tile {
                tile_id: id,
                image,
                mask,
                truth,
            })
        })
        .collect()
}
