//! Crater catalogues, their conversion into tile pixel space, and rim masks.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{GeoBounds, MosaicMeta, TileFrame};
use crate::grid::Grid;

/// One catalogue record in geographic units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub lon_deg: f64,
    pub lat_deg: f64,
    pub radius_km: f64,
}

impl CatalogEntry {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius_km > 0.0) {
            return Err(Error::Validation(format!(
                "crater radius must be positive, got {} km",
                self.radius_km
            )));
        }
        if !(-90.0..=90.0).contains(&self.lat_deg) || !(-180.0..=180.0).contains(&self.lon_deg) {
            return Err(Error::Validation(format!(
                "crater center ({}, {}) outside the valid lon/lat range",
                self.lon_deg, self.lat_deg
            )));
        }
        Ok(())
    }
}

/// Crater in tile pixel space: center `(x_px, y_px)` and radius `r_px`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelCrater {
    pub x_px: f64,
    pub y_px: f64,
    pub r_px: f64,
}

impl PixelCrater {
    pub fn new(x_px: f64, y_px: f64, r_px: f64) -> Self {
        PixelCrater { x_px, y_px, r_px }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Catalog {
    pub entries: Vec<CatalogEntry>,
    pub body_radius_km: f64,
    pub source_meta: MosaicMeta,
}

impl Catalog {
    pub fn new(entries: Vec<CatalogEntry>, body_radius_km: f64, source_meta: MosaicMeta) -> Result<Self> {
        if !(body_radius_km > 0.0) {
            return Err(Error::Validation(format!(
                "body radius must be positive, got {body_radius_km} km"
            )));
        }
        for e in &entries {
            e.validate()?;
        }
        Ok(Catalog {
            entries,
            body_radius_km,
            source_meta,
        })
    }

    pub fn load(path: &Path, body_radius_km: f64, source_meta: MosaicMeta) -> Result<Self> {
        Self::new(load_entries(path)?, body_radius_km, source_meta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_entries(&self.entries, path)
    }
}

const CATALOG_HEADER: [&str; 3] = ["lon_deg", "lat_deg", "radius_km"];

/// Reads a `lon_deg,lat_deg,radius_km` catalogue CSV.
pub fn load_entries(path: &Path) -> Result<Vec<CatalogEntry>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != CATALOG_HEADER {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("expected header `{}`", CATALOG_HEADER.join(",")),
        });
    }
    let mut entries = Vec::new();
    for row in rdr.deserialize::<CatalogEntry>() {
        let entry = row.map_err(|e| csv_err(path, e))?;
        entry.validate()?;
        entries.push(entry);
    }
    Ok(entries)
}

pub fn save_entries(entries: &[CatalogEntry], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", CATALOG_HEADER.join(",")).map_err(io)?;
    for e in entries {
        // `{}` on f64 prints the shortest representation that parses back exactly.
        writeln!(w, "{},{},{}", e.lon_deg, e.lat_deg, e.radius_km).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        kind => Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("{kind:?}"),
        },
    }
}

/// Indices of entries whose centers fall inside `bounds` (inclusive).
pub fn entries_in_bounds(cat: &Catalog, bounds: &GeoBounds) -> Vec<usize> {
    cat.entries
        .iter()
        .enumerate()
        .filter(|(_, e)| bounds.contains_point(e.lon_deg, e.lat_deg))
        .map(|(i, _)| i)
        .collect()
}

/// Converts the catalogue entries centered inside `bounds` into pixel craters
/// of the orthographically projected tile cropped from `meta`.
///
/// Radii use the nominal resolution at the tile center:
/// `r_px = radius_km * 1000 / meters_per_px`.
pub fn to_tile_pixels(cat: &Catalog, bounds: &GeoBounds, meta: &MosaicMeta) -> Result<Vec<PixelCrater>> {
    let frame = TileFrame::for_crop(meta, *bounds)?;
    entries_in_bounds(cat, bounds)
        .into_iter()
        .map(|i| {
            let e = &cat.entries[i];
            let (x, y) = frame.geo_to_pixel(e.lon_deg, e.lat_deg)?;
            Ok(PixelCrater::new(x, y, radius_to_px(e.radius_km, meta)))
        })
        .collect()
}

pub fn radius_to_px(radius_km: f64, meta: &MosaicMeta) -> f64 {
    radius_km * 1000.0 / meta.meters_per_px
}

/// Whether a pixel center at distance `d` from a crater center lies on its
/// rim: the outermost `thickness` pixels of the crater's disk.
pub fn on_rim(d: f64, r: f64, thickness: f64) -> bool {
    d <= r && d > r - thickness
}

/// Draws each crater as a circle outline of the given thickness (see
/// [`on_rim`]). Craters are clipped at the border.
pub fn rasterize_mask_with(craters: &[PixelCrater], width: usize, height: usize, thickness: f64) -> Grid {
    let mut mask = Grid::new(width, height);
    for c in craters {
        let reach = c.r_px;
        let x_lo = (c.x_px - reach).floor().max(0.0) as usize;
        let y_lo = (c.y_px - reach).floor().max(0.0) as usize;
        let x_hi = (c.x_px + reach).ceil().min(width as f64 - 1.0);
        let y_hi = (c.y_px + reach).ceil().min(height as f64 - 1.0);
        if x_hi < 0.0 || y_hi < 0.0 {
            continue;
        }
        for y in y_lo..=y_hi as usize {
            for x in x_lo..=x_hi as usize {
                let d = (x as f64 - c.x_px).hypot(y as f64 - c.y_px);
                if on_rim(d, c.r_px, thickness) {
                    mask.set(x, y, 1.0);
                }
            }
        }
    }
    mask
}

/// Default mask: 1 px rims.
pub fn rasterize_mask(craters: &[PixelCrater], width: usize, height: usize) -> Grid {
    rasterize_mask_with(craters, width, height, 1.0)
}

const TRUTH_HEADER: [&str; 4] = ["tile_id", "x_px", "y_px", "r_px"];

#[derive(Debug, Serialize, Deserialize)]
struct TruthRow {
    tile_id: String,
    x_px: f64,
    y_px: f64,
    r_px: f64,
}

/// Writes the per-tile pixel truth CSV, rows in the given tile order.
pub fn save_truth<'a, I>(tiles: I, path: &Path) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a [PixelCrater])>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", TRUTH_HEADER.join(",")).map_err(io)?;
    for (id, craters) in tiles {
        for c in craters {
            writeln!(w, "{},{},{},{}", id, c.x_px, c.y_px, c.r_px).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads a per-tile pixel truth CSV into a map keyed by tile id.
pub fn load_truth(path: &Path) -> Result<BTreeMap<String, Vec<PixelCrater>>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != TRUTH_HEADER {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("expected header `{}`", TRUTH_HEADER.join(",")),
        });
    }
    let mut out: BTreeMap<String, Vec<PixelCrater>> = BTreeMap::new();
    for row in rdr.deserialize::<TruthRow>() {
        let row = row.map_err(|e| csv_err(path, e))?;
        if !(row.r_px > 0.0) {
            return Err(Error::Validation(format!(
                "tile {}: crater radius must be positive, got {}",
                row.tile_id, row.r_px
            )));
        }
        out.entry(row.tile_id)
            .or_default()
            .push(PixelCrater::new(row.x_px, row.y_px, row.r_px));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn moon_like() -> MosaicMeta {
        MosaicMeta::new(GeoBounds::global(), 2.0, 2.0, 100.0).unwrap()
    }

    #[test]
    fn header_only_file_gives_empty_catalog() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        std::fs::write(&p, "lon_deg,lat_deg,radius_km\n").unwrap();
        let cat = Catalog::load(&p, 1737.4, moon_like()).unwrap();
        assert!(cat.entries.is_empty());
    }

    #[test]
    fn single_row_maps_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        std::fs::write(&p, "lon_deg,lat_deg,radius_km\n10.0,-5.0,2.5\n").unwrap();
        let e = load_entries(&p).unwrap();
        assert_eq!(
            e,
            vec![CatalogEntry {
                lon_deg: 10.0,
                lat_deg: -5.0,
                radius_km: 2.5
            }]
        );
    }

    #[test]
    fn random_entries_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let entries: Vec<_> = (0..1000)
            .map(|_| CatalogEntry {
                lon_deg: rng.random_range(-180.0..180.0),
                lat_deg: rng.random_range(-90.0..90.0),
                radius_km: rng.random_range(0.01..300.0),
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        save_entries(&entries, &p).unwrap();
        assert_eq!(load_entries(&p).unwrap(), entries);
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        std::fs::write(&p, "lon_deg,lat_deg,radius_km\n1,2,3\n4,five,6\n").unwrap();
        match load_entries(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn negative_radius_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        std::fs::write(&p, "lon_deg,lat_deg,radius_km\n1,2,-3\n").unwrap();
        assert!(matches!(load_entries(&p), Err(Error::Validation(_))));
    }

    #[test]
    fn tile_center_entry_maps_to_center_pixel() {
        let meta = moon_like();
        let bounds = GeoBounds::new(10.0, 74.0, -20.0, 44.0).unwrap();
        let cat = Catalog::new(
            vec![CatalogEntry {
                lon_deg: 42.0,
                lat_deg: 12.0,
                radius_km: 1.0,
            }],
            1737.4,
            meta,
        )
        .unwrap();
        let px = to_tile_pixels(&cat, &bounds, &meta).unwrap();
        assert_eq!(px.len(), 1);
        assert!((px[0].x_px - 63.5).abs() < 1e-9 && (px[0].y_px - 63.5).abs() < 1e-9);
    }

    #[test]
    fn radius_conversion_at_moon_resolution() {
        let meta = moon_like();
        assert_eq!(radius_to_px(1.0, &meta), 10.0);
        assert_eq!(radius_to_px(2.0, &meta), 2.0 * radius_to_px(1.0, &meta));
    }

    #[test]
    fn lon_offset_matches_spherical_trig() {
        // 256 px equatorial tile at 2 px/deg.
        let meta = moon_like();
        let bounds = GeoBounds::new(-64.0, 64.0, -64.0, 64.0).unwrap();
        let cat = Catalog::new(
            vec![CatalogEntry {
                lon_deg: 0.5,
                lat_deg: 0.0,
                radius_km: 1.0,
            }],
            1737.4,
            meta,
        )
        .unwrap();
        let px = to_tile_pixels(&cat, &bounds, &meta).unwrap();
        let r = 2.0 * 180.0 / std::f64::consts::PI;
        let expected = r * 0.5f64.to_radians().sin();
        assert!((px[0].x_px - 127.5 - expected).abs() < 1.0);
        assert!((px[0].y_px - 127.5).abs() < 1e-9);
    }

    #[test]
    fn empty_mask_for_no_craters() {
        let m = rasterize_mask(&[], 16, 8);
        assert!(m.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ring_pixel_count_and_distances() {
        let c = PixelCrater::new(128.0, 128.0, 20.0);
        let m = rasterize_mask(&[c], 256, 256);
        let mut count = 0;
        for y in 0..256 {
            for x in 0..256 {
                if m.get(x, y) == 1.0 {
                    count += 1;
                    let d = (x as f64 - 128.0).hypot(y as f64 - 128.0);
                    assert!((d - 20.0).abs() <= 1.0);
                }
            }
        }
        let circ = 2.0 * std::f64::consts::PI * 20.0;
        assert!((count as f64 - circ).abs() <= 8.0, "{count} vs {circ}");
    }

    #[test]
    fn disjoint_craters_union() {
        let a = PixelCrater::new(20.0, 20.0, 8.0);
        let b = PixelCrater::new(60.0, 40.0, 12.0);
        let both = rasterize_mask(&[a, b], 80, 64);
        let ma = rasterize_mask(&[a], 80, 64);
        let mb = rasterize_mask(&[b], 80, 64);
        for i in 0..both.data.len() {
            assert_eq!(both.data[i], ma.data[i].max(mb.data[i]));
        }
    }

    #[test]
    fn partially_outside_crater_is_clipped() {
        let m = rasterize_mask(&[PixelCrater::new(-3.0, 10.0, 8.0)], 32, 32);
        assert!(m.data.contains(&1.0));
        let m = rasterize_mask(&[PixelCrater::new(-30.0, -30.0, 8.0)], 32, 32);
        assert!(m.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn truth_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let a = vec![PixelCrater::new(1.5, 2.25, 7.0)];
        let b = vec![PixelCrater::new(3.0, 4.0, 5.0), PixelCrater::new(9.0, 9.0, 6.5)];
        save_truth([("a", a.as_slice()), ("b", b.as_slice())], &p).unwrap();
        let back = load_truth(&p).unwrap();
        assert_eq!(back["a"], a);
        assert_eq!(back["b"], b);
    }

    proptest! {
        #[test]
        fn mask_is_binary(
            craters in proptest::collection::vec((0.0..64.0f64, 0.0..64.0f64, 1.0..30.0f64), 0..6)
        ) {
            let cs: Vec<_> = craters.iter().map(|&(x, y, r)| PixelCrater::new(x, y, r)).collect();
            let m = rasterize_mask(&cs, 64, 64);
            prop_assert!(m.data.iter().all(|&v| v == 0.0 || v == 1.0));
        }

        #[test]
        fn shrinking_bounds_gives_subset(
            pts in proptest::collection::vec((-30.0..30.0f64, -30.0..30.0f64), 1..40),
            shrink in (0.0..10.0f64, 0.0..10.0f64, 0.0..10.0f64, 0.0..10.0f64),
        ) {
            let meta = moon_like();
            let entries = pts.iter().map(|&(lon, lat)| CatalogEntry { lon_deg: lon, lat_deg: lat, radius_km: 1.0 }).collect();
            let cat = Catalog::new(entries, 1737.4, meta).unwrap();
            let outer = GeoBounds::new(-25.0, 25.0, -25.0, 25.0).unwrap();
            let inner = GeoBounds::new(-25.0 + shrink.0, 25.0 - shrink.1, -25.0 + shrink.2, 25.0 - shrink.3).unwrap();
            let big = entries_in_bounds(&cat, &outer);
            let small = entries_in_bounds(&cat, &inner);
            prop_assert!(small.iter().all(|i| big.contains(i)));
            prop_assert_eq!(to_tile_pixels(&cat, &inner, &meta).unwrap().len(), small.len());
        }
    }
}
