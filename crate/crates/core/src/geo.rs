//! Geographic to pixel transforms for Plate Carree mosaics and orthographic
//! reprojection of cropped tiles.
//!
//! Pixel coordinates inside a tile follow the index convention: the center of
//! pixel `(i, j)` sits at `(i, j)`, so a tile of width `w` spans
//! `[-0.5, w - 0.5]` horizontally. Crop limits ([`PixelRect`]) are pixel
//! *edges* on the mosaic and are integers.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Geographic limits in degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoBounds {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
}

impl GeoBounds {
    pub fn new(lon_min: f64, lon_max: f64, lat_min: f64, lat_max: f64) -> Result<Self> {
        let b = GeoBounds {
            lon_min,
            lon_max,
            lat_min,
            lat_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn global() -> Self {
        GeoBounds {
            lon_min: -180.0,
            lon_max: 180.0,
            lat_min: -90.0,
            lat_max: 90.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.lon_min, self.lon_max, self.lat_min, self.lat_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Domain(format!("non-finite bounds {self:?}")));
        }
        if self.lon_min >= self.lon_max {
            return Err(Error::Domain(format!(
                "lon_min {} must be below lon_max {}",
                self.lon_min, self.lon_max
            )));
        }
        if self.lat_min >= self.lat_max {
            return Err(Error::Domain(format!(
                "lat_min {} must be below lat_max {}",
                self.lat_min, self.lat_max
            )));
        }
        if self.lon_min < -180.0 || self.lon_max > 180.0 {
            return Err(Error::Domain(format!(
                "longitudes [{}, {}] outside [-180, 180]",
                self.lon_min, self.lon_max
            )));
        }
        if self.lat_min < -90.0 || self.lat_max > 90.0 {
            return Err(Error::Domain(format!(
                "latitudes [{}, {}] outside [-90, 90]",
                self.lat_min, self.lat_max
            )));
        }
        Ok(())
    }

    pub fn lon_span(&self) -> f64 {
        self.lon_max - self.lon_min
    }

    pub fn lat_span(&self) -> f64 {
        self.lat_max - self.lat_min
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.lon_min + self.lon_max),
            0.5 * (self.lat_min + self.lat_max),
        )
    }

    /// Inclusive on all four edges.
    pub fn contains_point(&self, lon: f64, lat: f64) -> bool {
        lon >= self.lon_min && lon <= self.lon_max && lat >= self.lat_min && lat <= self.lat_max
    }

    /// Name of the first edge of `inner` that lies outside `self`, if any.
    fn violated_edge(&self, inner: &GeoBounds) -> Option<(&'static str, f64, f64)> {
        if inner.lon_min < self.lon_min {
            Some(("lon_min", inner.lon_min, self.lon_min))
        } else if inner.lon_max > self.lon_max {
            Some(("lon_max", inner.lon_max, self.lon_max))
        } else if inner.lat_min < self.lat_min {
            Some(("lat_min", inner.lat_min, self.lat_min))
        } else if inner.lat_max > self.lat_max {
            Some(("lat_max", inner.lat_max, self.lat_max))
        } else {
            None
        }
    }
}

/// Description of a Plate Carree mosaic.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MosaicMeta {
    pub width_px: usize,
    pub height_px: usize,
    pub bounds: GeoBounds,
    pub px_per_deg_x: f64,
    pub px_per_deg_y: f64,
    pub meters_per_px: f64,
}

impl MosaicMeta {
    /// Derives the pixel dimensions from the bounds and resolution.
    pub fn new(
        bounds: GeoBounds,
        px_per_deg_x: f64,
        px_per_deg_y: f64,
        meters_per_px: f64,
    ) -> Result<Self> {
        bounds.validate()?;
        let meta = MosaicMeta {
            width_px: (px_per_deg_x * bounds.lon_span()).round() as usize,
            height_px: (px_per_deg_y * bounds.lat_span()).round() as usize,
            bounds,
            px_per_deg_x,
            px_per_deg_y,
            meters_per_px,
        };
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if !(self.px_per_deg_x > 0.0 && self.px_per_deg_y > 0.0 && self.meters_per_px > 0.0) {
            return Err(Error::Validation(format!(
                "mosaic resolution must be positive: {} x {} px/deg, {} m/px",
                self.px_per_deg_x, self.px_per_deg_y, self.meters_per_px
            )));
        }
        if self.width_px == 0 || self.height_px == 0 {
            return Err(Error::Validation("mosaic has zero area".into()));
        }
        let w = self.px_per_deg_x * self.bounds.lon_span();
        let h = self.px_per_deg_y * self.bounds.lat_span();
        if (w - self.width_px as f64).abs() > 0.5 || (h - self.height_px as f64).abs() > 0.5 {
            return Err(Error::Validation(format!(
                "mosaic size {}x{} inconsistent with resolution ({w:.3}x{h:.3})",
                self.width_px, self.height_px
            )));
        }
        Ok(())
    }

    /// Sphere radius in pixels implied by the meridional resolution.
    pub fn sphere_radius_px(&self) -> f64 {
        self.px_per_deg_y * 180.0 / PI
    }
}

/// Crop limits in mosaic pixels. `x1 <= x2` and `y2 <= y1`: `y1` is the pixel
/// row of the southern edge, `y2` of the northern edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelRect {
    pub x1: i64,
    pub y1: i64,
    pub x2: i64,
    pub y2: i64,
}

impl PixelRect {
    pub fn width(&self) -> i64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> i64 {
        self.y1 - self.y2
    }
}

/// Pixel limits of the region `out` inside the mosaic `src`.
///
/// Horizontal limits scale with `w / lon_span`, vertical limits with
/// `h / lat_span`, measured down from the northern edge. Rounded half away
/// from zero.
pub fn bounds_to_pixels(src: &MosaicMeta, out: &GeoBounds) -> Result<PixelRect> {
    out.validate()?;
    if let Some((edge, value, limit)) = src.bounds.violated_edge(out) {
        return Err(Error::Domain(format!(
            "output {edge} = {value} lies outside the source limit {limit}"
        )));
    }
    let sx = src.width_px as f64 / src.bounds.lon_span();
    let sy = src.height_px as f64 / src.bounds.lat_span();
    let x1 = sx * (out.lon_min - src.bounds.lon_min);
    let x2 = sx * (out.lon_max - src.bounds.lon_min);
    let y1 = sy * (src.bounds.lat_max - out.lat_min);
    let y2 = sy * (src.bounds.lat_max - out.lat_max);
    Ok(PixelRect {
        x1: x1.round() as i64,
        y1: y1.round() as i64,
        x2: x2.round() as i64,
        y2: y2.round() as i64,
    })
}

/// Copies the pixels inside `rect` out of `mosaic`.
pub fn crop_tile(mosaic: &Grid, rect: &PixelRect) -> Result<Grid> {
    if rect.width() <= 0 || rect.height() <= 0 {
        return Err(Error::Domain(format!("crop rectangle {rect:?} has zero area")));
    }
    if rect.x1 < 0
        || rect.y2 < 0
        || rect.x2 > mosaic.width as i64
        || rect.y1 > mosaic.height as i64
    {
        return Err(Error::Domain(format!(
            "crop rectangle {rect:?} exceeds the {}x{} mosaic",
            mosaic.width, mosaic.height
        )));
    }
    let (x0, y0) = (rect.x1 as usize, rect.y2 as usize);
    let (w, h) = (rect.width() as usize, rect.height() as usize);
    let mut data = Vec::with_capacity(w * h);
    for y in y0..y0 + h {
        let row = y * mosaic.width;
        data.extend_from_slice(&mosaic.data[row + x0..row + x0 + w]);
    }
    Grid::from_vec(w, h, data)
}

/// Cosines below this are on the far hemisphere. The limb itself is accepted.
const LIMB_EPS: f64 = 1e-12;

/// Spherical orthographic projection centered on `(center_lon, center_lat)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Orthographic {
    lon0: f64,
    sin_lat0: f64,
    cos_lat0: f64,
    center_lon: f64,
    center_lat: f64,
    radius: f64,
}

impl Orthographic {
    pub fn new(center_lon: f64, center_lat: f64, radius: f64) -> Self {
        let lat0 = center_lat.to_radians();
        Orthographic {
            lon0: center_lon.to_radians(),
            sin_lat0: lat0.sin(),
            cos_lat0: lat0.cos(),
            center_lon,
            center_lat,
            radius,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.center_lon, self.center_lat)
    }

    /// Cosine of the angular distance from the projection center.
    pub fn cos_distance(&self, lon: f64, lat: f64) -> f64 {
        let lat = lat.to_radians();
        let dlon = lon.to_radians() - self.lon0;
        self.sin_lat0 * lat.sin() + self.cos_lat0 * lat.cos() * dlon.cos()
    }

    pub fn forward(&self, lon: f64, lat: f64) -> Result<(f64, f64)> {
        let cos_c = self.cos_distance(lon, lat);
        if cos_c < -LIMB_EPS {
            return Err(Error::Domain(format!(
                "({lon}, {lat}) lies on the far hemisphere of ({}, {})",
                self.center_lon, self.center_lat
            )));
        }
        let phi = lat.to_radians();
        let dlon = lon.to_radians() - self.lon0;
        let x = self.radius * phi.cos() * dlon.sin();
        let y = self.radius
            * (self.cos_lat0 * phi.sin() - self.sin_lat0 * phi.cos() * dlon.cos());
        Ok((x, y))
    }

    /// Longitude is normalized to `[-180, 180]`.
    pub fn inverse(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        let rho = x.hypot(y);
        if rho > self.radius {
            return Err(Error::Domain(format!(
                "({x}, {y}) lies outside the projected disk of radius {}",
                self.radius
            )));
        }
        if rho == 0.0 {
            return Ok((self.center_lon, self.center_lat));
        }
        let c = (rho / self.radius).asin();
        let (sin_c, cos_c) = c.sin_cos();
        let lat = (cos_c * self.sin_lat0 + y * sin_c * self.cos_lat0 / rho)
            .clamp(-1.0, 1.0)
            .asin();
        let lon = self.lon0
            + (x * sin_c).atan2(rho * cos_c * self.cos_lat0 - y * sin_c * self.sin_lat0);
        Ok((normalize_lon(lon.to_degrees()), lat.to_degrees()))
    }
}

fn normalize_lon(lon: f64) -> f64 {
    if (-180.0..=180.0).contains(&lon) {
        lon
    } else {
        let l = (lon + 180.0).rem_euclid(360.0) - 180.0;
        if l == -180.0 && lon > 0.0 {
            180.0
        } else {
            l
        }
    }
}

pub fn ortho_forward(
    lon: f64,
    lat: f64,
    center_lon: f64,
    center_lat: f64,
    radius: f64,
) -> Result<(f64, f64)> {
    Orthographic::new(center_lon, center_lat, radius).forward(lon, lat)
}

pub fn ortho_inverse(
    x: f64,
    y: f64,
    center_lon: f64,
    center_lat: f64,
    radius: f64,
) -> Result<(f64, f64)> {
    Orthographic::new(center_lon, center_lat, radius).inverse(x, y)
}

/// Pixel geometry of one tile: its Plate Carree footprint and the
/// orthographic frame centered on it.
///
/// The orthographic plane uses the sphere radius implied by the mosaic's
/// meridional resolution, so one projected unit is one pixel at the tile
/// center.
#[derive(Clone, Copy, Debug)]
pub struct TileFrame {
    pub bounds: GeoBounds,
    pub width: usize,
    pub height: usize,
    px_per_deg_x: f64,
    px_per_deg_y: f64,
    proj: Orthographic,
}

impl TileFrame {
    /// Fails if any part of `bounds` falls on the far side of the tile center.
    pub fn new(meta: &MosaicMeta, bounds: GeoBounds, width: usize, height: usize) -> Result<Self> {
        bounds.validate()?;
        let (clon, clat) = bounds.center();
        let proj = Orthographic::new(clon, clat, meta.sphere_radius_px());
        let (lon_mid, lat_mid) = (clon, clat);
        let probes = [
            (bounds.lon_min, bounds.lat_min),
            (bounds.lon_min, bounds.lat_max),
            (bounds.lon_max, bounds.lat_min),
            (bounds.lon_max, bounds.lat_max),
            (lon_mid, bounds.lat_min),
            (lon_mid, bounds.lat_max),
            (bounds.lon_min, lat_mid),
            (bounds.lon_max, lat_mid),
        ];
        for (lon, lat) in probes {
            if proj.cos_distance(lon, lat) <= 0.0 {
                return Err(Error::Domain(format!(
                    "bounds {bounds:?} extend beyond the hemisphere visible from ({clon}, {clat})"
                )));
            }
        }
        Ok(TileFrame {
            bounds,
            width,
            height,
            px_per_deg_x: meta.px_per_deg_x,
            px_per_deg_y: meta.px_per_deg_y,
            proj,
        })
    }

    /// Tile frame whose pixel size follows from cropping `bounds` out of `meta`.
    pub fn for_crop(meta: &MosaicMeta, bounds: GeoBounds) -> Result<Self> {
        let rect = bounds_to_pixels(meta, &bounds)?;
        if rect.width() <= 0 || rect.height() <= 0 {
            return Err(Error::Domain(format!("bounds {bounds:?} crop to zero pixels")));
        }
        Self::new(meta, bounds, rect.width() as usize, rect.height() as usize)
    }

    pub fn projection(&self) -> &Orthographic {
        &self.proj
    }

    fn center_px(&self) -> (f64, f64) {
        (
            0.5 * (self.width as f64 - 1.0),
            0.5 * (self.height as f64 - 1.0),
        )
    }

    /// Geographic point to orthographic tile pixel coordinates.
    pub fn geo_to_pixel(&self, lon: f64, lat: f64) -> Result<(f64, f64)> {
        let (x, y) = self.proj.forward(lon, lat)?;
        let (cx, cy) = self.center_px();
        Ok((cx + x, cy - y))
    }

    /// Orthographic tile pixel coordinates to a geographic point.
    pub fn pixel_to_geo(&self, px: f64, py: f64) -> Result<(f64, f64)> {
        let (cx, cy) = self.center_px();
        self.proj.inverse(px - cx, cy - py)
    }

    /// Geographic point to Plate Carree pixel coordinates of the unprojected crop.
    pub fn geo_to_plate_carree(&self, lon: f64, lat: f64) -> (f64, f64) {
        (
            (lon - self.bounds.lon_min) * self.px_per_deg_x - 0.5,
            (self.bounds.lat_max - lat) * self.px_per_deg_y - 0.5,
        )
    }
}

/// Resamples a Plate Carree crop into the orthographic frame centered on the
/// tile's geographic center. Output has the same size as `tile`; output pixels
/// whose source falls outside the crop are 0.
pub fn ortho_project_tile(tile: &Grid, meta: &MosaicMeta, bounds: &GeoBounds) -> Result<Grid> {
    let frame = TileFrame::new(meta, *bounds, tile.width, tile.height)?;
    let mut out = Grid::new(tile.width, tile.height);
    for j in 0..tile.height {
        for i in 0..tile.width {
            let Ok((lon, lat)) = frame.pixel_to_geo(i as f64, j as f64) else {
                continue;
            };
            let (sx, sy) = frame.geo_to_plate_carree(lon, lat);
            if let Some(v) = sample_bilinear(tile, sx, sy) {
                out.set(i, j, v);
            }
        }
    }
    Ok(out)
}

/// Bilinear sample with pixel centers at integer coordinates. Points within
/// half a pixel of the border are clamped onto it; anything further out is
/// `None`.
pub fn sample_bilinear(img: &Grid, x: f64, y: f64) -> Option<f32> {
    let (w, h) = (img.width as f64, img.height as f64);
    if !(x >= -0.5 && x <= w - 0.5 && y >= -0.5 && y <= h - 0.5) {
        return None;
    }
    let x = x.clamp(0.0, w - 1.0);
    let y = y.clamp(0.0, h - 1.0);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = img.get(x0, y0) as f64 * (1.0 - fx) + img.get(x1, y0) as f64 * fx;
    let bottom = img.get(x0, y1) as f64 * (1.0 - fx) + img.get(x1, y1) as f64 * fx;
    Some((top * (1.0 - fy) + bottom * fy) as f32)
}
