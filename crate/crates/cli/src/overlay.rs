use crater_core::catalog::on_rim;
use crater_core::grid::{quantize, Grid};
use crater_core::post::Detection;
use image::{Rgb, RgbImage};

pub const RING_COLOR: Rgb<u8> = Rgb([255, 0, 0]);

/// The input tile in gray with every detection drawn as a 1 px red rim.
pub fn draw(image: &Grid, dets: &[Detection]) -> RgbImage {
    let mut out = RgbImage::from_fn(image.width as u32, image.height as u32, |x, y| {
        let v = quantize(image.get(x as usize, y as usize));
        Rgb([v, v, v])
    });
    for d in dets {
        let c = d.crater;
        let x_lo = (c.x_px - c.r_px).floor().max(0.0) as u32;
        let y_lo = (c.y_px - c.r_px).floor().max(0.0) as u32;
        let x_hi = ((c.x_px + c.r_px).ceil() as i64).min(image.width as i64 - 1);
        let y_hi = ((c.y_px + c.r_px).ceil() as i64).min(image.height as i64 - 1);
        for y in y_lo as i64..=y_hi {
            for x in x_lo as i64..=x_hi {
                let dist = (x as f64 - c.x_px).hypot(y as f64 - c.y_px);
                if on_rim(dist, c.r_px, 1.0) {
                    out.put_pixel(x as u32, y as u32, RING_COLOR);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crater_core::catalog::rasterize_mask;
    use crater_core::PixelCrater;

    #[test]
    fn no_detections_leaves_image_unchanged() {
        let g = Grid::from_fn(20, 10, |x, y| (x + y) as f32 / 30.0);
        let img = draw(&g, &[]);
        for (x, y, p) in img.enumerate_pixels() {
            let v = quantize(g.get(x as usize, y as usize));
            assert_eq!(p.0, [v, v, v]);
        }
    }

    #[test]
    fn rings_follow_the_mask_rule() {
        let g = Grid::new(64, 64);
        let cs = [PixelCrater::new(20.0, 30.0, 9.0), PixelCrater::new(60.0, 2.0, 7.0)];
        let dets: Vec<Detection> = cs.iter().map(|&crater| Detection { crater, score: 1.0 }).collect();
        let img = draw(&g, &dets);
        let mask = rasterize_mask(&cs, 64, 64);
        for (x, y, p) in img.enumerate_pixels() {
            assert_eq!(*p == RING_COLOR, mask.get(x as usize, y as usize) == 1.0);
        }
    }
}
