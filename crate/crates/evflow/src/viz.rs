//! Flow visualization: the usual color-wheel rendering. Hue encodes
//! direction, brightness encodes magnitude normalized by the per-image
//! maximum; zero flow renders black.

use crate::error::Result;
use crate::motion::FlowField;
use std::path::Path;

/// RGB color for one flow vector given the per-image maximum magnitude.
pub fn flow_color(u: f64, v: f64, max_mag: f64) -> [u8; 3] {
    let mag = (u * u + v * v).sqrt();
    let hue_deg = v.atan2(u).to_degrees().rem_euclid(360.0);
    let value = mag / max_mag.max(1e-12);
    hsv_to_rgb(hue_deg, 1.0, value.clamp(0.0, 1.0))
}

fn hsv_to_rgb(h_deg: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h_deg / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let to8 = |f: f64| ((f + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [to8(r), to8(g), to8(b)]
}

/// Render a flow field to a PNG file.
pub fn visualize_flow(u: &FlowField, out_path: &Path) -> Result<()> {
    let (_, h, w) = u.data.dim();
    let max_mag = u
        .data
        .index_axis(ndarray::Axis(0), 0)
        .iter()
        .zip(u.data.index_axis(ndarray::Axis(0), 1).iter())
        .map(|(a, b)| (a * a + b * b).sqrt())
        .fold(0.0, f64::max);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let (fu, fv) = u.at(y, x);
            img.put_pixel(x as u32, y as u32, image::Rgb(flow_color(fu, fv, max_mag)));
        }
    }
    img.save(out_path)
        .map_err(|e| crate::error::Error::Format(format!("png write failed: {e}")))?;
    Ok(())
}
