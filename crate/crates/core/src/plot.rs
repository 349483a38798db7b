//! Minimal PNG line charts for per-phase AP trajectories.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::harness::RunSummary;

const WIDTH: u32 = 360;
const HEIGHT: u32 = 240;
const MARGIN: u32 = 24;

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        for (dx, dy) in [(0i64, 0i64), (1, 0), (0, 1)] {
            let (px, py) = (x.round() as i64 + dx, y.round() as i64 + dy);
            if px >= 0 && py >= 0 && (px as u32) < WIDTH && (py as u32) < HEIGHT {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

/// All (black), old (blue) and new (red) AP per phase, y axis 0..100.
pub fn ap_trajectory(run: &RunSummary, path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let (left, right) = (MARGIN as f64, (WIDTH - MARGIN) as f64);
    let (top, bottom) = (MARGIN as f64, (HEIGHT - MARGIN) as f64);
    let grey = Rgb([160, 160, 160]);
    line(&mut img, (left, bottom), (right, bottom), grey);
    line(&mut img, (left, top), (left, bottom), grey);

    let n = run.phases.len();
    let x = |m: usize| if n > 1 { left + (right - left) * m as f64 / (n - 1) as f64 } else { left };
    let y = |ap: f64| bottom - (bottom - top) * (ap / 100.0).clamp(0.0, 1.0);
    let series: [(Rgb<u8>, Box<dyn Fn(usize) -> Option<f64>>); 3] = [
        (Rgb([0, 0, 0]), Box::new(|m| Some(run.phases[m].metrics.all.ap))),
        (Rgb([30, 80, 220]), Box::new(|m| run.phases[m].metrics.old.as_ref().map(|o| o.ap))),
        (Rgb([220, 40, 40]), Box::new(|m| Some(run.phases[m].metrics.new.ap))),
    ];
    for (color, value) in &series {
        let mut prev: Option<(f64, f64)> = None;
        for m in 0..n {
            if let Some(v) = value(m) {
                let p = (x(m), y(v));
                line(&mut img, prev.unwrap_or(p), p, *color);
                prev = Some(p);
            }
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path)?;
    Ok(())
}
