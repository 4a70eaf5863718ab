//! Shared test oracles.

use image::{Rgb, RgbImage};

/// Yellow-ness score of a pixel, 0 for gray, white or green.
pub fn yellowness(p: &Rgb<u8>) -> f64 {
    let [r, g, b] = p.0.map(|c| c as f64);
    ((r.min(g) - b - 60.0) / 100.0).clamp(0.0, 1.0)
}

fn whiteness(p: &Rgb<u8>) -> f64 {
    ((p.0.iter().map(|&c| c as f64).fold(255.0, f64::min) - 140.0) / 100.0).clamp(0.0, 1.0)
}

/// Least-squares fit of `u = a v + b`.
fn fit(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let (su, sv) = points.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
    let (mu, mv) = (su / n, sv / n);
    let cov: f64 = points.iter().map(|p| (p.1 - mv) * (p.0 - mu)).sum();
    let var: f64 = points.iter().map(|p| (p.1 - mv).powi(2)).sum();
    let a = cov / var;
    (a, mu - a * mv)
}

/// Intersection, in pixels, of the yellow and the white marking of a
/// single-lane scene. Rows above `first_row` are ignored.
pub fn marking_intersection(img: &RgbImage, first_row: u32) -> (f64, f64) {
    let (w, h) = img.dimensions();
    let mut yellow = Vec::new();
    let mut white = Vec::new();
    for y in first_row..h {
        let (mut ys, mut yw, mut ws, mut ww) = (0.0, 0.0, 0.0, 0.0);
        for x in 0..w {
            let p = img.get_pixel(x, y);
            let cx = x as f64 + 0.5;
            let yl = yellowness(p);
            ys += yl * cx;
            yw += yl;
            let wl = whiteness(p);
            ws += wl * cx;
            ww += wl;
        }
        let cy = y as f64 + 0.5;
        if yw > 0.5 {
            yellow.push((ys / yw, cy));
        }
        if ww > 0.5 {
            white.push((ws / ww, cy));
        }
    }
    assert!(yellow.len() > 20 && white.len() > 20, "too few marking rows");
    let (a1, b1) = fit(&yellow);
    let (a2, b2) = fit(&white);
    let v = (b2 - b1) / (a1 - a2);
    (a1 * v + b1, v)
}
