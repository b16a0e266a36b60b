//! Procedural digit-like strokes.
//!
//! Each figure is one continuous curve (polyline, arc, or arc with a tail)
//! rasterised into an 8-connected skeleton, optionally thickened to 2 px,
//! then centred. A single curve keeps the figure one component.

use std::f64::consts::PI;

use rand::Rng;

use super::image::{DigitImage, DIGIT_SIZE};

/// Smallest acceptable foreground, in pixels (2% of 28x28).
const MIN_FOREGROUND: usize = 16;

fn lerp(a: (f64, f64), b: (f64, f64), t: f64) -> (f64, f64) {
    (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t)
}

fn polyline<R: Rng>(rng: &mut R) -> Vec<(f64, f64)> {
    let n = rng.gen_range(3..=5);
    let pts: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.gen_range(6.0..21.0), rng.gen_range(7.0..20.0)))
        .collect();
    let mut out = Vec::new();
    for seg in pts.windows(2) {
        for i in 0..40 {
            out.push(lerp(seg[0], seg[1], i as f64 / 40.0));
        }
    }
    out.push(*pts.last().unwrap());
    out
}

fn arc<R: Rng>(rng: &mut R, centre: (f64, f64), radius: f64) -> Vec<(f64, f64)> {
    let start = rng.gen_range(0.0..2.0 * PI);
    let sweep = rng.gen_range(PI..2.0 * PI);
    let steps = 160;
    (0..=steps)
        .map(|i| {
            let t = start + sweep * i as f64 / steps as f64;
            (centre.0 + radius * t.sin(), centre.1 + radius * t.cos())
        })
        .collect()
}

fn arc_with_tail<R: Rng>(rng: &mut R) -> Vec<(f64, f64)> {
    let radius = rng.gen_range(3.5..5.5);
    let centre = (rng.gen_range(10.0..17.0), rng.gen_range(11.0..16.0));
    let mut pts = arc(rng, centre, radius);
    let end = *pts.last().unwrap();
    let tail_end = (rng.gen_range(5.0..22.0), rng.gen_range(6.0..21.0));
    for i in 1..=60 {
        pts.push(lerp(end, tail_end, i as f64 / 60.0));
    }
    pts
}

/// Rounds sample points to pixels, dropping repeats. Samples are dense
/// enough that consecutive pixels always touch (8-connectivity).
fn rasterise(points: &[(f64, f64)]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    let lim = (DIGIT_SIZE - 1) as f64;
    for &(r, c) in points {
        let p = (
            r.round().clamp(0.0, lim) as usize,
            c.round().clamp(0.0, lim) as usize,
        );
        if out.last() != Some(&p) {
            if let Some(&(pr, pc)) = out.last() {
                debug_assert!(pr.abs_diff(p.0) <= 1 && pc.abs_diff(p.1) <= 1);
            }
            out.push(p);
        }
    }
    out
}

/// Shifts the skeleton so its bounding box sits in the middle of the frame,
/// leaving room for a 2 px stroke.
fn centre(skel: &mut [(usize, usize)]) {
    let (rmin, rmax) = skel
        .iter()
        .fold((usize::MAX, 0), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (cmin, cmax) = skel
        .iter()
        .fold((usize::MAX, 0), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let shift = |lo: usize, hi: usize| (DIGIT_SIZE as isize - 1 - (hi + lo) as isize) / 2;
    let (dr, dc) = (shift(rmin, rmax), shift(cmin, cmax));
    for p in skel.iter_mut() {
        p.0 = (p.0 as isize + dr) as usize;
        p.1 = (p.1 as isize + dc) as usize;
    }
}

/// Pixels painted for one skeleton point at the given thickness.
pub fn footprint(p: (usize, usize), thickness: usize) -> impl Iterator<Item = (usize, usize)> {
    let lim = DIGIT_SIZE - 1;
    let (r1, c1) = (
        (p.0 + thickness - 1).min(lim),
        (p.1 + thickness - 1).min(lim),
    );
    (p.0..=r1).flat_map(move |r| (p.1..=c1).map(move |c| (r, c)))
}

/// A binary single-component stroke figure with its skeleton, and the
/// stroke thickness used (1 or 2).
pub fn gen_stroke_digit_with_thickness<R: Rng>(rng: &mut R) -> (DigitImage, usize) {
    loop {
        let pts = match rng.gen_range(0..3) {
            0 => polyline(rng),
            1 => {
                let centre = (rng.gen_range(11.0..17.0), rng.gen_range(11.0..17.0));
                let radius = rng.gen_range(4.0..8.0);
                arc(rng, centre, radius)
            }
            _ => arc_with_tail(rng),
        };
        let mut skel = rasterise(&pts);
        centre(&mut skel);
        let thickness = rng.gen_range(1..=2);
        let mut img = DigitImage::blank(DIGIT_SIZE, DIGIT_SIZE);
        for &p in &skel {
            for (r, c) in footprint(p, thickness) {
                img.set(r, c, 1.0);
            }
        }
        img.skeleton = skel;
        if img.foreground_count() >= MIN_FOREGROUND {
            return (img, thickness);
        }
    }
}

pub fn gen_stroke_digit<R: Rng>(rng: &mut R) -> DigitImage {
    gen_stroke_digit_with_thickness(rng).0
}
