use calip::{synth, FeatureBundle, ProjectionParams};
use rand::Rng;

use super::oracle::{self, Projections};

pub fn random_params(c: usize, seed: u64, scale: f32) -> ProjectionParams {
    let mut rng = synth::rng(seed);
    let mut p = ProjectionParams::zeros(c);
    for t in p.flat_mut() {
        for v in t.iter_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
    p
}

pub fn projections(p: &ProjectionParams) -> Projections {
    let m = |w: &calip::Mat| oracle::from_flat(w.rows(), w.cols(), w.data());
    let v = |b: &[f32]| b.iter().map(|&x| x as f64).collect::<Vec<_>>();
    Projections {
        w_q: m(&p.w_q),
        b_q: v(&p.b_q),
        w_k: m(&p.w_k),
        b_k: v(&p.b_k),
        w_v: m(&p.w_v),
        b_v: v(&p.b_v),
        w_post: m(&p.w_post),
        b_post: v(&p.b_post),
    }
}

pub fn pixels(s: &calip::SpatialMap) -> oracle::M {
    oracle::from_flat(s.pixel_count(), s.c(), s.data())
}

pub fn text(t: &calip::Mat) -> oracle::M {
    oracle::from_flat(t.rows(), t.cols(), t.data())
}

/// Per-image decision margins of `clip + beta2 * textual` at `alpha = 2/2`,
/// computed by the oracle: positive means the label wins.
pub fn beta2_margins(bundle: &FeatureBundle, beta2: f64) -> Vec<f64> {
    let t = text(bundle.text());
    bundle
        .images()
        .iter()
        .map(|img| {
            let r = oracle::zeroshot(&pixels(&img.spatial), &t, 2.0, 2.0, [1.0, beta2, 0.0]);
            let label = img.label as usize;
            let other = r
                .fused
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != label)
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            r.fused[label] - other
        })
        .collect()
}

pub const DOMINANCE_GRID: [f32; 7] = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

/// A bundle on which exactly one interior `beta2` of [`DOMINANCE_GRID`]
/// (with `beta3 = 0`) classifies strictly more images than every other
/// point. Every image's margin at every grid point is at least `1e-4` away
/// from zero, far beyond single-precision error in the logits, so the
/// engine's counts must equal the oracle's.
pub fn dominant_beta2_instance() -> (FeatureBundle, f32, Vec<usize>) {
    for seed in 0..500u64 {
        let bundle = synth::random_bundle(seed, 3, 8, 24, 2, 2);
        let mut counts = Vec::new();
        let mut safe = true;
        for &b2 in &DOMINANCE_GRID {
            let m = beta2_margins(&bundle, b2 as f64);
            safe &= m.iter().all(|v| v.abs() > 1e-4);
            counts.push(m.iter().filter(|v| **v > 0.0).count());
        }
        let best = *counts.iter().max().unwrap();
        let winners: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] == best).collect();
        if safe && winners.len() == 1 && winners[0] != 0 && winners[0] != DOMINANCE_GRID.len() - 1 {
            return (bundle, DOMINANCE_GRID[winners[0]], counts);
        }
    }
    panic!("no dominant instance among 500 seeds");
}

/// Size of the fixed bundle header in bytes.
pub const HEADER: usize = 28;

/// Byte offset of the first text float and of each image record in an
/// encoded bundle.
pub fn layout(bytes: &[u8], k: usize, c: usize, n: usize, hwc: usize) -> (usize, Vec<usize>) {
    let mut pos = HEADER;
    for _ in 0..k {
        let len = u16::from_le_bytes([bytes[pos], bytes[pos + 1]]) as usize;
        pos += 2 + len;
    }
    let text = pos;
    pos += k * c * 4;
    let images = (0..n).map(|i| pos + i * (4 + hwc * 4)).collect();
    (text, images)
}
