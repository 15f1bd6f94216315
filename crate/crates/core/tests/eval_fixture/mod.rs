#![allow(dead_code)]

use deformdet::bbox::{BBox, Detection};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Reference evaluation written without the library's helpers: explicit
/// step-by-step ranking, matching and precision bookkeeping.
pub mod oracle {
    use super::*;

    fn overlap(a: &BBox, b: &BBox) -> f64 {
        let (ax0, ax1) = (a.cx - a.w / 2.0, a.cx + a.w / 2.0);
        let (ay0, ay1) = (a.cy - a.h / 2.0, a.cy + a.h / 2.0);
        let (bx0, bx1) = (b.cx - b.w / 2.0, b.cx + b.w / 2.0);
        let (by0, by1) = (b.cy - b.h / 2.0, b.cy + b.h / 2.0);
        let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        let inter = iw * ih;
        let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// `None` when the class has no ground truth.
    pub fn class_ap(dets: &[Vec<Detection>], gts: &[Vec<BBox>], class: usize, t: f64) -> Option<f64> {
        let total_gt = gts.iter().flatten().filter(|g| g.class_id == class).count();
        if total_gt == 0 {
            return None;
        }
        // (score, image, position) ranked by score, then image, then position
        let mut order = Vec::new();
        for (i, ds) in dets.iter().enumerate() {
            for (k, d) in ds.iter().enumerate() {
                if d.bbox.class_id == class {
                    order.push((d.score, i, k));
                }
            }
        }
        order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut hits = 0;
        let mut precision_after = Vec::new();
        for (rank, &(_, i, k)) in order.iter().enumerate() {
            let d = &dets[i][k].bbox;
            let mut options: Vec<(f64, usize)> = gts[i]
                .iter()
                .enumerate()
                .filter(|(j, g)| g.class_id == class && !used[i][*j])
                .map(|(j, g)| (overlap(d, g), j))
                .filter(|(v, _)| *v >= t)
                .collect();
            // highest overlap, lower index on ties
            options.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            if let Some(&(_, j)) = options.first() {
                used[i][j] = true;
                hits += 1;
            }
            precision_after.push((hits, hits as f64 / (rank + 1) as f64));
        }
        // AP = mean over k = 1..G of the best precision among ranks with >= k hits
        let mut sum = 0.0;
        for k in 1..=total_gt {
            let best = precision_after
                .iter()
                .filter(|(h, _)| *h >= k)
                .map(|(_, p)| *p)
                .fold(0.0f64, f64::max);
            sum += best;
        }
        Some(sum / total_gt as f64)
    }

    pub fn maps(dets: &[Vec<Detection>], gts: &[Vec<BBox>], nc: usize, ts: &[f64]) -> (f64, f64) {
        let mut m50 = Vec::new();
        let mut mall = Vec::new();
        for c in 0..nc {
            let aps: Vec<Option<f64>> = ts.iter().map(|&t| class_ap(dets, gts, c, t)).collect();
            if let Some(a) = aps[0] {
                m50.push(a);
                mall.push(aps.iter().map(|a| a.unwrap()).sum::<f64>() / ts.len() as f64);
            }
        }
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        (mean(&m50), mean(&mall))
    }
}

pub fn random_box(rng: &mut ChaCha8Rng, class: usize) -> BBox {
    let w = rng.gen_range(0.05..0.4);
    let h = rng.gen_range(0.05..0.4);
    BBox::new(class, rng.gen_range(w / 2.0..1.0 - w / 2.0), rng.gen_range(h / 2.0..1.0 - h / 2.0), w, h)
}

pub fn jitter(rng: &mut ChaCha8Rng, b: &BBox, amount: f64) -> BBox {
    BBox::new(
        b.class_id,
        b.cx + rng.gen_range(-amount..amount) * b.w,
        b.cy + rng.gen_range(-amount..amount) * b.h,
        b.w * rng.gen_range(1.0 - amount..1.0 + amount),
        b.h * rng.gen_range(1.0 - amount..1.0 + amount),
    )
}

/// Five images, three classes, thirty detections: near-duplicates, misses,
/// wrong-class and background hits.
pub fn toy_fixture(seed: u64) -> (Vec<Vec<Detection>>, Vec<Vec<BBox>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gts: Vec<Vec<BBox>> = (0..5)
        .map(|_| {
            let n = rng.gen_range(1..4);
            (0..n)
                .map(|_| {
                    let c = rng.gen_range(0..3);
                    random_box(&mut rng, c)
                })
                .collect()
        })
        .collect();
    let mut dets = vec![Vec::new(); 5];
    for _ in 0..30 {
        let i = rng.gen_range(0..5);
        let score = rng.gen_range(0.0..1.0);
        let b = match rng.gen_range(0..4) {
            0 | 1 => {
                let g = gts[i][rng.gen_range(0..gts[i].len())];
                jitter(&mut rng, &g, 0.3)
            }
            2 => {
                let g = gts[i][rng.gen_range(0..gts[i].len())];
                let mut b = jitter(&mut rng, &g, 0.1);
                b.class_id = (b.class_id + 1) % 3;
                b
            }
            _ => {
                let c = rng.gen_range(0..3);
                random_box(&mut rng, c)
            }
        };
        dets[i].push(Detection { bbox: b, score });
    }
    (dets, gts)
}

