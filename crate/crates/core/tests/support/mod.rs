//! Shared test oracles.

#![allow(dead_code)]

use ier_core::geometry::BoundingBox;
use rand::Rng;

/// Side of the rasterization grid.
pub const RASTER: usize = 1000;

/// IoU and GIoU measured by counting pixel centres of a `RASTER`-square grid.
pub fn raster_iou_giou(a: &BoundingBox, b: &BoundingBox) -> (f64, f64) {
    let (mut inter, mut in_a, mut in_b, mut hull) = (0u64, 0u64, 0u64, 0u64);
    let (hx1, hy1) = (a.x1().min(b.x1()), a.y1().min(b.y1()));
    let (hx2, hy2) = (a.x2().max(b.x2()), a.y2().max(b.y2()));
    let inside = |v: f64, lo: f64, hi: f64| lo <= v && v < hi;
    for r in 0..RASTER {
        let y = (r as f64 + 0.5) / RASTER as f64;
        let (ya, yb, yh) = (inside(y, a.y1(), a.y2()), inside(y, b.y1(), b.y2()), inside(y, hy1, hy2));
        if !yh {
            continue;
        }
        for c in 0..RASTER {
            let x = (c as f64 + 0.5) / RASTER as f64;
            let pa = ya && inside(x, a.x1(), a.x2());
            let pb = yb && inside(x, b.x1(), b.x2());
            in_a += pa as u64;
            in_b += pb as u64;
            inter += (pa && pb) as u64;
            hull += inside(x, hx1, hx2) as u64;
        }
    }
    let union = (in_a + in_b - inter) as f64;
    let iou = inter as f64 / union;
    (iou, iou - (hull as f64 - union) / hull as f64)
}

/// A box with corners on the raster lattice, so pixel-centre counting
/// measures its area exactly.
pub fn random_lattice_box<R: Rng>(rng: &mut R) -> BoundingBox {
    let mut axis = || {
        let lo = rng.gen_range(0..RASTER);
        let hi = rng.gen_range(lo + 1..=RASTER);
        (lo as f64 / RASTER as f64, hi as f64 / RASTER as f64)
    };
    let (x1, x2) = axis();
    let (y1, y2) = axis();
    BoundingBox::new(x1, y1, x2, y2).expect("valid by construction")
}

/// IoU/GIoU tolerance against the raster oracle.
pub const ORACLE_TOLERANCE: f64 = 1e-3;

/// Worst absolute deviation from the raster oracle over `n` seeded pairs,
/// and whether the GIoU invariants held on every pair.
pub fn oracle_sweep(seed: u64, n: usize) -> (f64, bool) {
    use ier_core::geometry::{box_giou, box_iou};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut invariants = true;
    for _ in 0..n {
        let a = random_lattice_box(&mut rng);
        let b = random_lattice_box(&mut rng);
        let (iou, giou) = (box_iou(&a, &b), box_giou(&a, &b));
        let (ri, rg) = raster_iou_giou(&a, &b);
        worst = worst.max((ri - iou).abs()).max((rg - giou).abs());
        invariants &= (box_giou(&a, &a) - 1.0).abs() < 1e-12
            && giou <= iou + 1e-12
            && giou > -1.0
            && giou <= 1.0;
    }
    (worst, invariants)
}

const WORDS: [&str; 24] = [
    "add", "a", "gold", "necklace", "turn", "the", "sky", "orange", "corgi", "red", "hat", "on", "dog", "make",
    "it", "snowy", "with", "two", "bats", "above", "pendant", "glowing", "lantern", "velvet",
];
const HINTS: [&str; 4] = ["luxury", "Halloween", "winter holiday", "a rainy day"];

/// Seeded valid samples and a vocabulary covering their rendered text.
pub fn random_samples(
    seed: u64,
    n: usize,
) -> (Vec<ier_core::sample::EditingSample>, ier_core::codec::Vocabulary) {
    use ier_core::codec::{render_prompt, render_reply, Vocabulary};
    use ier_core::sample::{EditingSample, Provenance, Scope};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<EditingSample> = (0..n)
        .map(|_| {
            let scope = if rng.gen_bool(0.5) { Scope::Global } else { Scope::Local };
            let len = rng.gen_range(1..=8);
            let suggestion: Vec<&str> = (0..len).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect();
            EditingSample {
                image_ref: format!("img_{}", rng.gen_range(0..100)),
                hint: HINTS[rng.gen_range(0..HINTS.len())].to_string(),
                scope,
                suggestion: suggestion.join(" "),
                target_box: (scope == Scope::Local).then(|| random_lattice_box(&mut rng)),
                edited_object: "object".into(),
                provenance: Provenance::default(),
            }
        })
        .collect();
    let texts: Vec<String> = samples
        .iter()
        .flat_map(|s| [render_prompt(&s.hint), format!(" {}", render_reply(s.scope, &s.suggestion))])
        .collect();
    let vocab = Vocabulary::build(texts.iter().map(String::as_str));
    (samples, vocab)
}

/// Renders each sample, decodes its target ids and parses the reply back.
/// Returns (recovered, total).
pub fn template_round_trips(seed: u64, n: usize) -> (usize, usize) {
    use ier_core::codec::{parse_reply, render};
    let (samples, vocab) = random_samples(seed, n);
    let ok = samples
        .iter()
        .filter(|s| {
            let r = render(s, &vocab).expect("valid sample renders");
            let decoded = vocab.decode(&r.token_ids[r.target_start()..]);
            [r.target_text.as_str(), decoded.as_str()].iter().all(|text| {
                parse_reply(text)
                    .map(|p| p.scope == s.scope && p.suggestion == s.suggestion && p.has_edit_token)
                    .unwrap_or(false)
            })
        })
        .count();
    (ok, samples.len())
}
