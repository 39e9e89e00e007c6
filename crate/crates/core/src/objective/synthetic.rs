//! Synthetic grounding task: one colored rectangle on a noise background.
//!
//! Local samples paint a small marker and supervise its box; global samples
//! paint a large block and ask for a scene-level edit, so scope is readable
//! from the image.

use rand::Rng;

use crate::codec::{render_prompt, render_reply, Vocabulary};
use crate::geometry::BoundingBox;
use crate::model::Image;
use crate::objective::batch::TrainExample;
use crate::rng::rng_for;
use crate::sample::{EditingSample, Provenance, Scope};

pub const IMAGE_SIZE: usize = 32;
const NOISE_MAX: f64 = 0.3;
const LOCAL_SIDE: (usize, usize) = (10, 18);
const GLOBAL_SIDE: (usize, usize) = (24, 32);

pub const PALETTE: [(&str, [f64; 3]); 6] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("cyan", [0.0, 1.0, 1.0]),
    ("magenta", [1.0, 0.0, 1.0]),
];

pub fn local_suggestion(color: &str) -> String {
    format!("add a star to the {color} marker")
}

pub fn global_suggestion(color: &str) -> String {
    format!("bathe the whole scene in {color} light")
}

/// Every string the synthetic task can render.
pub fn synthetic_vocabulary() -> Vocabulary {
    let mut corpus = Vec::new();
    for (color, _) in PALETTE {
        corpus.push(render_prompt(color));
        corpus.push(format!(" {}", render_reply(Scope::Local, &local_suggestion(color))));
        corpus.push(format!(" {}", render_reply(Scope::Global, &global_suggestion(color))));
    }
    Vocabulary::build(corpus.iter().map(String::as_str))
}

/// `n` samples alternating global (even index) and local (odd index).
pub fn synthesize_dataset(seed: u64, n: usize) -> Vec<TrainExample> {
    let mut rng = rng_for(seed, "synthetic-dataset");
    (0..n)
        .map(|i| {
            let scope = if i % 2 == 0 { Scope::Global } else { Scope::Local };
            let (color, rgb) = PALETTE[rng.gen_range(0..PALETTE.len())];
            let mut data = vec![0.0; IMAGE_SIZE * IMAGE_SIZE * 3];
            for v in data.iter_mut() {
                *v = rng.gen_range(0.0..NOISE_MAX);
            }
            let mut image = Image::new(IMAGE_SIZE, data).expect("sized buffer");
            let (lo, hi) = match scope {
                Scope::Local => LOCAL_SIDE,
                Scope::Global => GLOBAL_SIDE,
            };
            let w = rng.gen_range(lo..=hi);
            let h = rng.gen_range(lo..=hi);
            let x = rng.gen_range(0..=IMAGE_SIZE - w);
            let y = rng.gen_range(0..=IMAGE_SIZE - h);
            for py in y..y + h {
                for px in x..x + w {
                    image.set_pixel(px, py, rgb);
                }
            }
            let s = IMAGE_SIZE as f64;
            let rect = BoundingBox::new(x as f64 / s, y as f64 / s, (x + w) as f64 / s, (y + h) as f64 / s)
                .expect("rectangle inside the canvas");
            let (suggestion, target_box, object) = match scope {
                Scope::Local => (local_suggestion(color), Some(rect), "marker"),
                Scope::Global => (global_suggestion(color), None, "scene"),
            };
            TrainExample {
                sample: EditingSample {
                    image_ref: format!("synthetic:{seed}:{i}"),
                    hint: color.to_string(),
                    scope,
                    suggestion,
                    target_box,
                    edited_object: object.to_string(),
                    provenance: Provenance::default(),
                },
                image,
            }
        })
        .collect()
}
