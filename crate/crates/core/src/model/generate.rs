//! Autoregressive decoding with EDIT-triggered localization.

use rand::Rng;
use serde::Serialize;

use crate::autograd::{softmax_rows, Graph};
use crate::codec::{encode_prompt, parse_reply, SpecialToken, RESERVED_LITERALS};
use crate::error::{CodecError, ModelError};
use crate::geometry::BoundingBox;
use crate::model::bundle::ModelBundle;
use crate::model::image::Image;
use crate::model::network::{corners_to_box, encode_image, Bound, FeatureGrid, Net};
use crate::rng::rng_for;
use crate::sample::Scope;
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

/// Decoded reply. Text and box travel in separate fields: the suggestion
/// never carries coordinates and the box never carries text.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Generation {
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scope: Option<Scope>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub suggestion: Option<String>,
    #[serde(rename = "box", skip_serializing_if = "Option::is_none")]
    pub target_box: Option<BoundingBox>,
    pub edit_token: bool,
    /// `max_new_tokens` ran out before an EDIT or end token.
    pub incomplete: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
    /// Reply parsed as local but no EDIT token was produced.
    pub box_missing: bool,
    #[serde(skip)]
    pub token_ids: Vec<u32>,
}

fn next_token_logits(
    bundle: &ModelBundle,
    bound: &Bound,
    g: &mut Graph,
    ids: &[u32],
    h_img: &FeatureGrid,
) -> Result<Mat, ModelError> {
    let net = Net::new(bundle, bound);
    let f = g.constant(h_img.h_img.clone());
    let dec = net.decode(g, ids, f)?;
    let l = net.logits(g, dec.hidden, dec.expanded_len - 1, 1);
    Ok(g.value(l).clone())
}

pub fn generate(
    image: &Image,
    hint: &str,
    bundle: &ModelBundle,
    mode: DecodeMode,
    max_new_tokens: usize,
) -> Result<Generation, ModelError> {
    if let Some(lit) = RESERVED_LITERALS.iter().find(|l| hint.contains(*l)) {
        return Err(CodecError::ReservedLiteral(lit.to_string()).into());
    }
    let h_img = encode_image(image, bundle)?;
    let mut ids = encode_prompt(bundle.vocab(), hint);
    let prompt_len = ids.len();
    let mut rng = match mode {
        DecodeMode::Sample { seed, .. } => Some(rng_for(seed, "generate-sample")),
        DecodeMode::Greedy => None,
    };

    let mut edit_token = false;
    let mut finished = false;
    for _ in 0..max_new_tokens {
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, bundle, false);
        let logits = next_token_logits(bundle, &bound, &mut g, &ids, &h_img)?;
        let next = match (mode, rng.as_mut()) {
            (DecodeMode::Sample { temperature, .. }, Some(rng)) if temperature > 0.0 => {
                let probs = softmax_rows(&logits.scale(1.0 / temperature), false);
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = probs.cols() - 1;
                for (i, p) in probs.row(0).iter().enumerate() {
                    acc += p;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                pick as u32
            }
            _ => argmax(logits.row(0)) as u32,
        };
        if next == SpecialToken::End.id() {
            finished = true;
            break;
        }
        ids.push(next);
        if next == SpecialToken::Edit.id() {
            edit_token = true;
            finished = true;
            break;
        }
    }

    let generated = &ids[prompt_len..];
    let text = bundle.vocab().decode(generated).trim().to_string();
    let (scope, suggestion, parse_error) = match parse_reply(&text) {
        Ok(p) => (Some(p.scope), Some(p.suggestion), None),
        Err(e) => (None, None, Some(e.to_string())),
    };

    let target_box = if edit_token {
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, bundle, false);
        let net = Net::new(bundle, &bound);
        let f = g.constant(h_img.h_img.clone());
        let dec = net.decode(&mut g, &ids, f)?;
        let h_edit = g.slice_rows(dec.hidden, dec.expanded(ids.len() - 1), 1);
        let corners = net.localize(&mut g, h_edit, f);
        Some(corners_to_box(g.value(corners))?)
    } else {
        None
    };
    let box_missing = scope == Some(Scope::Local) && !edit_token;
    if box_missing {
        log::warn!("local reply without an EDIT token; no box produced");
    }

    Ok(Generation {
        text,
        scope,
        suggestion,
        target_box,
        edit_token,
        incomplete: !finished,
        parse_error,
        box_missing,
        token_ids: generated.to_vec(),
    })
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}
