//! Differentiable evaluation of the composite loss over a batch.

use rayon::prelude::*;

use crate::autograd::Graph;
use crate::codec::{render, RenderedExample, Vocabulary};
use crate::error::TrainError;
use crate::geometry::BoundingBox;
use crate::model::{Bound, Image, ModelBundle, Net};
use crate::objective::losses::{loc_loss_graph, LossBreakdown};
use crate::sample::{EditingSample, LossWeights};
use crate::tensor::Mat;

/// A sample with its raster.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub sample: EditingSample,
    pub image: Image,
}

/// A rendered sample ready for the model.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub image: Image,
    pub rendered: RenderedExample,
    pub gt_box: Option<BoundingBox>,
}

pub fn prepare(examples: &[TrainExample], vocab: &Vocabulary) -> Result<Vec<PreparedExample>, TrainError> {
    examples
        .iter()
        .enumerate()
        .map(|(index, ex)| {
            let rendered = render(&ex.sample, vocab).map_err(|e| TrainError::InvalidSample {
                index,
                reason: e.to_string(),
            })?;
            Ok(PreparedExample {
                image: ex.image.clone(),
                rendered,
                gt_box: ex.sample.target_box,
            })
        })
        .collect()
}

pub struct BatchEval {
    pub breakdown: LossBreakdown,
    /// Gradient of `l_total` for every parameter, in bundle order. Frozen
    /// parameters get exact zeros.
    pub grads: Option<Vec<Mat>>,
    /// Sum of the per-sample graph contributions; equals `l_total` up to
    /// rounding.
    pub graph_total: f64,
}

struct SampleResult {
    nll: f64,
    loc: Option<f64>,
    contribution: f64,
    grads: Option<Vec<Option<Mat>>>,
}

fn check_consistency(i: usize, ex: &PreparedExample) -> Result<(), TrainError> {
    let r = &ex.rendered;
    match (r.box_supervised, ex.gt_box.is_some(), r.edit_token_position.is_some()) {
        (true, false, _) => Err(TrainError::Inconsistent(format!("sample {i}: box-supervised without ground-truth box"))),
        (true, true, false) => Err(TrainError::Inconsistent(format!("sample {i}: box-supervised without EDIT token"))),
        (false, true, _) => Err(TrainError::Inconsistent(format!("sample {i}: ground-truth box on an unsupervised sample"))),
        _ => Ok(()),
    }
}

pub fn evaluate_batch(
    bundle: &ModelBundle,
    batch: &[&PreparedExample],
    weights: &LossWeights,
    with_grads: bool,
) -> Result<BatchEval, TrainError> {
    for (i, ex) in batch.iter().enumerate() {
        check_consistency(i, ex)?;
    }
    let n_text: usize = batch
        .iter()
        .map(|ex| ex.rendered.text_loss_mask.iter().filter(|&&m| m).count())
        .sum();
    if n_text == 0 {
        return Err(TrainError::EmptyMask);
    }
    let n_box = batch.iter().filter(|ex| ex.rendered.box_supervised).count();
    let txt_scale = weights.lambda_txt / n_text as f64;
    let loc_scale = if n_box > 0 { weights.lambda_loc / n_box as f64 } else { 0.0 };

    let results: Vec<Result<SampleResult, TrainError>> = batch
        .par_iter()
        .map(|ex| {
            let mut g = Graph::new();
            let bound = Bound::new(&mut g, bundle, with_grads);
            let net = Net::new(bundle, &bound);
            let h_img = net.encode(&mut g, &ex.image)?;
            let r = &ex.rendered;
            let dec = net.decode(&mut g, &r.token_ids, h_img)?;

            let start = r.target_start();
            let count = r.len() - start;
            let logits = net.logits(&mut g, dec.hidden, dec.expanded(start) - 1, count);
            let targets: Vec<(usize, usize)> = (0..count)
                .filter(|&k| r.text_loss_mask[start + k])
                .map(|k| (k, r.token_ids[start + k] as usize))
                .collect();
            let nll = g.cross_entropy_sum(logits, &targets);
            let mut total = g.scale(nll, txt_scale);

            let mut loc = None;
            if r.box_supervised {
                let e = dec.expanded(r.edit_token_position.expect("checked"));
                let h_edit = g.slice_rows(dec.hidden, e, 1);
                let corners = net.localize(&mut g, h_edit, h_img);
                let l = loc_loss_graph(&mut g, corners, ex.gt_box.as_ref().expect("checked"));
                loc = Some(g.value(l).to_scalar());
                let scaled = g.scale(l, loc_scale);
                total = g.add(total, scaled);
            }

            let grads = with_grads.then(|| {
                let gr = g.backward(total);
                (0..bundle.params().len())
                    .map(|i| gr.get(bound.var(i)).cloned())
                    .collect()
            });
            Ok(SampleResult {
                nll: g.value(nll).to_scalar(),
                loc,
                contribution: g.value(total).to_scalar(),
                grads,
            })
        })
        .collect();

    let mut nll_sum = 0.0;
    let mut loc_sum = 0.0;
    let mut graph_total = 0.0;
    let mut grads: Option<Vec<Mat>> = with_grads.then(|| {
        bundle
            .params()
            .iter()
            .map(|p| Mat::zeros(p.value.rows(), p.value.cols()))
            .collect()
    });
    for res in results {
        let res = res?;
        nll_sum += res.nll;
        loc_sum += res.loc.unwrap_or(0.0);
        graph_total += res.contribution;
        if let (Some(acc), Some(sample_grads)) = (grads.as_mut(), res.grads) {
            for (a, g) in acc.iter_mut().zip(sample_grads) {
                if let Some(g) = g {
                    a.add_assign(&g);
                }
            }
        }
    }
    let l_loc = if n_box > 0 { loc_sum / n_box as f64 } else { 0.0 };
    Ok(BatchEval {
        breakdown: LossBreakdown::new(nll_sum / n_text as f64, l_loc, weights, n_text, n_box),
        grads,
        graph_total,
    })
}
