//! Graph construction for the vision encoder, the language decoder and the
//! localization decoder.

use crate::autograd::{Graph, Var};
use crate::codec::{RenderedExample, SpecialToken};
use crate::error::ModelError;
use crate::geometry::BoundingBox;
use crate::model::bundle::ModelBundle;
use crate::model::image::Image;
use crate::tensor::Mat;

/// Lower bound on predicted box width and height.
pub const MIN_BOX_SIZE: f64 = 1e-3;

/// Patch features of one image, `(n_patches, d_vision)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub h_img: Mat,
}

/// Final-layer decoder state at the EDIT position.
#[derive(Debug, Clone, PartialEq)]
pub struct EditEmbedding {
    pub h_edit: Vec<f64>,
}

/// Parameters placed on a graph as leaves.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// With `track`, trainable parameters become tracked leaves; frozen
    /// groups are always constants.
    pub fn new(g: &mut Graph, bundle: &ModelBundle, track: bool) -> Self {
        let vars = bundle
            .params()
            .iter()
            .enumerate()
            .map(|(i, p)| g.leaf(p.value.clone(), track && bundle.is_trainable(i)))
            .collect();
        Self { vars }
    }

    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }
}

/// Decoder pass over a sequence whose IMAGE token was expanded into patches.
pub struct Decoded {
    pub hidden: Var,
    pub image_slot: usize,
    pub n_patches: usize,
    pub expanded_len: usize,
}

impl Decoded {
    /// Position in the expanded sequence of original token index `t`.
    /// The IMAGE token itself maps to its first patch.
    pub fn expanded(&self, t: usize) -> usize {
        if t <= self.image_slot {
            t
        } else {
            t - 1 + self.n_patches
        }
    }
}

pub struct Net<'a> {
    bundle: &'a ModelBundle,
    bound: &'a Bound,
}

impl<'a> Net<'a> {
    pub fn new(bundle: &'a ModelBundle, bound: &'a Bound) -> Self {
        Self { bundle, bound }
    }

    fn p(&self, name: &str) -> Var {
        let i = self
            .bundle
            .index_of(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        self.bound.var(i)
    }

    fn linear(&self, g: &mut Graph, x: Var, prefix: &str, w: &str, b: &str) -> Var {
        let y = g.matmul(x, self.p(&format!("{prefix}{w}")));
        g.add_row(y, self.p(&format!("{prefix}{b}")))
    }

    fn layer_norm(&self, g: &mut Graph, x: Var, prefix: &str) -> Var {
        g.layer_norm(x, self.p(&format!("{prefix}.g")), self.p(&format!("{prefix}.b")))
    }

    fn mlp(&self, g: &mut Graph, x: Var, prefix: &str) -> Var {
        let h = self.linear(g, x, prefix, ".w1", ".b1");
        let h = g.gelu(h);
        self.linear(g, h, prefix, ".w2", ".b2")
    }

    /// Multi-head attention of `queries` over `context`.
    fn attention(&self, g: &mut Graph, queries: Var, context: Var, prefix: &str, causal: bool) -> Var {
        let heads = self.bundle.config().n_heads;
        let q = self.linear(g, queries, prefix, ".wq", ".bq");
        let k = self.linear(g, context, prefix, ".wk", ".bk");
        let v = self.linear(g, context, prefix, ".wv", ".bv");
        let width = g.value(q).cols();
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let outs: Vec<Var> = (0..heads)
            .map(|h| {
                let qh = g.slice_cols(q, h * dh, dh);
                let kh = g.slice_cols(k, h * dh, dh);
                let vh = g.slice_cols(v, h * dh, dh);
                let scores = g.matmul_t(qh, kh);
                let scores = g.scale(scores, scale);
                let probs = g.softmax(scores, causal);
                g.matmul(probs, vh)
            })
            .collect();
        let joined = g.concat_cols(&outs);
        self.linear(g, joined, prefix, ".wo", ".bo")
    }

    pub fn encode(&self, g: &mut Graph, image: &Image) -> Result<Var, ModelError> {
        let c = self.bundle.config();
        if image.size() != c.image_size {
            return Err(ModelError::ImageShape {
                expected: c.image_size,
                got: format!("{0}x{0}x3", image.size()),
            });
        }
        let patches = g.constant(image.patches(c.patch_size));
        let x = self.linear(g, patches, "enc.patch", ".w", ".b");
        let x = g.add(x, self.p("enc.pos"));
        let m = self.mlp(g, x, "enc.mlp");
        let x = g.add(x, m);
        Ok(self.layer_norm(g, x, "enc.ln"))
    }

    pub fn decode(&self, g: &mut Graph, ids: &[u32], h_img: Var) -> Result<Decoded, ModelError> {
        let c = self.bundle.config();
        let image_slot = ids
            .iter()
            .position(|&t| t == SpecialToken::Image.id())
            .ok_or(ModelError::MissingImageToken)?;
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(ModelError::TokenOutOfRange(bad));
        }
        let n_patches = g.value(h_img).rows();
        let expanded_len = ids.len() - 1 + n_patches;
        if expanded_len > c.max_sequence_length {
            return Err(ModelError::Overlong {
                len: expanded_len,
                max: c.max_sequence_length,
            });
        }

        let tok = self.p("dec.tok");
        let to_idx = |s: &[u32]| s.iter().map(|&t| t as usize).collect::<Vec<_>>();
        let h = self.linear(g, h_img, "proj", ".w1", ".b1");
        let h = g.gelu(h);
        let projected = self.linear(g, h, "proj", ".w2", ".b2");
        let mut parts = Vec::with_capacity(3);
        if image_slot > 0 {
            parts.push(g.gather(tok, &to_idx(&ids[..image_slot])));
        }
        parts.push(projected);
        if image_slot + 1 < ids.len() {
            parts.push(g.gather(tok, &to_idx(&ids[image_slot + 1..])));
        }
        let x = g.concat_rows(&parts);
        let positions: Vec<usize> = (0..expanded_len).collect();
        let pos = g.gather(self.p("dec.pos"), &positions);
        let mut x = g.add(x, pos);

        for l in 0..c.n_layers {
            let pre = format!("dec.{l}");
            let n = self.layer_norm(g, x, &format!("{pre}.ln1"));
            let a = self.attention(g, n, n, &format!("{pre}.attn"), true);
            x = g.add(x, a);
            let n = self.layer_norm(g, x, &format!("{pre}.ln2"));
            let m = self.mlp(g, n, &format!("{pre}.mlp"));
            x = g.add(x, m);
        }
        Ok(Decoded {
            hidden: x,
            image_slot,
            n_patches,
            expanded_len,
        })
    }

    /// Next-token logits for `count` expanded rows starting at `start`.
    pub fn logits(&self, g: &mut Graph, hidden: Var, start: usize, count: usize) -> Var {
        let rows = g.slice_rows(hidden, start, count);
        let n = self.layer_norm(g, rows, "dec.lnf");
        self.linear(g, n, "dec.head", ".w", ".b")
    }

    /// Box corners `(1, 4)` from the EDIT state and image features.
    pub fn localize(&self, g: &mut Graph, h_edit: Var, h_img: Var) -> Var {
        let c = self.bundle.config();
        let n_proj = c.loc_proj_channels.len();
        let mut q = h_edit;
        for i in 0..n_proj {
            q = self.linear(g, q, &format!("loc.proj.{i}"), ".w", ".b");
            if i + 1 < n_proj {
                q = g.gelu(q);
            }
        }
        for l in 0..c.loc_decoder_layers {
            let pre = format!("loc.{l}");
            let a = self.attention(g, q, h_img, &format!("{pre}.attn"), false);
            let s = g.add(q, a);
            q = self.layer_norm(g, s, &format!("{pre}.ln1"));
            let m = self.mlp(g, q, &format!("{pre}.mlp"));
            let s = g.add(q, m);
            q = self.layer_norm(g, s, &format!("{pre}.ln2"));
        }
        // Reference point: attention-weighted mean of patch centres, refined
        // by the head's offset.
        let keys = self.linear(g, h_img, "loc.ref", ".wk", ".bk");
        let scores = g.matmul_t(q, keys);
        let scores = g.scale(scores, 1.0 / (c.loc_width() as f64).sqrt());
        let weights = g.softmax(scores, false);
        let centres = g.constant(patch_centres(c.image_size / c.patch_size));
        let reference = g.matmul(weights, centres);

        let raw = self.linear(g, q, "loc.head", ".w", ".b");
        let s = g.sigmoid(raw);
        let offset = g.slice_cols(s, 0, 2);
        let offset = g.add_scalar(offset, -0.5);
        let center = g.add(reference, offset);
        let zeros = g.constant(Mat::zeros(1, 2));
        let ones = g.constant(Mat::full(1, 2, 1.0));
        let center = g.maximum(center, zeros);
        let center = g.minimum(center, ones);
        let size = g.slice_cols(s, 2, 2);
        let size = g.scale(size, 1.0 - MIN_BOX_SIZE);
        let size = g.add_scalar(size, MIN_BOX_SIZE);
        let half = g.scale(size, 0.5);
        let lo = g.sub(center, half);
        let hi = g.add(center, half);
        let lo = g.maximum(lo, zeros);
        let hi = g.minimum(hi, ones);
        g.concat_cols(&[lo, hi])
    }
}

/// Normalized `(x, y)` centre of every patch, row-major over the grid.
fn patch_centres(side: usize) -> Mat {
    let mut m = Mat::zeros(side * side, 2);
    for r in 0..side {
        for c in 0..side {
            m.set(r * side + c, 0, (c as f64 + 0.5) / side as f64);
            m.set(r * side + c, 1, (r as f64 + 0.5) / side as f64);
        }
    }
    m
}

pub(crate) fn corners_to_box(m: &Mat) -> Result<BoundingBox, ModelError> {
    let d = m.data();
    BoundingBox::new(d[0], d[1], d[2], d[3])
        .map_err(|e| ModelError::Config(format!("localization produced an invalid box: {e}")))
}

pub fn encode_image(image: &Image, bundle: &ModelBundle) -> Result<FeatureGrid, ModelError> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, bundle, false);
    let h = Net::new(bundle, &bound).encode(&mut g, image)?;
    Ok(FeatureGrid {
        h_img: g.value(h).clone(),
    })
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Row `i` holds the logits predicting the `i`-th target token.
    pub target_logits: Mat,
    /// Token ids the rows of `target_logits` predict.
    pub target_ids: Vec<u32>,
    /// Final decoder layer states over the expanded sequence.
    pub hidden: Mat,
    pub h_edit: Option<EditEmbedding>,
    pub h_img: FeatureGrid,
    pub expanded_len: usize,
    /// Expanded index of the EDIT token, when present.
    pub edit_index: Option<usize>,
}

pub fn forward_teacher_forced(
    image: &Image,
    rendered: &RenderedExample,
    bundle: &ModelBundle,
) -> Result<ForwardOutput, ModelError> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, bundle, false);
    let net = Net::new(bundle, &bound);
    let h_img = net.encode(&mut g, image)?;
    let dec = net.decode(&mut g, &rendered.token_ids, h_img)?;

    let start = rendered.target_start();
    let target_ids = rendered.token_ids[start..].to_vec();
    let target_logits = if target_ids.is_empty() {
        Mat::zeros(0, bundle.config().vocab_size)
    } else {
        let l = net.logits(&mut g, dec.hidden, dec.expanded(start) - 1, target_ids.len());
        g.value(l).clone()
    };
    let hidden = g.value(dec.hidden).clone();
    let edit_index = rendered.edit_token_position.map(|p| dec.expanded(p));
    let h_edit = edit_index.map(|e| EditEmbedding {
        h_edit: hidden.row(e).to_vec(),
    });
    Ok(ForwardOutput {
        target_logits,
        target_ids,
        hidden,
        h_edit,
        h_img: FeatureGrid {
            h_img: g.value(h_img).clone(),
        },
        expanded_len: dec.expanded_len,
        edit_index,
    })
}

pub fn localize(h_edit: &EditEmbedding, h_img: &FeatureGrid, bundle: &ModelBundle) -> Result<BoundingBox, ModelError> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, bundle, false);
    let net = Net::new(bundle, &bound);
    let e = g.constant(Mat::row_vector(h_edit.h_edit.clone()));
    let f = g.constant(h_img.h_img.clone());
    let corners = net.localize(&mut g, e, f);
    corners_to_box(g.value(corners))
}
