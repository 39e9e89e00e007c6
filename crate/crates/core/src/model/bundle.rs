use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::codec::Vocabulary;
use crate::error::ModelError;
use crate::model::config::{FreezeFlags, Group, ModelConfig};
use crate::rng::rng_for;
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Mat,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
    /// 2-D sinusoidal table over a `side x side` patch grid.
    Sinusoid2d(usize),
}

/// Name, group, shape and initializer of every parameter, in storage order.
fn layout(c: &ModelConfig) -> Vec<(String, Group, (usize, usize), Init)> {
    use Group::*;
    let mut out = Vec::new();
    let mut push = |name: String, g: Group, shape: (usize, usize), init: Init| out.push((name, g, shape, init));
    let linear = |fan_in: usize| Init::Normal(1.0 / (fan_in as f64).sqrt());

    let (dv, dm, pd) = (c.d_vision, c.d_model, c.patch_dim());
    push("enc.patch.w".into(), Encoder, (pd, dv), linear(pd));
    push("enc.patch.b".into(), Encoder, (1, dv), Init::Zeros);
    push("enc.pos".into(), Encoder, (c.n_patches(), dv), Init::Sinusoid2d(c.image_size / c.patch_size));
    push("enc.mlp.w1".into(), Encoder, (dv, 2 * dv), linear(dv));
    push("enc.mlp.b1".into(), Encoder, (1, 2 * dv), Init::Zeros);
    push("enc.mlp.w2".into(), Encoder, (2 * dv, dv), linear(2 * dv));
    push("enc.mlp.b2".into(), Encoder, (1, dv), Init::Zeros);
    push("enc.ln.g".into(), Encoder, (1, dv), Init::Ones);
    push("enc.ln.b".into(), Encoder, (1, dv), Init::Zeros);

    push("proj.w1".into(), Projector, (dv, dm), linear(dv));
    push("proj.b1".into(), Projector, (1, dm), Init::Zeros);
    push("proj.w2".into(), Projector, (dm, dm), linear(dm));
    push("proj.b2".into(), Projector, (1, dm), Init::Zeros);

    push("dec.tok".into(), Decoder, (c.vocab_size, dm), Init::Normal(0.1));
    push("dec.pos".into(), Decoder, (c.max_sequence_length, dm), Init::Normal(0.02));
    for l in 0..c.n_layers {
        let p = |s: &str| format!("dec.{l}.{s}");
        push(p("ln1.g"), Decoder, (1, dm), Init::Ones);
        push(p("ln1.b"), Decoder, (1, dm), Init::Zeros);
        for w in ["q", "k", "v", "o"] {
            push(p(&format!("attn.w{w}")), Decoder, (dm, dm), linear(dm));
            push(p(&format!("attn.b{w}")), Decoder, (1, dm), Init::Zeros);
        }
        push(p("ln2.g"), Decoder, (1, dm), Init::Ones);
        push(p("ln2.b"), Decoder, (1, dm), Init::Zeros);
        push(p("mlp.w1"), Decoder, (dm, 4 * dm), linear(dm));
        push(p("mlp.b1"), Decoder, (1, 4 * dm), Init::Zeros);
        push(p("mlp.w2"), Decoder, (4 * dm, dm), linear(4 * dm));
        push(p("mlp.b2"), Decoder, (1, dm), Init::Zeros);
    }
    push("dec.lnf.g".into(), Decoder, (1, dm), Init::Ones);
    push("dec.lnf.b".into(), Decoder, (1, dm), Init::Zeros);
    push("dec.head.w".into(), Decoder, (dm, c.vocab_size), linear(dm));
    push("dec.head.b".into(), Decoder, (1, c.vocab_size), Init::Zeros);

    let mut width = dm;
    for (i, &ch) in c.loc_proj_channels.iter().enumerate() {
        push(format!("loc.proj.{i}.w"), Localizer, (width, ch), linear(width));
        push(format!("loc.proj.{i}.b"), Localizer, (1, ch), Init::Zeros);
        width = ch;
    }
    let lw = c.loc_width();
    for l in 0..c.loc_decoder_layers {
        let p = |s: &str| format!("loc.{l}.{s}");
        push(p("attn.wq"), Localizer, (lw, lw), linear(lw));
        push(p("attn.bq"), Localizer, (1, lw), Init::Zeros);
        push(p("attn.wk"), Localizer, (dv, lw), linear(dv));
        push(p("attn.bk"), Localizer, (1, lw), Init::Zeros);
        push(p("attn.wv"), Localizer, (dv, lw), linear(dv));
        push(p("attn.bv"), Localizer, (1, lw), Init::Zeros);
        push(p("attn.wo"), Localizer, (lw, lw), linear(lw));
        push(p("attn.bo"), Localizer, (1, lw), Init::Zeros);
        push(p("ln1.g"), Localizer, (1, lw), Init::Ones);
        push(p("ln1.b"), Localizer, (1, lw), Init::Zeros);
        push(p("mlp.w1"), Localizer, (lw, 4 * lw), linear(lw));
        push(p("mlp.b1"), Localizer, (1, 4 * lw), Init::Zeros);
        push(p("mlp.w2"), Localizer, (4 * lw, lw), linear(4 * lw));
        push(p("mlp.b2"), Localizer, (1, lw), Init::Zeros);
        push(p("ln2.g"), Localizer, (1, lw), Init::Ones);
        push(p("ln2.b"), Localizer, (1, lw), Init::Zeros);
    }
    push("loc.ref.wk".into(), Localizer, (dv, lw), linear(dv));
    push("loc.ref.bk".into(), Localizer, (1, lw), Init::Zeros);
    push("loc.head.w".into(), Localizer, (lw, 4), Init::Normal(0.01));
    push("loc.head.b".into(), Localizer, (1, 4), Init::Zeros);
    out
}

fn sinusoid_2d(side: usize, dim: usize) -> Mat {
    let mut m = Mat::zeros(side * side, dim);
    let half = dim / 2;
    for r in 0..side {
        for c in 0..side {
            let row = m.row_mut(r * side + c);
            for (k, v) in row.iter_mut().enumerate() {
                let (coord, j) = if k < half { (r, k) } else { (c, k - half) };
                let freq = 1.0 / 100f64.powf((j / 2) as f64 * 2.0 / half.max(1) as f64);
                let angle = coord as f64 * freq;
                *v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            }
        }
    }
    m
}

/// Every parameter of the model, grouped, with freeze flags and the
/// vocabulary it was built for.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    config: ModelConfig,
    pub freeze: FreezeFlags,
    vocab: Vocabulary,
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl PartialEq for ModelBundle {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.freeze == other.freeze
            && self.vocab == other.vocab
            && self.params == other.params
    }
}

impl ModelBundle {
    /// Seeded initialization. `config.vocab_size` of zero is filled from the
    /// vocabulary; a nonzero value must match it.
    pub fn init(mut config: ModelConfig, vocab: Vocabulary) -> Result<Self, ModelError> {
        config = Self::resolve_vocab(config, &vocab)?;
        config.validate()?;
        let mut rng = rng_for(config.seed, "model-init");
        let params = layout(&config)
            .into_iter()
            .map(|(name, group, (r, c), init)| {
                let value = match init {
                    Init::Zeros => Mat::zeros(r, c),
                    Init::Ones => Mat::full(r, c, 1.0),
                    Init::Sinusoid2d(side) => sinusoid_2d(side, c),
                    Init::Normal(std) => {
                        let n = Normal::new(0.0, std).expect("positive std");
                        Mat::from_vec(r, c, (0..r * c).map(|_| n.sample(&mut rng)).collect())
                    }
                };
                Param { name, group, value }
            })
            .collect();
        Ok(Self::assemble(config, FreezeFlags::default(), vocab, params))
    }

    fn resolve_vocab(mut config: ModelConfig, vocab: &Vocabulary) -> Result<ModelConfig, ModelError> {
        if config.vocab_size == 0 {
            config.vocab_size = vocab.len();
        } else if config.vocab_size != vocab.len() {
            return Err(ModelError::Config(format!(
                "vocab_size {} does not match vocabulary of {} pieces",
                config.vocab_size,
                vocab.len()
            )));
        }
        Ok(config)
    }

    fn assemble(config: ModelConfig, freeze: FreezeFlags, vocab: Vocabulary, params: Vec<Param>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Self {
            config,
            freeze,
            vocab,
            params,
            index,
        }
    }

    /// Rebuilds a bundle from stored arrays, checking names and shapes
    /// against the layout implied by `config`.
    pub fn from_parts(
        config: ModelConfig,
        freeze: FreezeFlags,
        vocab: Vocabulary,
        arrays: Vec<(String, Mat)>,
    ) -> Result<Self, ModelError> {
        let config = Self::resolve_vocab(config, &vocab)?;
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != arrays.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} arrays, found {}",
                expected.len(),
                arrays.len()
            )));
        }
        let mut params = Vec::with_capacity(arrays.len());
        for ((name, group, shape, _), (found_name, value)) in expected.into_iter().zip(arrays) {
            if name != found_name {
                return Err(ModelError::Checkpoint(format!(
                    "expected array {name:?}, found {found_name:?}"
                )));
            }
            if value.shape() != shape {
                return Err(ModelError::ShapeMismatch {
                    name,
                    expected: shape,
                    found: value.shape(),
                });
            }
            params.push(Param { name, group, value });
        }
        Ok(Self::assemble(config, freeze, vocab, params))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &Mat {
        &self.params[self.index[name]].value
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        !self.freeze.is_frozen(self.params[i].group)
    }

    pub fn n_parameters(&self, group: Option<Group>) -> usize {
        self.params
            .iter()
            .filter(|p| group.is_none_or(|g| p.group == g))
            .map(|p| p.value.data().len())
            .sum()
    }

    /// Little-endian bytes of every array in `group`, in storage order.
    pub fn group_bytes(&self, group: Group) -> Vec<u8> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .flat_map(|p| p.value.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    /// Overwrites parameters (all, or one group) with draws from `N(0, std)`,
    /// layer-norm gains included. Used for property tests.
    pub fn randomize<R: Rng>(&mut self, group: Option<Group>, std: f64, rng: &mut R) {
        let n = Normal::new(0.0, std).expect("positive std");
        for p in self.params.iter_mut().filter(|p| group.is_none_or(|g| p.group == g)) {
            for v in p.value.data_mut() {
                *v = n.sample(rng);
            }
        }
    }
}
