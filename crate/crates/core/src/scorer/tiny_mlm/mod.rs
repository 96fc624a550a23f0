//! A small masked-token transformer encoder used as a trainable relevance
//! metric.
//!
//! Token and position embeddings feed `blocks` pre-norm encoder blocks
//! (multi-head self-attention and a GELU feed-forward layer, each with a
//! residual connection). A final layer norm at the mask position is projected
//! onto the vocabulary through the transposed token embedding plus a bias.
//!
//! All parameters live in a single flat `f64` buffer described by a
//! [`TensorSpec`] layout, which the optimizer, the gradient checker and the
//! checkpoint format share.

mod model;
pub(crate) mod ops;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    meta_verbalize, meta_verbalize_logits, Aggregate, BinomialRelevance, MetaVerbalizer,
    RelevanceScorer, ScorerError, VocabDistribution,
};
use crate::corpus::Tokenizer;
use crate::prompting::{render_pair, PromptTemplate, PromptedPair, Rendered};

pub(crate) use model::{loss_and_grad, loss_and_grad_dropped, mask_logits};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub vocab_size: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub max_len: usize,
}

impl Architecture {
    /// Width 64, two blocks, two heads, feed-forward width 128.
    pub fn toy(vocab_size: usize, max_len: usize) -> Self {
        Architecture {
            vocab_size,
            width: 64,
            blocks: 2,
            heads: 2,
            ff_width: 128,
            max_len,
        }
    }

    pub fn validate(&self) -> Result<(), ScorerError> {
        let bad = |msg: String| Err(ScorerError::Architecture(msg));
        if self.vocab_size == 0 || self.width == 0 || self.ff_width == 0 || self.max_len == 0 {
            return bad(format!("all dimensions must be positive: {self:?}"));
        }
        if self.blocks == 0 {
            return bad("at least one encoder block is required".into());
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!(
                "width {} is not divisible into {} heads",
                self.width, self.heads
            ));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }
}

/// Name, shape and position of one tensor in the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockOffsets {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Offsets {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub blocks: Vec<BlockOffsets>,
    pub lnf_gain: usize,
    pub lnf_bias: usize,
    pub out_bias: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub offsets: Offsets,
    pub total: usize,
}

impl Layout {
    fn new(arch: &Architecture) -> Self {
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>, decay: bool| {
            let spec = TensorSpec {
                name,
                shape,
                offset: total,
                decay,
            };
            total += spec.len();
            let offset = spec.offset;
            tensors.push(spec);
            offset
        };
        let (v, d, f) = (arch.vocab_size, arch.width, arch.ff_width);
        let tok_emb = push("tok_emb".into(), vec![v, d], true);
        let pos_emb = push("pos_emb".into(), vec![arch.max_len, d], true);
        let mut blocks = Vec::with_capacity(arch.blocks);
        for b in 0..arch.blocks {
            let n = |s: &str| format!("blocks.{b}.{s}");
            blocks.push(BlockOffsets {
                ln1_gain: push(n("ln1.gain"), vec![d], false),
                ln1_bias: push(n("ln1.bias"), vec![d], false),
                wq: push(n("attn.wq"), vec![d, d], true),
                bq: push(n("attn.bq"), vec![d], false),
                wk: push(n("attn.wk"), vec![d, d], true),
                bk: push(n("attn.bk"), vec![d], false),
                wv: push(n("attn.wv"), vec![d, d], true),
                bv: push(n("attn.bv"), vec![d], false),
                wo: push(n("attn.wo"), vec![d, d], true),
                bo: push(n("attn.bo"), vec![d], false),
                ln2_gain: push(n("ln2.gain"), vec![d], false),
                ln2_bias: push(n("ln2.bias"), vec![d], false),
                w1: push(n("ff.w1"), vec![d, f], true),
                b1: push(n("ff.b1"), vec![f], false),
                w2: push(n("ff.w2"), vec![f, d], true),
                b2: push(n("ff.b2"), vec![d], false),
            });
        }
        let lnf_gain = push("ln_f.gain".into(), vec![d], false);
        let lnf_bias = push("ln_f.bias".into(), vec![d], false);
        let out_bias = push("out_bias".into(), vec![v], false);
        Layout {
            tensors,
            offsets: Offsets {
                tok_emb,
                pos_emb,
                blocks,
                lnf_gain,
                lnf_bias,
                out_bias,
            },
            total,
        }
    }
}

/// Flat parameter buffer of a tiny masked-token scorer.
#[derive(Debug, Clone)]
pub struct ScorerParams {
    arch: Architecture,
    data: Vec<f64>,
    layout: Layout,
}

impl PartialEq for ScorerParams {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.data == other.data
    }
}

impl ScorerParams {
    /// Seeded initialization: weights and embeddings from N(0, 0.02²),
    /// biases at zero, layer-norm gains at one.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self, ScorerError> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut data = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for spec in &layout.tensors {
            let slot = &mut data[spec.range()];
            if spec.decay {
                for v in slot.iter_mut() {
                    *v = normal.sample(&mut rng);
                }
            } else if spec.name.ends_with(".gain") {
                slot.fill(1.0);
            }
        }
        Ok(ScorerParams { arch, data, layout })
    }

    /// Rebuilds parameters from named tensors, checking every name and shape
    /// against the architecture.
    pub fn from_tensors(
        arch: Architecture,
        tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
    ) -> Result<Self, String> {
        arch.validate().map_err(|e| e.to_string())?;
        let layout = Layout::new(&arch);
        if tensors.len() != layout.tensors.len() {
            return Err(format!(
                "expected {} tensors, found {}",
                layout.tensors.len(),
                tensors.len()
            ));
        }
        let mut data = vec![0.0; layout.total];
        for (spec, (name, shape, values)) in layout.tensors.iter().zip(tensors) {
            if spec.name != name || spec.shape != shape {
                return Err(format!(
                    "tensor {name:?} {shape:?} does not match expected {:?} {:?}",
                    spec.name, spec.shape
                ));
            }
            if values.len() != spec.len() {
                return Err(format!(
                    "tensor {name:?} holds {} values, shape needs {}",
                    values.len(),
                    spec.len()
                ));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(format!("tensor {name:?} contains non-finite values"));
            }
            data[spec.range()].copy_from_slice(&values);
        }
        Ok(ScorerParams { arch, data, layout })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.layout.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &self.data[t.range()])
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn offsets(&self) -> &Offsets {
        &self.layout.offsets
    }
}

/// Loss head shared by training and gradient checking.
#[derive(Debug, Clone)]
pub struct Objective {
    pub aggregate: Aggregate,
    pub verbalizer: MetaVerbalizer,
}

/// Mask-position distribution over the vocabulary.
pub fn f_vocab(params: &ScorerParams, pair: &PromptedPair) -> Result<VocabDistribution, ScorerError> {
    Ok(VocabDistribution::from_logits(&mask_logits(
        params,
        &pair.tokens,
        pair.mask_position,
    )?))
}

/// The trainable scorer bundled with the vocabulary and template it was
/// trained with.
#[derive(Debug, Clone)]
pub struct TinyMlmScorer {
    params: ScorerParams,
    tokenizer: Tokenizer,
    template: PromptTemplate,
    objective: Objective,
}

impl TinyMlmScorer {
    pub fn new(
        params: ScorerParams,
        tokenizer: Tokenizer,
        template: PromptTemplate,
        aggregate: Aggregate,
    ) -> Result<Self, ScorerError> {
        if params.architecture().vocab_size != tokenizer.len() {
            return Err(ScorerError::Architecture(format!(
                "model vocabulary {} differs from tokenizer vocabulary {}",
                params.architecture().vocab_size,
                tokenizer.len()
            )));
        }
        let verbalizer = MetaVerbalizer::resolve(&tokenizer)?;
        Ok(TinyMlmScorer {
            params,
            tokenizer,
            template,
            objective: Objective {
                aggregate,
                verbalizer,
            },
        })
    }

    pub fn params(&self) -> &ScorerParams {
        &self.params
    }

    pub fn set_params(&mut self, params: ScorerParams) {
        assert_eq!(params.architecture(), self.params.architecture());
        self.params = params;
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn template(&self) -> &PromptTemplate {
        &self.template
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    pub fn render(&self, query: &str, reference: &str) -> Rendered {
        let a = self.template.tokenize_side(&self.tokenizer, query);
        let b = self.template.tokenize_side(&self.tokenizer, reference);
        render_pair(&self.template, &self.tokenizer, &a, &b)
    }

    /// Binomial relevance of an already rendered pair.
    pub fn pair_relevance(&self, tokens: &[usize], mask: usize) -> Result<BinomialRelevance, ScorerError> {
        let logits = mask_logits(&self.params, tokens, mask)?;
        match self.objective.aggregate {
            Aggregate::Probs => meta_verbalize(
                &VocabDistribution::from_logits(&logits),
                &self.objective.verbalizer,
            ),
            Aggregate::Logits => meta_verbalize_logits(&logits, &self.objective.verbalizer),
        }
    }
}

impl RelevanceScorer for TinyMlmScorer {
    fn relevance(&self, query: &str, reference: &str) -> Result<BinomialRelevance, ScorerError> {
        let r = self.render(query, reference);
        self.pair_relevance(&r.tokens, r.mask_position)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::SampleKey;

    fn tiny_arch(vocab: usize) -> Architecture {
        Architecture {
            vocab_size: vocab,
            width: 8,
            blocks: 2,
            heads: 2,
            ff_width: 12,
            max_len: 16,
        }
    }

    fn pair(tokens: Vec<usize>, mask: usize) -> PromptedPair {
        let key = SampleKey {
            dataset: "d".into(),
            id: "0".into(),
        };
        PromptedPair {
            tokens,
            mask_position: mask,
            y: None,
            left: key.clone(),
            right: key,
        }
    }

    #[test]
    fn layout_covers_buffer() {
        let p = ScorerParams::init(Architecture::toy(50, 30), 1).unwrap();
        let mut expected = 0;
        for t in p.tensors() {
            assert_eq!(t.offset, expected);
            expected += t.len();
        }
        assert_eq!(expected, p.num_params());
        assert_eq!(p.tensor("tok_emb").unwrap().len(), 50 * 64);
        assert_eq!(p.tensor("out_bias").unwrap().len(), 50);
        assert_eq!(p.tensor("blocks.1.ln2.gain").unwrap(), &[1.0; 64][..]);
    }

    #[test]
    fn architecture_validation() {
        let mut a = tiny_arch(20);
        a.heads = 3;
        assert!(ScorerParams::init(a, 0).is_err());
        a.heads = 2;
        a.blocks = 0;
        assert!(a.validate().is_err());
    }

    #[test]
    fn fresh_model_distribution() {
        let p = ScorerParams::init(tiny_arch(20), 3).unwrap();
        let pr = pair(vec![12, 13, 2, 3, 14, 15], 3);
        let d = f_vocab(&p, &pr).unwrap();
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(d.probs().iter().all(|&x| x > 0.0));
        let max = d.probs().iter().copied().fold(0.0, f64::max);
        let min = d.probs().iter().copied().fold(1.0, f64::min);
        assert!(max / min < 1.5, "fresh model should be close to uniform");
        let again = f_vocab(&p, &pr).unwrap();
        assert_eq!(d, again);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = ScorerParams::init(tiny_arch(20), 3).unwrap();
        assert!(matches!(
            f_vocab(&p, &pair(vec![1; 17], 0)),
            Err(ScorerError::SequenceTooLong { len: 17, max: 16 })
        ));
        assert!(matches!(
            f_vocab(&p, &pair(vec![1, 25], 0)),
            Err(ScorerError::TokenOutOfRange { token: 25, .. })
        ));
        assert!(matches!(
            f_vocab(&p, &pair(vec![1, 2], 2)),
            Err(ScorerError::MaskPosition { .. })
        ));
    }

    #[test]
    fn tensors_round_trip_and_validation() {
        let p = ScorerParams::init(tiny_arch(20), 3).unwrap();
        let named: Vec<_> = p
            .tensors()
            .iter()
            .map(|t| (t.name.clone(), t.shape.clone(), p.data()[t.range()].to_vec()))
            .collect();
        let back = ScorerParams::from_tensors(*p.architecture(), named.clone()).unwrap();
        assert_eq!(back, p);
        let mut broken = named.clone();
        broken[2].1 = vec![1];
        assert!(ScorerParams::from_tensors(*p.architecture(), broken).is_err());
        let mut nan = named;
        nan[0].2[0] = f64::NAN;
        assert!(ScorerParams::from_tensors(*p.architecture(), nan).is_err());
    }
}
