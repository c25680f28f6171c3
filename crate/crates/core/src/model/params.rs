//! Flat parameter storage with a named tensor directory.
//!
//! Every learnable tensor lives in one contiguous buffer; [`Layout`] records
//! where. Gradients and optimizer moments reuse the same layout.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::conditions::scalar_slots;
use super::{Condition, ModelConfig, ModelError, Real};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlots {
    pub attn_norm: Range<usize>,
    pub wq: Range<usize>,
    pub wk: Range<usize>,
    pub wv: Range<usize>,
    pub wo: Range<usize>,
    pub ffn_norm: Range<usize>,
    pub w_gate: Range<usize>,
    pub w_up: Range<usize>,
    pub w_down: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScalarCondSlots {
    pub condition: Condition,
    pub value_w: Range<usize>,
    pub value_b: Range<usize>,
    pub label: Range<usize>,
    pub nan: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormulaSlots {
    pub nan: Range<usize>,
    pub element: Range<usize>,
    pub stoich: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tok_emb: Range<usize>,
    pub layers: Vec<LayerSlots>,
    pub final_norm: Range<usize>,
    pub head: Range<usize>,
    pub scalars: Vec<ScalarCondSlots>,
    pub formula: Option<FormulaSlots>,
    pub entries: Vec<TensorEntry>,
    pub total: usize,
}

/// Which initializer a tensor gets.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Init {
    Ones,
    Zeros,
    Normal,
}

struct Builder {
    entries: Vec<(TensorEntry, Init)>,
    next: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> Range<usize> {
        let n: usize = shape.iter().product();
        let range = self.next..self.next + n;
        self.next += n;
        self.entries.push((TensorEntry { name, shape: shape.to_vec(), range: range.clone() }, init));
        range
    }
}

fn build(config: &ModelConfig) -> (Layout, Vec<Init>) {
    let d = config.d_emb;
    let f = config.d_ffn_hidden;
    let v = config.vocab_size;
    let mut b = Builder { entries: Vec::new(), next: 0 };
    let tok_emb = b.add("tok_emb".into(), &[v, d], Init::Normal);
    let layers = (0..config.n_layers)
        .map(|l| LayerSlots {
            attn_norm: b.add(format!("layers.{l}.attn_norm"), &[d], Init::Ones),
            wq: b.add(format!("layers.{l}.wq"), &[d, d], Init::Normal),
            wk: b.add(format!("layers.{l}.wk"), &[d, d], Init::Normal),
            wv: b.add(format!("layers.{l}.wv"), &[d, d], Init::Normal),
            wo: b.add(format!("layers.{l}.wo"), &[d, d], Init::Normal),
            ffn_norm: b.add(format!("layers.{l}.ffn_norm"), &[d], Init::Ones),
            w_gate: b.add(format!("layers.{l}.w_gate"), &[d, f], Init::Normal),
            w_up: b.add(format!("layers.{l}.w_up"), &[d, f], Init::Normal),
            w_down: b.add(format!("layers.{l}.w_down"), &[f, d], Init::Normal),
        })
        .collect();
    let final_norm = b.add("final_norm".into(), &[d], Init::Ones);
    let head = b.add("head".into(), &[d, v], Init::Normal);
    let scalars = scalar_slots(&config.condition_schema)
        .into_iter()
        .map(|c| ScalarCondSlots {
            condition: c,
            value_w: b.add(format!("cond.{c}.value_w"), &[d], Init::Normal),
            value_b: b.add(format!("cond.{c}.value_b"), &[d], Init::Zeros),
            label: b.add(format!("cond.{c}.label"), &[d], Init::Normal),
            nan: b.add(format!("cond.{c}.nan"), &[d], Init::Normal),
        })
        .collect();
    let formula = config.condition_schema.contains(&Condition::Formula).then(|| FormulaSlots {
        nan: b.add("cond.formula.nan".into(), &[d], Init::Normal),
        element: b.add("cond.formula.element".into(), &[config.num_elements, d], Init::Normal),
        stoich: b.add("cond.formula.stoich".into(), &[config.stoich_table_size, d], Init::Normal),
    });
    let total = b.next;
    let (entries, inits): (Vec<_>, Vec<_>) = b.entries.into_iter().unzip();
    (Layout { tok_emb, layers, final_norm, head, scalars, formula, entries, total }, inits)
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Self {
        build(config).0
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Exact number of learnable scalars.
pub fn count_params(config: &ModelConfig) -> usize {
    Layout::new(config).total
}

/// All learnable tensors of one model. Also used for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Real> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub data: Vec<T>,
}

impl<T: Real> ModelParams<T> {
    /// Truncated normal (±2σ) weights, unit norm gains, zero biases.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, inits) = build(config);
        let normal = Normal::new(0.0, config.init_std).expect("positive std");
        let mut data = vec![T::zero(); layout.total];
        for (e, init) in layout.entries.iter().zip(inits) {
            for x in &mut data[e.range.clone()] {
                *x = match init {
                    Init::Ones => T::one(),
                    Init::Zeros => T::zero(),
                    Init::Normal => loop {
                        let s: f64 = normal.sample(rng);
                        if s.abs() <= 2.0 * config.init_std {
                            break T::of(s);
                        }
                    },
                };
            }
        }
        Ok(Self { config: config.clone(), layout, data })
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self { config: self.config.clone(), layout: self.layout.clone(), data: vec![T::zero(); self.data.len()] }
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(config);
        let data = vec![T::zero(); layout.total];
        Ok(Self { config: config.clone(), layout, data })
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout.entry(name).map(|e| &self.data[e.range.clone()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let r = self.layout.entry(name)?.range.clone();
        Some(&mut self.data[r])
    }

    pub fn slice(&self, r: &Range<usize>) -> &[T] {
        &self.data[r.clone()]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt()
    }

    /// Converts to another scalar type.
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: self.data.iter().map(|x| U::of(x.f64())).collect(),
        }
    }
}
