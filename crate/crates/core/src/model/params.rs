use std::sync::Arc;

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError};
use crate::Real;

pub type TensorId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Embedding,
    Matrix,
    Bias,
    Gain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub kind: TensorKind,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnIds {
    pub wq: TensorId,
    pub bq: TensorId,
    pub wk: TensorId,
    pub bk: TensorId,
    pub wv: TensorId,
    pub bv: TensorId,
    pub wo: TensorId,
    pub bo: TensorId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormIds {
    pub gain: TensorId,
    pub bias: TensorId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FfnIds {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncLayerIds {
    pub attn: AttnIds,
    pub ln1: NormIds,
    pub ffn: FfnIds,
    pub ln2: NormIds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecLayerIds {
    pub self_attn: AttnIds,
    pub ln1: NormIds,
    pub cross_attn: AttnIds,
    pub ln2: NormIds,
    pub ffn: FfnIds,
    pub ln3: NormIds,
}

/// Names, shapes and flat offsets of every learned tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub specs: Vec<TensorSpec>,
    pub embed: TensorId,
    pub out_bias: TensorId,
    pub encoder: Vec<EncLayerIds>,
    pub decoder: Vec<DecLayerIds>,
    total: usize,
}

struct Builder {
    specs: Vec<TensorSpec>,
    total: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, kind: TensorKind) -> TensorId {
        let spec = TensorSpec {
            name,
            shape,
            offset: self.total,
            kind,
        };
        self.total += spec.numel();
        self.specs.push(spec);
        self.specs.len() - 1
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIds {
        let mut m = |n: &str| self.add(format!("{prefix}.{n}"), vec![d, d], TensorKind::Matrix);
        let (wq, wk, wv, wo) = (m("wq"), m("wk"), m("wv"), m("wo"));
        let mut b = |n: &str| self.add(format!("{prefix}.{n}"), vec![d], TensorKind::Bias);
        let (bq, bk, bv, bo) = (b("bq"), b("bk"), b("bv"), b("bo"));
        AttnIds {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIds {
        NormIds {
            gain: self.add(format!("{prefix}.gain"), vec![d], TensorKind::Gain),
            bias: self.add(format!("{prefix}.bias"), vec![d], TensorKind::Bias),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, ff: usize) -> FfnIds {
        FfnIds {
            w1: self.add(format!("{prefix}.w1"), vec![d, ff], TensorKind::Matrix),
            b1: self.add(format!("{prefix}.b1"), vec![ff], TensorKind::Bias),
            w2: self.add(format!("{prefix}.w2"), vec![ff, d], TensorKind::Matrix),
            b2: self.add(format!("{prefix}.b2"), vec![d], TensorKind::Bias),
        }
    }
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Layout {
        let (d, ff, v) = (config.d_model, config.d_ff, config.vocab_size);
        let mut b = Builder {
            specs: Vec::new(),
            total: 0,
        };
        let embed = b.add("embed".into(), vec![v, d], TensorKind::Embedding);
        let out_bias = b.add("out.bias".into(), vec![v], TensorKind::Bias);
        let encoder = (0..config.n_layers)
            .map(|l| {
                let p = format!("enc.{l}");
                EncLayerIds {
                    attn: b.attn(&format!("{p}.self"), d),
                    ln1: b.norm(&format!("{p}.ln1"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, ff),
                    ln2: b.norm(&format!("{p}.ln2"), d),
                }
            })
            .collect();
        let decoder = (0..config.n_layers)
            .map(|l| {
                let p = format!("dec.{l}");
                DecLayerIds {
                    self_attn: b.attn(&format!("{p}.self"), d),
                    ln1: b.norm(&format!("{p}.ln1"), d),
                    cross_attn: b.attn(&format!("{p}.cross"), d),
                    ln2: b.norm(&format!("{p}.ln2"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, ff),
                    ln3: b.norm(&format!("{p}.ln3"), d),
                }
            })
            .collect();
        Layout {
            specs: b.specs,
            embed,
            out_bias,
            encoder,
            decoder,
            total: b.total,
        }
    }

    pub fn num_params(&self) -> usize {
        self.total
    }

    pub fn find(&self, name: &str) -> Option<TensorId> {
        self.specs.iter().position(|s| s.name == name)
    }

    fn range(&self, id: TensorId) -> std::ops::Range<usize> {
        let s = &self.specs[id];
        s.offset..s.offset + s.numel()
    }

    fn dims2(&self, id: TensorId) -> (usize, usize) {
        let s = &self.specs[id].shape;
        debug_assert_eq!(s.len(), 2, "{} is not a matrix", self.specs[id].name);
        (s[0], s[1])
    }
}

/// Sinusoidal position table `[max_len, d_model]`.
pub fn positional_table<F: Real>(max_len: usize, d: usize) -> Array2<F> {
    Array2::from_shape_fn((max_len, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        F::of(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// All learned weights in one flat buffer, addressed through [`Layout`].
#[derive(Debug, Clone)]
pub struct Params<F> {
    pub config: ModelConfig,
    pub layout: Arc<Layout>,
    pub values: Vec<F>,
    /// Non-learned position table. Excluded from optimization, perturbation
    /// and checkpoints.
    pub positions: Array2<F>,
    generation: u64,
}

impl<F: Real> Params<F> {
    /// Fan-based uniform init for matrices, zero biases, unit gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![F::zero(); layout.num_params()];
        for spec in &layout.specs {
            let slot = &mut values[spec.offset..spec.offset + spec.numel()];
            match spec.kind {
                TensorKind::Matrix | TensorKind::Embedding => {
                    let (fan_a, fan_b) = (spec.shape[0] as f64, spec.shape[1] as f64);
                    let limit = (6.0 / (fan_a + fan_b)).sqrt();
                    for v in slot.iter_mut() {
                        *v = F::of(rng.random_range(-limit..limit));
                    }
                }
                TensorKind::Bias => {}
                TensorKind::Gain => slot.fill(F::one()),
            }
        }
        Ok(Self::from_values(config.clone(), values))
    }

    pub fn from_values(config: ModelConfig, values: Vec<F>) -> Self {
        let layout = Arc::new(Layout::new(&config));
        assert_eq!(values.len(), layout.num_params());
        let positions = positional_table(config.max_len, config.d_model);
        Params {
            config,
            layout,
            values,
            positions,
            generation: 0,
        }
    }

    pub fn num_params(&self) -> usize {
        self.values.len()
    }

    /// Bumped on every in-place update so stale activation caches are caught.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        self.generation += 1;
        &mut self.values
    }

    pub fn tensor(&self, id: TensorId) -> &[F] {
        &self.values[self.layout.range(id)]
    }

    pub fn named(&self, name: &str) -> Option<&[F]> {
        self.layout.find(name).map(|id| self.tensor(id))
    }

    pub fn mat(&self, id: TensorId) -> ArrayView2<'_, F> {
        let dims = self.layout.dims2(id);
        ArrayView2::from_shape(dims, self.tensor(id)).expect("layout shape")
    }

    pub fn vec(&self, id: TensorId) -> ArrayView1<'_, F> {
        ArrayView1::from(self.tensor(id))
    }

    pub fn cast<G: Real>(&self) -> Params<G> {
        let values = self.values.iter().map(|v| G::of(v.as_f64())).collect();
        Params::from_values(self.config.clone(), values)
    }

    /// Adds `mean(θ) · n_i` with `n_i ~ N(0, σ²)` to every learned scalar.
    pub fn perturb(&self, sigma: f64, seed: u64) -> Result<Params<F>, ModelError> {
        if sigma < 0.0 || sigma.is_nan() {
            return Err(ModelError::NegativeSigma(sigma));
        }
        let mut out = self.clone();
        if sigma == 0.0 {
            return Ok(out);
        }
        let mean = self.values.iter().map(|v| v.as_f64()).sum::<f64>() / self.values.len() as f64;
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in out.values_mut() {
            *v = F::of(v.as_f64() + mean * normal.sample(&mut rng));
        }
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Gradient buffer with the same layout as [`Params`].
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub layout: Arc<Layout>,
    pub values: Vec<F>,
}

impl<F: Real> Gradients<F> {
    pub fn zeros_like(params: &Params<F>) -> Self {
        Gradients {
            layout: params.layout.clone(),
            values: vec![F::zero(); params.values.len()],
        }
    }

    pub fn zero(&mut self) {
        self.values.fill(F::zero());
    }

    pub fn tensor(&self, id: TensorId) -> &[F] {
        &self.values[self.layout.range(id)]
    }

    pub fn named(&self, name: &str) -> Option<&[F]> {
        self.layout.find(name).map(|id| self.tensor(id))
    }

    pub fn mat_mut(&mut self, id: TensorId) -> ArrayViewMut2<'_, F> {
        let dims = self.layout.dims2(id);
        let r = self.layout.range(id);
        ArrayViewMut2::from_shape(dims, &mut self.values[r]).expect("layout shape")
    }

    pub fn vec_mut(&mut self, id: TensorId) -> ArrayViewMut1<'_, F> {
        let r = self.layout.range(id);
        ArrayViewMut1::from(&mut self.values[r])
    }

    fn split_two(&mut self, a: TensorId, b: TensorId) -> (&mut [F], &mut [F]) {
        let (ra, rb) = (self.layout.range(a), self.layout.range(b));
        assert!(ra.end <= rb.start, "tensors must be ordered and disjoint");
        let (head, tail) = self.values.split_at_mut(rb.start);
        (&mut head[ra], &mut tail[..rb.len()])
    }

    /// Disjoint views of a weight matrix and its bias.
    pub fn mat_vec_mut(
        &mut self,
        w: TensorId,
        b: TensorId,
    ) -> (ArrayViewMut2<'_, F>, ArrayViewMut1<'_, F>) {
        let dims = self.layout.dims2(w);
        let (ws, bs) = self.split_two(w, b);
        (
            ArrayViewMut2::from_shape(dims, ws).expect("layout shape"),
            ArrayViewMut1::from(bs),
        )
    }

    pub fn vec_pair_mut(
        &mut self,
        a: TensorId,
        b: TensorId,
    ) -> (ArrayViewMut1<'_, F>, ArrayViewMut1<'_, F>) {
        let (x, y) = self.split_two(a, b);
        (ArrayViewMut1::from(x), ArrayViewMut1::from(y))
    }

    pub fn add_scaled(&mut self, other: &Gradients<F>, scale: F) {
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn iter_named(&self) -> impl Iterator<Item = (&str, &[F])> {
        self.layout
            .specs
            .iter()
            .map(move |s| (s.name.as_str(), &self.values[s.offset..s.offset + s.numel()]))
    }
}
