//! Trainable parameters: fusion gate, projection head and classifier, plus
//! the batched forward/backward passes that chain them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fusion::{fuse_batch, fuse_batch_backward, FusionBatchCache, FusionConfig, FusionError, GateParams};
use crate::linalg::Mat;
use crate::scalar::Scalar;

/// Added to the embedding norm before dividing.
pub const NORM_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `out × in`.
    pub w: Mat<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Mat::zeros(output, input),
            b: vec![T::zero(); output],
        }
    }

    /// Uniform fan-in (He-style) weights, zero bias.
    pub fn he_uniform(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / input as f64).sqrt();
        let mut l = Self::zeros(input, output);
        for w in l.w.as_mut_slice() {
            *w = T::c(rng.random_range(-bound..bound));
        }
        l
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.rows()
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let inner = k * (x + T::c(0.044715) * x * x * x);
    T::c(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let a = T::c(0.044715);
    let t = (k * (x + a * x * x * x)).tanh();
    T::c(0.5) * (T::one() + t)
        + T::c(0.5) * x * (T::one() - t * t) * k * (T::one() + T::c(3.0) * a * x * x)
}

/// Three linear layers with GELU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: [Linear<T>; 3],
}

#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    /// Input to each layer.
    inputs: [Mat<T>; 3],
    /// Pre-activations of the two hidden layers.
    hidden_pre: [Mat<T>; 2],
}

impl<T: Scalar> Mlp<T> {
    pub fn new(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            layers: [
                Linear::he_uniform(input, hidden, rng),
                Linear::he_uniform(hidden, hidden, rng),
                Linear::he_uniform(hidden, output, rng),
            ],
        }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            layers: [
                Linear::zeros(input, hidden),
                Linear::zeros(hidden, hidden),
                Linear::zeros(hidden, output),
            ],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[2].output_dim()
    }

    pub fn forward(&self, x: &Mat<T>) -> (Mat<T>, MlpCache<T>) {
        let pre0 = x.linear(&self.layers[0].w, &self.layers[0].b);
        let h0 = pre0.map(gelu);
        let pre1 = h0.linear(&self.layers[1].w, &self.layers[1].b);
        let h1 = pre1.map(gelu);
        let out = h1.linear(&self.layers[2].w, &self.layers[2].b);
        (
            out,
            MlpCache {
                inputs: [x.clone(), h0, h1],
                hidden_pre: [pre0, pre1],
            },
        )
    }

    pub fn infer(&self, x: &Mat<T>) -> Mat<T> {
        self.forward(x).0
    }

    /// Accumulates parameter gradients into `grads`, returns the input gradient.
    pub fn backward(&self, cache: &MlpCache<T>, grad_out: &Mat<T>, grads: &mut Mlp<T>) -> Mat<T> {
        let mut g = grad_out.clone();
        for l in (0..3).rev() {
            let layer = &self.layers[l];
            let gl = &mut grads.layers[l];
            Mat::linear_backward_params(&g, &cache.inputs[l], &mut gl.w, &mut gl.b);
            let mut dx = Mat::linear_backward_input(&g, &layer.w);
            if l > 0 {
                let pre = &cache.hidden_pre[l - 1];
                for (d, &p) in dx.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    *d *= gelu_grad(p);
                }
            }
            g = dx;
        }
        g
    }
}

/// Rows scaled to unit norm with a small guard in the denominator.
pub fn normalize_rows<T: Scalar>(x: &Mat<T>) -> (Mat<T>, Vec<T>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let n = crate::scalar::l2_norm(x.row(r));
        let d = n + T::c(NORM_GUARD);
        for v in out.row_mut(r) {
            *v /= d;
        }
        norms.push(n);
    }
    (out, norms)
}

fn normalize_rows_backward<T: Scalar>(raw: &Mat<T>, norms: &[T], grad: &Mat<T>) -> Mat<T> {
    let mut out = Mat::zeros(raw.rows(), raw.cols());
    for r in 0..raw.rows() {
        let n = norms[r];
        let d = n + T::c(NORM_GUARD);
        let o = raw.row(r);
        let g = grad.row(r);
        let og = crate::scalar::dot(o, g);
        let radial = if n > T::zero() { og / (d * d * n) } else { T::zero() };
        for ((v, &gi), &oi) in out.row_mut(r).iter_mut().zip(g).zip(o) {
            *v = gi / d - oi * radial;
        }
    }
    out
}

/// Shapes of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: usize,
    pub embed: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub gate: GateParams<T>,
    pub projector: Mlp<T>,
    pub classifier: Mlp<T>,
}

/// One named parameter tensor.
pub struct TensorRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

pub struct TensorMut<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
}

impl<T: Scalar> ModelParams<T> {
    /// Seeded initialisation: zero gate, He-uniform perceptrons.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projector = Mlp::new(dims.input, dims.hidden, dims.embed, &mut rng);
        let classifier = Mlp::new(dims.input, dims.hidden, dims.classes, &mut rng);
        Self {
            gate: GateParams::zeros(dims.input),
            projector,
            classifier,
        }
    }

    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            gate: GateParams::zeros(dims.input),
            projector: Mlp::zeros(dims.input, dims.hidden, dims.embed),
            classifier: Mlp::zeros(dims.input, dims.hidden, dims.classes),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input: self.gate.dim(),
            hidden: self.projector.layers[0].output_dim(),
            embed: self.projector.output_dim(),
            classes: self.classifier.output_dim(),
        }
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut out = vec![
            TensorRef {
                name: "gate.w".into(),
                shape: vec![self.gate.w.rows(), self.gate.w.cols()],
                data: self.gate.w.as_slice(),
            },
            TensorRef {
                name: "gate.b".into(),
                shape: vec![self.gate.b.len()],
                data: &self.gate.b,
            },
        ];
        for (prefix, mlp) in [("projector", &self.projector), ("classifier", &self.classifier)] {
            for (i, l) in mlp.layers.iter().enumerate() {
                out.push(TensorRef {
                    name: format!("{prefix}.{i}.w"),
                    shape: vec![l.w.rows(), l.w.cols()],
                    data: l.w.as_slice(),
                });
                out.push(TensorRef {
                    name: format!("{prefix}.{i}.b"),
                    shape: vec![l.b.len()],
                    data: &l.b,
                });
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        let gate_shape = vec![self.gate.w.rows(), self.gate.w.cols()];
        let gate_b_len = self.gate.b.len();
        let mut out = vec![
            TensorMut {
                name: "gate.w".into(),
                shape: gate_shape,
                data: self.gate.w.as_mut_slice(),
            },
            TensorMut {
                name: "gate.b".into(),
                shape: vec![gate_b_len],
                data: &mut self.gate.b,
            },
        ];
        for (prefix, mlp) in [
            ("projector", &mut self.projector),
            ("classifier", &mut self.classifier),
        ] {
            for (i, l) in mlp.layers.iter_mut().enumerate() {
                let shape = vec![l.w.rows(), l.w.cols()];
                let blen = l.b.len();
                out.push(TensorMut {
                    name: format!("{prefix}.{i}.w"),
                    shape,
                    data: l.w.as_mut_slice(),
                });
                out.push(TensorMut {
                    name: format!("{prefix}.{i}.b"),
                    shape: vec![blen],
                    data: &mut l.b,
                });
            }
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(self.dims());
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, &s) in dst.data.iter_mut().zip(src.data) {
                *d = U::c(s.to_f64_lossy());
            }
        }
        out
    }
}

/// Feature triples for a batch, one row per record.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBatch<T> {
    pub f_s: Mat<T>,
    pub f_t: Mat<T>,
    pub f_st: Mat<T>,
}

impl<T: Scalar> ViewBatch<T> {
    pub fn rows(&self) -> usize {
        self.f_st.rows()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    fusion: FusionBatchCache<T>,
    projector: MlpCache<T>,
    classifier: MlpCache<T>,
    raw_embedding: Mat<T>,
    norms: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub fused: Mat<T>,
    /// Unit-norm projections of the fused features.
    pub embeddings: Mat<T>,
    pub logits: Mat<T>,
    pub cache: ForwardCache<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn forward(
        &self,
        batch: &ViewBatch<T>,
        fusion: &FusionConfig,
    ) -> Result<ForwardOutput<T>, FusionError> {
        if batch.f_st.cols() != self.gate.dim() {
            return Err(FusionError::Shape(format!(
                "model expects {} features, batch has {}",
                self.gate.dim(),
                batch.f_st.cols()
            )));
        }
        let (fused, fusion_cache) = fuse_batch(&batch.f_s, &batch.f_t, &batch.f_st, &self.gate, fusion)?;
        let (raw, projector) = self.projector.forward(&fused);
        let (embeddings, norms) = normalize_rows(&raw);
        let (logits, classifier) = self.classifier.forward(&fused);
        Ok(ForwardOutput {
            fused,
            embeddings,
            logits,
            cache: ForwardCache {
                fusion: fusion_cache,
                projector,
                classifier,
                raw_embedding: raw,
                norms,
            },
        })
    }

    /// Backward from embedding and logit gradients; accumulates into `grads`.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        grad_embeddings: Option<&Mat<T>>,
        grad_logits: Option<&Mat<T>>,
        grads: &mut ModelParams<T>,
    ) -> Result<(), FusionError> {
        let rows = cache.raw_embedding.rows();
        let mut grad_fused = Mat::zeros(rows, self.gate.dim());
        if let Some(ge) = grad_embeddings {
            let g_raw = normalize_rows_backward(&cache.raw_embedding, &cache.norms, ge);
            let gf = self.projector.backward(&cache.projector, &g_raw, &mut grads.projector);
            grad_fused.add_scaled(&gf, T::one());
        }
        if let Some(gl) = grad_logits {
            let gf = self.classifier.backward(&cache.classifier, gl, &mut grads.classifier);
            grad_fused.add_scaled(&gf, T::one());
        }
        let gate_grads = &mut grads.gate;
        fuse_batch_backward(
            &cache.fusion,
            &self.gate,
            &grad_fused,
            &mut gate_grads.w,
            &mut gate_grads.b,
        )
    }

    /// Unit-norm projection of an arbitrary `N × C` input, skipping fusion.
    pub fn project(&self, x: &Mat<T>) -> Mat<T> {
        normalize_rows(&self.projector.infer(x)).0
    }
}
