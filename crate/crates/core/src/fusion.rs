//! Residual attention fusion of the spatial, temporal and spatiotemporal
//! views, with an exact backward pass.
//!
//! ```text
//! res  = (f_s + f_t) - 2 f_st
//! attn = softmax(f_st / (tau * (sum(f_st) + eps)))
//! gate = sigmoid(W f_st + b)
//! out  = f_st + gate * res * attn
//! ```

use std::hash::Hasher;

use rand::Rng;

use crate::linalg::Mat;
use crate::scalar::{softmax_into, Scalar};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FusionError {
    #[error("feature length mismatch: {0}")]
    Shape(String),
    #[error("fusion cache does not match the gate parameters it is used with")]
    StaleCache,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub tau_attn: f64,
    pub epsilon: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            tau_attn: 1.0,
            epsilon: 1e-6,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tau_attn > 0.0 && self.tau_attn.is_finite()) {
            return Err(format!("fusion.tau_attn must be positive, got {}", self.tau_attn));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(format!("fusion.epsilon must be positive, got {}", self.epsilon));
        }
        Ok(())
    }
}

/// Self-gate: a `C × C` fully connected layer followed by a sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams<T> {
    pub w: Mat<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> GateParams<T> {
    /// Zero weights, so every gate starts at 0.5.
    pub fn zeros(dim: usize) -> Self {
        Self {
            w: Mat::zeros(dim, dim),
            b: vec![T::zero(); dim],
        }
    }

    pub fn random(dim: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut g = Self::zeros(dim);
        for x in g.w.as_mut_slice().iter_mut().chain(g.b.iter_mut()) {
            *x = T::c(rng.random_range(-scale..scale));
        }
        g
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for x in self.w.as_slice().iter().chain(&self.b) {
            h.write_u64(x.to_f64_lossy().to_bits());
        }
        h.finish()
    }
}

pub fn residual<T: Scalar>(f_s: &[T], f_t: &[T], f_st: &[T]) -> Result<Vec<T>, FusionError> {
    check_lengths(f_s, f_t, f_st)?;
    Ok(f_s
        .iter()
        .zip(f_t)
        .zip(f_st)
        .map(|((&s, &t), &st)| (s + t) - T::c(2.0) * st)
        .collect())
}

/// Sign-preserving `sum + eps`; a zero sum counts as positive.
fn attention_denominator<T: Scalar>(f_st: &[T], eps: T) -> T {
    let sum: T = f_st.iter().copied().sum();
    if sum >= T::zero() {
        sum + eps
    } else {
        sum - eps
    }
}

pub fn channel_attention<T: Scalar>(f_st: &[T], cfg: &FusionConfig) -> Vec<T> {
    let den = attention_denominator(f_st, T::c(cfg.epsilon));
    let mut out = vec![T::zero(); f_st.len()];
    softmax_into(f_st, T::c(cfg.tau_attn) * den, &mut out);
    out
}

/// Intermediates of one forward call, consumed by [`fuse_backward`].
#[derive(Debug, Clone)]
pub struct FusionCache<T> {
    f_st: Vec<T>,
    res: Vec<T>,
    attn: Vec<T>,
    gate: Vec<T>,
    den: T,
    tau: T,
    gate_fingerprint: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionGrads<T> {
    pub f_s: Vec<T>,
    pub f_t: Vec<T>,
    pub f_st: Vec<T>,
    pub w: Mat<T>,
    pub b: Vec<T>,
}

fn check_lengths<T>(f_s: &[T], f_t: &[T], f_st: &[T]) -> Result<(), FusionError> {
    if f_s.len() != f_st.len() || f_t.len() != f_st.len() {
        return Err(FusionError::Shape(format!(
            "f_s={}, f_t={}, f_st={}",
            f_s.len(),
            f_t.len(),
            f_st.len()
        )));
    }
    Ok(())
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn fuse_row<T: Scalar>(
    f_s: &[T],
    f_t: &[T],
    f_st: &[T],
    gate_pre: &[T],
    cfg: &FusionConfig,
    fingerprint: u64,
    out: &mut [T],
) -> FusionCache<T> {
    let res: Vec<T> = f_s
        .iter()
        .zip(f_t)
        .zip(f_st)
        .map(|((&s, &t), &st)| (s + t) - T::c(2.0) * st)
        .collect();
    let den = attention_denominator(f_st, T::c(cfg.epsilon));
    let tau = T::c(cfg.tau_attn);
    let mut attn = vec![T::zero(); f_st.len()];
    softmax_into(f_st, tau * den, &mut attn);
    let gate: Vec<T> = gate_pre.iter().map(|&u| sigmoid(u)).collect();
    for c in 0..f_st.len() {
        out[c] = f_st[c] + gate[c] * res[c] * attn[c];
    }
    FusionCache {
        f_st: f_st.to_vec(),
        res,
        attn,
        gate,
        den,
        tau,
        gate_fingerprint: fingerprint,
    }
}

pub fn fuse<T: Scalar>(
    f_s: &[T],
    f_t: &[T],
    f_st: &[T],
    gate: &GateParams<T>,
    cfg: &FusionConfig,
) -> Result<(Vec<T>, FusionCache<T>), FusionError> {
    check_lengths(f_s, f_t, f_st)?;
    if gate.dim() != f_st.len() || gate.w.cols() != f_st.len() {
        return Err(FusionError::Shape(format!(
            "gate is {}x{}, features have length {}",
            gate.w.rows(),
            gate.w.cols(),
            f_st.len()
        )));
    }
    let pre: Vec<T> = (0..gate.dim())
        .map(|k| crate::scalar::dot(gate.w.row(k), f_st) + gate.b[k])
        .collect();
    let mut out = vec![T::zero(); f_st.len()];
    let cache = fuse_row(f_s, f_t, f_st, &pre, cfg, gate.fingerprint(), &mut out);
    Ok((out, cache))
}

/// Per-channel upstream gradients split into the gate pre-activation, the
/// residual and the attention input paths.
struct RowGrads<T> {
    gate_pre: Vec<T>,
    res: Vec<T>,
    f_st_direct: Vec<T>,
}

fn row_backward<T: Scalar>(cache: &FusionCache<T>, up: &[T]) -> RowGrads<T> {
    let n = up.len();
    let mut gate_pre = vec![T::zero(); n];
    let mut res = vec![T::zero(); n];
    let mut d_attn = vec![T::zero(); n];
    for c in 0..n {
        let g = cache.gate[c];
        gate_pre[c] = up[c] * cache.res[c] * cache.attn[c] * g * (T::one() - g);
        res[c] = up[c] * g * cache.attn[c];
        d_attn[c] = up[c] * g * cache.res[c];
    }
    // softmax over x = f_st / (tau * den); den depends on sum(f_st) with unit slope
    let dot: T = cache.attn.iter().zip(&d_attn).map(|(&a, &g)| a * g).sum();
    let d_x: Vec<T> = cache
        .attn
        .iter()
        .zip(&d_attn)
        .map(|(&a, &g)| a * (g - dot))
        .collect();
    let scale = cache.tau * cache.den;
    let coupling: T = d_x
        .iter()
        .zip(&cache.f_st)
        .map(|(&dx, &f)| dx * f)
        .sum::<T>()
        / (scale * cache.den);
    let f_st_direct = (0..n)
        .map(|c| up[c] + d_x[c] / scale - coupling - T::c(2.0) * res[c])
        .collect();
    RowGrads {
        gate_pre,
        res,
        f_st_direct,
    }
}

pub fn fuse_backward<T: Scalar>(
    cache: &FusionCache<T>,
    gate: &GateParams<T>,
    upstream: &[T],
) -> Result<FusionGrads<T>, FusionError> {
    if upstream.len() != cache.f_st.len() || gate.dim() != cache.f_st.len() {
        return Err(FusionError::Shape(format!(
            "upstream gradient has length {}, cache has {}",
            upstream.len(),
            cache.f_st.len()
        )));
    }
    if gate.fingerprint() != cache.gate_fingerprint {
        return Err(FusionError::StaleCache);
    }
    let rg = row_backward(cache, upstream);
    let n = upstream.len();
    let mut w = Mat::zeros(n, n);
    for k in 0..n {
        for (j, wv) in w.row_mut(k).iter_mut().enumerate() {
            *wv = rg.gate_pre[k] * cache.f_st[j];
        }
    }
    let mut f_st = rg.f_st_direct;
    for k in 0..n {
        for (j, v) in f_st.iter_mut().enumerate() {
            *v += gate.w.get(k, j) * rg.gate_pre[k];
        }
    }
    Ok(FusionGrads {
        f_s: rg.res.clone(),
        f_t: rg.res,
        f_st,
        w,
        b: rg.gate_pre,
    })
}

/// Batched forward over rows of `N × C` matrices.
#[derive(Debug, Clone)]
pub struct FusionBatchCache<T> {
    rows: Vec<FusionCache<T>>,
    f_st: Mat<T>,
}

pub fn fuse_batch<T: Scalar>(
    f_s: &Mat<T>,
    f_t: &Mat<T>,
    f_st: &Mat<T>,
    gate: &GateParams<T>,
    cfg: &FusionConfig,
) -> Result<(Mat<T>, FusionBatchCache<T>), FusionError> {
    let shape = (f_st.rows(), f_st.cols());
    if (f_s.rows(), f_s.cols()) != shape
        || (f_t.rows(), f_t.cols()) != shape
        || gate.dim() != shape.1
    {
        return Err(FusionError::Shape("batch shapes disagree".into()));
    }
    let pre = f_st.linear(&gate.w, &gate.b);
    let fp = gate.fingerprint();
    let mut out = Mat::zeros(shape.0, shape.1);
    let mut rows = Vec::with_capacity(shape.0);
    for r in 0..shape.0 {
        rows.push(fuse_row(
            f_s.row(r),
            f_t.row(r),
            f_st.row(r),
            pre.row(r),
            cfg,
            fp,
            out.row_mut(r),
        ));
    }
    Ok((
        out,
        FusionBatchCache {
            rows,
            f_st: f_st.clone(),
        },
    ))
}

/// Accumulates gate gradients for a batch; input-feature gradients are not
/// needed in training because stored features are constants.
pub fn fuse_batch_backward<T: Scalar>(
    cache: &FusionBatchCache<T>,
    gate: &GateParams<T>,
    upstream: &Mat<T>,
    grad_w: &mut Mat<T>,
    grad_b: &mut [T],
) -> Result<(), FusionError> {
    if upstream.rows() != cache.rows.len() || upstream.cols() != gate.dim() {
        return Err(FusionError::Shape("upstream gradient shape".into()));
    }
    if cache.rows.first().is_some_and(|c| c.gate_fingerprint != gate.fingerprint()) {
        return Err(FusionError::StaleCache);
    }
    let mut d_pre = Mat::zeros(upstream.rows(), upstream.cols());
    for (r, rc) in cache.rows.iter().enumerate() {
        let rg = row_backward(rc, upstream.row(r));
        d_pre.row_mut(r).copy_from_slice(&rg.gate_pre);
    }
    Mat::linear_backward_params(&d_pre, &cache.f_st, grad_w, grad_b);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn residual_examples() {
        let v = [0.3_f64, -1.0, 2.0];
        assert_eq!(residual(&v, &v, &v).unwrap(), vec![0.0; 3]);
        assert_eq!(
            residual(&[1.0, 0.0], &[0.0, 1.0], &[0.5, 0.5]).unwrap(),
            vec![0.0, 0.0]
        );
        assert_eq!(
            residual(&[1.0_f32, 2.0], &[3.0, 4.0], &[1.0, 1.0]).unwrap(),
            vec![2.0, 4.0]
        );
        assert!(residual(&[1.0], &[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn attention_examples() {
        let cfg = FusionConfig::default();
        assert_eq!(channel_attention(&[1.0_f64, 1.0], &cfg), vec![0.5, 0.5]);
        for v in channel_attention(&[-3.0_f64; 5], &cfg) {
            assert!((v - 0.2).abs() < 1e-15);
        }
        let a = channel_attention(&[2.0_f64, 0.0], &cfg);
        let e = std::f64::consts::E;
        assert!((a[0] - e / (e + 1.0)).abs() < 1e-6);
        assert!((a[0] - 0.7311).abs() < 1e-4 && (a[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn attention_handles_zero_and_negative_sums() {
        let cfg = FusionConfig::default();
        let a = channel_attention(&[1.0_f32, -1.0, 0.5, -0.5], &cfg);
        assert!(a.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!((a.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        let a = channel_attention(&[-2.0_f64, -1.0], &cfg);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // den = -3 - eps, so the smaller raw value gets the larger weight
        assert!(a[0] > a[1]);
    }

    #[test]
    fn worked_fusion_case() {
        let gate = GateParams::<f64>::zeros(2);
        let (out, _) = fuse(
            &[1.0, 2.0],
            &[3.0, 4.0],
            &[1.0, 1.0],
            &gate,
            &FusionConfig::default(),
        )
        .unwrap();
        assert!((out[0] - 1.5).abs() < 1e-12);
        assert!((out[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_residual_is_identity_for_any_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gate = GateParams::<f32>::random(3, 2.0, &mut rng);
        let f_s = [0.25_f32, 1.0, -2.0];
        let f_t = [0.75_f32, 0.0, 1.0];
        let f_st = [0.5_f32, 0.5, -0.5];
        let (out, cache) = fuse(&f_s, &f_t, &f_st, &gate, &FusionConfig::default()).unwrap();
        assert_eq!(out, f_st.to_vec());
        let g = fuse_backward(&cache, &gate, &[1.0, -2.0, 0.5]).unwrap();
        assert!(g.w.as_slice().iter().all(|&x| x == 0.0));
        assert!(g.b.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let gate = GateParams::<f64>::zeros(2);
        let (_, cache) = fuse(
            &[1.0, 2.0],
            &[3.0, 4.0],
            &[1.0, 1.0],
            &gate,
            &FusionConfig::default(),
        )
        .unwrap();
        let g = fuse_backward(&cache, &gate, &[0.0, 0.0]).unwrap();
        assert!(g
            .f_s
            .iter()
            .chain(&g.f_t)
            .chain(&g.f_st)
            .chain(g.w.as_slice())
            .chain(&g.b)
            .all(|&x| x == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut gate = GateParams::<f64>::zeros(2);
        let (_, cache) = fuse(
            &[1.0, 2.0],
            &[3.0, 4.0],
            &[1.0, 1.0],
            &gate,
            &FusionConfig::default(),
        )
        .unwrap();
        gate.b[0] = 0.1;
        assert_eq!(
            fuse_backward(&cache, &gate, &[1.0, 1.0]).unwrap_err(),
            FusionError::StaleCache
        );
        assert!(matches!(
            fuse_backward(&cache, &gate, &[1.0]),
            Err(FusionError::Shape(_))
        ));
    }

    #[test]
    fn batch_matches_single_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gate = GateParams::<f64>::random(4, 0.5, &mut rng);
        let cfg = FusionConfig::default();
        let rows = |rng: &mut ChaCha8Rng| {
            Mat::from_vec(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect())
        };
        let (fs, ft, fst) = (rows(&mut rng), rows(&mut rng), rows(&mut rng));
        let (out, bcache) = fuse_batch(&fs, &ft, &fst, &gate, &cfg).unwrap();
        let up = rows(&mut rng);
        let mut gw = Mat::zeros(4, 4);
        let mut gb = vec![0.0; 4];
        fuse_batch_backward(&bcache, &gate, &up, &mut gw, &mut gb).unwrap();

        let mut sw = Mat::zeros(4, 4);
        let mut sb = vec![0.0; 4];
        for r in 0..3 {
            let (o, c) = fuse(fs.row(r), ft.row(r), fst.row(r), &gate, &cfg).unwrap();
            for (a, b) in o.iter().zip(out.row(r)) {
                assert!((a - b).abs() < 1e-14);
            }
            let g = fuse_backward(&c, &gate, up.row(r)).unwrap();
            sw.add_scaled(&g.w, 1.0);
            for (s, v) in sb.iter_mut().zip(&g.b) {
                *s += v;
            }
        }
        for (a, b) in gw.as_slice().iter().zip(sw.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in gb.iter().zip(&sb) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
