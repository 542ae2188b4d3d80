//! Dense ReLU networks with closed-form backpropagation.

use std::fmt::Debug;

use num_traits::Float;
use rand::Rng;

/// Floating-point type the networks are generic over (`f32` for training,
/// `f64` for gradient checks).
pub trait Real: Float + Default + Debug + Send + Sync + 'static + std::iter::Sum {
    /// `c = alpha * a * b + beta * c` over strided row/column layouts.
    ///
    /// # Safety
    /// All strided accesses implied by `m, k, n` must be in bounds.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self {
        Self::from(x).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("representable")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major `c (m×n) = op(a) (m×k) · op(b) (k×n) + beta·c`, where `op`
/// optionally transposes a row-major operand.
#[allow(clippy::too_many_arguments)]
pub fn matmul<R: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[R],
    a_t: bool,
    b: &[R],
    b_t: bool,
    beta: R,
    c: &mut [R],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the length assertions above cover every index touched.
    unsafe {
        R::gemm_raw(m, k, n, R::one(), a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1)
    }
}

/// Fully connected network: ReLU after every layer except the last.
///
/// Parameters live in one flat vector, layer by layer, each layer storing
/// its `in × out` row-major weight followed by its `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<R> {
    sizes: Vec<usize>,
    pub params: Vec<R>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache<R> {
    batch: usize,
    /// `acts[0]` is the input, `acts[l]` the post-ReLU output of layer `l-1`.
    acts: Vec<Vec<R>>,
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl<R: Real> Mlp<R> {
    /// Uniform `±1/sqrt(fan_in)` initialization of weights and biases.
    pub fn new<G: Rng + ?Sized>(sizes: &[usize], rng: &mut G) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|s| *s > 0), "invalid layer sizes {sizes:?}");
        let mut params = Vec::with_capacity(param_count(sizes));
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[0] * w[1] + w[1] {
                params.push(R::of(rng.random_range(-bound..bound)));
            }
        }
        Self { sizes: sizes.to_vec(), params }
    }

    pub fn from_params(sizes: &[usize], params: Vec<R>) -> Option<Self> {
        (sizes.len() >= 2 && param_count(sizes) == params.len()).then(|| Self { sizes: sizes.to_vec(), params })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_in(&self) -> usize {
        self.sizes[0]
    }

    pub fn n_out(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut off = 0;
        self.sizes.windows(2).map(move |w| {
            let o = off;
            off += w[0] * w[1] + w[1];
            (o, w[0], w[1])
        })
    }

    fn affine(&self, off: usize, n_in: usize, n_out: usize, x: &[R], batch: usize) -> Vec<R> {
        let w = &self.params[off..off + n_in * n_out];
        let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
        let mut y: Vec<R> = (0..batch).flat_map(|_| b.iter().copied()).collect();
        matmul(batch, n_in, n_out, x, false, w, false, R::one(), &mut y);
        y
    }

    pub fn forward(&self, x: &[R], batch: usize) -> Vec<R> {
        self.forward_cached(x, batch).0
    }

    pub fn forward_cached(&self, x: &[R], batch: usize) -> (Vec<R>, MlpCache<R>) {
        assert_eq!(x.len(), batch * self.n_in());
        let n_layers = self.sizes.len() - 1;
        let mut acts = vec![x.to_vec()];
        let mut out = Vec::new();
        for (l, (off, n_in, n_out)) in self.layers().enumerate() {
            let mut y = self.affine(off, n_in, n_out, acts.last().unwrap(), batch);
            if l + 1 < n_layers {
                y.iter_mut().for_each(|v| *v = v.max(R::zero()));
                acts.push(y);
            } else {
                out = y;
            }
        }
        (out, MlpCache { batch, acts })
    }

    /// Backpropagates `d_out` (batch × n_out). Parameter gradients are added
    /// into `grad` when given; the input gradient is returned when requested.
    pub fn backward(&self, cache: &MlpCache<R>, d_out: &[R], mut grad: Option<&mut [R]>, want_dx: bool) -> Option<Vec<R>> {
        let batch = cache.batch;
        assert_eq!(d_out.len(), batch * self.n_out());
        if let Some(g) = grad.as_deref() {
            assert_eq!(g.len(), self.params.len());
        }
        let layers: Vec<_> = self.layers().collect();
        let mut dy = d_out.to_vec();
        for (l, &(off, n_in, n_out)) in layers.iter().enumerate().rev() {
            let x = &cache.acts[l];
            if let Some(g) = grad.as_deref_mut() {
                let (gw, gb) = g[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                matmul(n_in, batch, n_out, x, true, &dy, false, R::one(), gw);
                for row in dy.chunks_exact(n_out) {
                    for (b, d) in gb.iter_mut().zip(row) {
                        *b = *b + *d;
                    }
                }
            }
            if l == 0 && !want_dx {
                return None;
            }
            let w = &self.params[off..off + n_in * n_out];
            let mut dx = vec![R::zero(); batch * n_in];
            matmul(batch, n_out, n_in, &dy, false, w, true, R::zero(), &mut dx);
            if l == 0 {
                return Some(dx);
            }
            for (d, a) in dx.iter_mut().zip(x) {
                if *a <= R::zero() {
                    *d = R::zero();
                }
            }
            dy = dx;
        }
        unreachable!("network has at least one layer")
    }

    /// `self = (1 - tau) * self + tau * online`.
    pub fn polyak_from(&mut self, online: &Mlp<R>, tau: R) {
        assert_eq!(self.sizes, online.sizes);
        let keep = R::one() - tau;
        for (t, o) in self.params.iter_mut().zip(&online.params) {
            *t = keep * *t + tau * *o;
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<R> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<R>,
    v: Vec<R>,
    t: i32,
}

impl<R: Real> Adam<R> {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![R::zero(); n], v: vec![R::zero(); n], t: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [R], grad: &[R]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let (b1, b2) = (R::of(self.beta1), R::of(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = R::of(self.lr * c2.sqrt() / c1);
        let eps = R::of(self.eps * c2.sqrt());
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (R::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (R::one() - b2) * g * g;
            params[i] = params[i] - step * self.m[i] / (self.v[i].sqrt() + eps);
        }
    }
}
