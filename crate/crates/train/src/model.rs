//! Tiny per-pixel network: 3×3 window linear layer, tanh, 1×1 linear layer
//! giving raw features `Z`; `V` is `Z` with L1-normalized columns and the
//! logits are `L = W_c V + b_c`.
//!
//! Parameter layout in the flat vector: `W1 [hidden, 27]`, `b1`, `W2 [dim, hidden]`,
//! `b2`, `Wc [classes, dim]`, `bc`.

use derprop_core::tensor::DEGENERATE_NORM;
use derprop_core::theory::trial_rng;
use derprop_core::Tensor;
use rand_distr::{Distribution, Normal};

use crate::error::{TrainError, TrainResult};

const IN_CH: usize = 3;
const WINDOW: usize = 9;
const PATCH: usize = IN_CH * WINDOW;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub hidden: usize,
    pub dim: usize,
    pub classes: usize,
}

impl Shape {
    fn offsets(&self) -> [usize; 7] {
        let mut o = [0; 7];
        let sizes = [
            self.hidden * PATCH,
            self.hidden,
            self.dim * self.hidden,
            self.dim,
            self.classes * self.dim,
            self.classes,
        ];
        for (i, s) in sizes.iter().enumerate() {
            o[i + 1] = o[i] + s;
        }
        o
    }

    pub fn param_count(&self) -> usize {
        self.offsets()[6]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub shape: Shape,
    pub params: Vec<f64>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pixels: usize,
    patches: Vec<f64>,
    hidden: Vec<f64>,
    raw: Vec<f64>,
    norms: Vec<f64>,
    /// `[dim, M]`, L1-normalized columns.
    pub features: Tensor,
    /// `[classes, M]`.
    pub logits: Tensor,
}

/// `out[a×m] = w[a×b] · x[b×m]`
fn gemm(w: &[f64], x: &[f64], a: usize, b: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; a * m];
    for i in 0..a {
        let row = &mut out[i * m..(i + 1) * m];
        for k in 0..b {
            let wk = w[i * b + k];
            if wk == 0.0 {
                continue;
            }
            for (o, &xv) in row.iter_mut().zip(&x[k * m..(k + 1) * m]) {
                *o += wk * xv;
            }
        }
    }
    out
}

/// `out[a×b] += g[a×m] · x[b×m]ᵀ`
fn gemm_nt_acc(out: &mut [f64], g: &[f64], x: &[f64], a: usize, b: usize, m: usize) {
    for i in 0..a {
        let gi = &g[i * m..(i + 1) * m];
        for k in 0..b {
            out[i * b + k] += gi.iter().zip(&x[k * m..(k + 1) * m]).map(|(p, q)| p * q).sum::<f64>();
        }
    }
}

/// `out[b×m] = w[a×b]ᵀ · g[a×m]`
fn gemm_tn(w: &[f64], g: &[f64], a: usize, b: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * m];
    for i in 0..a {
        let gi = &g[i * m..(i + 1) * m];
        for k in 0..b {
            let wk = w[i * b + k];
            for (o, &gv) in out[k * m..(k + 1) * m].iter_mut().zip(gi) {
                *o += wk * gv;
            }
        }
    }
    out
}

/// Zero-padded 3×3 neighbourhoods as a `[27, M]` matrix; row `ch·9 + (dy+1)·3 + (dx+1)`.
fn im2col(image: &Tensor) -> Vec<f64> {
    let (h, w) = (image.dims()[1], image.dims()[2]);
    let m = h * w;
    let src = image.data();
    let mut out = vec![0.0; PATCH * m];
    for ch in 0..IN_CH {
        for dy in 0..3 {
            for dx in 0..3 {
                let row = ch * WINDOW + dy * 3 + dx;
                for r in 0..h {
                    let sr = r as isize + dy as isize - 1;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    for c in 0..w {
                        let sc = c as isize + dx as isize - 1;
                        if sc < 0 || sc >= w as isize {
                            continue;
                        }
                        out[row * m + r * w + c] = src[(ch * h + sr as usize) * w + sc as usize];
                    }
                }
            }
        }
    }
    out
}

impl ToyModel {
    /// Gaussian init scaled by fan-in, seeded.
    pub fn init(shape: Shape, seed: u64) -> Self {
        let mut rng = trial_rng(seed, 0);
        let o = shape.offsets();
        let mut params = vec![0.0; shape.param_count()];
        let fans = [(0, PATCH), (2, shape.hidden), (4, shape.dim)];
        for (block, fan_in) in fans {
            let scale = if block == 4 { 1.0 } else { 1.0 / (fan_in as f64).sqrt() };
            let dist = Normal::new(0.0, scale).expect("positive scale");
            for p in &mut params[o[block]..o[block + 1]] {
                *p = dist.sample(&mut rng);
            }
        }
        Self { shape, params }
    }

    pub fn with_params(shape: Shape, params: Vec<f64>) -> TrainResult<Self> {
        if params.len() != shape.param_count() {
            return Err(TrainError::Config(format!(
                "parameter vector has {} entries, model needs {}",
                params.len(),
                shape.param_count()
            )));
        }
        Ok(Self { shape, params })
    }

    pub fn forward(&self, image: &Tensor) -> TrainResult<ForwardPass> {
        let dims = image.dims();
        if dims.len() != 3 || dims[0] != IN_CH {
            return Err(TrainError::Config(format!("expected a [3, H, W] image, got {dims:?}")));
        }
        let m = dims[1] * dims[2];
        let Shape { hidden, dim, classes } = self.shape;
        let o = self.shape.offsets();
        let p = &self.params;
        let patches = im2col(image);
        let mut h = gemm(&p[o[0]..o[1]], &patches, hidden, PATCH, m);
        for i in 0..hidden {
            let b = p[o[1] + i];
            for x in &mut h[i * m..(i + 1) * m] {
                *x = (*x + b).tanh();
            }
        }
        let mut z = gemm(&p[o[2]..o[3]], &h, dim, hidden, m);
        for i in 0..dim {
            let b = p[o[3] + i];
            z[i * m..(i + 1) * m].iter_mut().for_each(|x| *x += b);
        }
        let mut norms = vec![0.0; m];
        for i in 0..dim {
            for (n, x) in norms.iter_mut().zip(&z[i * m..(i + 1) * m]) {
                *n += x.abs();
            }
        }
        let mut v = vec![0.0; dim * m];
        for i in 0..dim {
            for j in 0..m {
                v[i * m + j] = if norms[j] < DEGENERATE_NORM {
                    1.0 / dim as f64
                } else {
                    z[i * m + j] / norms[j]
                };
            }
        }
        let mut l = gemm(&p[o[4]..o[5]], &v, classes, dim, m);
        for i in 0..classes {
            let b = p[o[5] + i];
            l[i * m..(i + 1) * m].iter_mut().for_each(|x| *x += b);
        }
        Ok(ForwardPass {
            pixels: m,
            patches,
            hidden: h,
            raw: z,
            norms,
            features: Tensor::matrix(dim, m, v)?,
            logits: Tensor::matrix(classes, m, l)?,
        })
    }

    /// Parameter gradient given `∂f/∂V` and `∂f/∂L` at a forward pass.
    pub fn backward(&self, fwd: &ForwardPass, d_features: &Tensor, d_logits: &Tensor) -> Vec<f64> {
        let Shape { hidden, dim, classes } = self.shape;
        let m = fwd.pixels;
        let o = self.shape.offsets();
        let p = &self.params;
        let mut grad = vec![0.0; p.len()];
        let dl = d_logits.data();
        let v = fwd.features.data();

        gemm_nt_acc(&mut grad[o[4]..o[5]], dl, v, classes, dim, m);
        for i in 0..classes {
            grad[o[5] + i] = dl[i * m..(i + 1) * m].iter().sum();
        }
        let mut dv = gemm_tn(&p[o[4]..o[5]], dl, classes, dim, m);
        dv.iter_mut().zip(d_features.data()).for_each(|(a, b)| *a += b);

        // v = z / Σ|z|  ⇒  ∂z_k = g_k / n − sign(z_k) (Σ_i g_i z_i) / n²
        let z = &fwd.raw;
        let mut dz = vec![0.0; dim * m];
        for j in 0..m {
            let n = fwd.norms[j];
            if n < DEGENERATE_NORM {
                continue;
            }
            let gz: f64 = (0..dim).map(|i| dv[i * m + j] * z[i * m + j]).sum();
            for k in 0..dim {
                let zk = z[k * m + j];
                let s = if zk > 0.0 {
                    1.0
                } else if zk < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                dz[k * m + j] = dv[k * m + j] / n - s * gz / (n * n);
            }
        }
        gemm_nt_acc(&mut grad[o[2]..o[3]], &dz, &fwd.hidden, dim, hidden, m);
        for i in 0..dim {
            grad[o[3] + i] = dz[i * m..(i + 1) * m].iter().sum();
        }
        let mut dh = gemm_tn(&p[o[2]..o[3]], &dz, dim, hidden, m);
        for (g, &hv) in dh.iter_mut().zip(&fwd.hidden) {
            *g *= 1.0 - hv * hv;
        }
        gemm_nt_acc(&mut grad[o[0]..o[1]], &dh, &fwd.patches, hidden, PATCH, m);
        for i in 0..hidden {
            grad[o[1] + i] = dh[i * m..(i + 1) * m].iter().sum();
        }
        grad
    }

    /// Per-pixel argmax class.
    pub fn predict(&self, image: &Tensor) -> TrainResult<Vec<usize>> {
        Ok(derprop_core::tensor::argmax_columns(&self.forward(image)?.logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn shape() -> Shape {
        Shape {
            hidden: 5,
            dim: 4,
            classes: 3,
        }
    }

    fn image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = trial_rng(seed, 9);
        Tensor::new(vec![3, h, w], (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn output_shapes() {
        let m = ToyModel::init(shape(), 1);
        for (h, w) in [(4, 4), (5, 7), (32, 32)] {
            let f = m.forward(&image(0, h, w)).unwrap();
            assert_eq!(f.features.dims(), &[4, h * w]);
            assert_eq!(f.logits.dims(), &[3, h * w]);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let model = ToyModel::init(shape(), 2);
        let img = image(1, 4, 5);
        let mut rng = trial_rng(3, 0);
        let m = 20;
        let gv = Tensor::matrix(4, m, (0..4 * m).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let gl = Tensor::matrix(3, m, (0..3 * m).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        // f(θ) = <gv, V(θ)> + <gl, L(θ)> is linear in the outputs, so its gradient is backward(gv, gl).
        let f = |params: &[f64]| {
            let m = ToyModel::with_params(shape(), params.to_vec()).unwrap();
            let out = m.forward(&img).unwrap();
            let a: f64 = out.features.data().iter().zip(gv.data()).map(|(x, y)| x * y).sum();
            let b: f64 = out.logits.data().iter().zip(gl.data()).map(|(x, y)| x * y).sum();
            a + b
        };
        let fwd = model.forward(&img).unwrap();
        let analytic = model.backward(&fwd, &gv, &gl);
        let theta = Tensor::new(vec![model.params.len()], model.params.clone()).unwrap();
        let report = derprop_core::gradcheck::finite_difference_check(
            |t| Ok(f(t.data())),
            &theta,
            1e-6,
            &Tensor::new(vec![analytic.len()], analytic).unwrap(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn with_params_checks_length() {
        assert!(ToyModel::with_params(shape(), vec![0.0; 3]).is_err());
    }
}
