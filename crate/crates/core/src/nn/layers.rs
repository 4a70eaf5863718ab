use rand::Rng;

use super::mat::{gemm, MatMut, MatRef};
use super::params::{init_slice, Init, ParamId, ParamLayout};
use super::Real;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn gelu<F: Real>(x: F) -> F {
    F::of(0.5) * x * (F::one() + (x * F::of(INV_SQRT_2)).erf())
}

pub fn gelu_grad<F: Real>(x: F) -> F {
    let cdf = F::of(0.5) * (F::one() + (x * F::of(INV_SQRT_2)).erf());
    let pdf = F::of(INV_SQRT_2PI) * (-(x * x) * F::of(0.5)).exp();
    cdf + x * pdf
}

/// Fully connected layer, `y = x·Wᵀ + b` with `W` stored `out × in`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn register(layout: &mut ParamLayout, name: &str, inputs: usize, outputs: usize) -> Self {
        let w = layout.add(format!("{name}.weight"), &[outputs, inputs], true);
        let b = layout.add(format!("{name}.bias"), &[outputs], false);
        Self { w, b, inputs, outputs }
    }

    pub fn init<F: Real, R: Rng>(&self, layout: &ParamLayout, params: &mut [F], scale: f64, rng: &mut R) {
        init_slice(
            layout.get_mut(params, self.w),
            Init::ScaledUniform {
                fan_in: self.inputs,
                scale,
            },
            rng,
        );
        init_slice(layout.get_mut(params, self.b), Init::Zeros, rng);
    }

    /// `x` is `n × inputs`; returns dense `n × outputs`.
    pub fn forward<F: Real>(&self, layout: &ParamLayout, params: &[F], x: MatRef<'_, F>, n: usize) -> Vec<F> {
        let bias = layout.get(params, self.b);
        let mut y = Vec::with_capacity(n * self.outputs);
        for _ in 0..n {
            y.extend_from_slice(bias);
        }
        let w = MatRef::rows(layout.get(params, self.w), self.outputs, self.inputs);
        gemm(F::one(), x, w.t(), F::one(), MatMut::rows(&mut y, n, self.outputs));
        y
    }

    /// Accumulates parameter gradients into `grads`, and `dy·W` into `dx` when given.
    pub fn backward<F: Real>(
        &self,
        layout: &ParamLayout,
        params: &[F],
        grads: &mut [F],
        x: MatRef<'_, F>,
        dy: &[F],
        n: usize,
        dx: Option<MatMut<'_, F>>,
    ) {
        let dy_m = MatRef::rows(dy, n, self.outputs);
        gemm(
            F::one(),
            dy_m.t(),
            x,
            F::one(),
            MatMut::rows(layout.get_mut(grads, self.w), self.outputs, self.inputs),
        );
        let db = layout.get_mut(grads, self.b);
        for row in dy.chunks_exact(self.outputs) {
            for (g, d) in db.iter_mut().zip(row) {
                *g += *d;
            }
        }
        if let Some(dx) = dx {
            let w = MatRef::rows(layout.get(params, self.w), self.outputs, self.inputs);
            gemm(F::one(), dy_m, w, F::one(), dx);
        }
    }
}

/// 3×3 convolution with padding 1. Activations use a channel-major batch
/// layout `[C][B][H][W]` so one GEMM covers the whole batch.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn plane(&self) -> usize {
        self.height * self.width
    }
    pub fn columns(&self) -> usize {
        self.batch * self.plane()
    }
}

impl Conv2d {
    pub fn register(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let w = layout.add(format!("{name}.weight"), &[cout, cin, 3, 3], true);
        let b = layout.add(format!("{name}.bias"), &[cout], false);
        Self {
            w,
            b,
            in_channels: cin,
            out_channels: cout,
            stride,
        }
    }

    pub fn init<F: Real, R: Rng>(&self, layout: &ParamLayout, params: &mut [F], rng: &mut R) {
        let fan_in = self.in_channels * 9;
        init_slice(layout.get_mut(params, self.w), Init::HeNormal { fan_in }, rng);
        init_slice(layout.get_mut(params, self.b), Init::Zeros, rng);
    }

    pub fn output_dims(&self, d: Dims) -> Dims {
        Dims {
            batch: d.batch,
            height: (d.height - 1) / self.stride + 1,
            width: (d.width - 1) / self.stride + 1,
        }
    }

    fn im2col<F: Real>(&self, x: &[F], d: Dims, o: Dims) -> Vec<F> {
        let n = o.columns();
        let mut cols = vec![F::zero(); self.in_channels * 9 * n];
        for ci in 0..self.in_channels {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut cols[((ci * 9) + ky * 3 + kx) * n..][..n];
                    for b in 0..d.batch {
                        let src = &x[(ci * d.batch + b) * d.plane()..][..d.plane()];
                        for oy in 0..o.height {
                            let iy = (oy * self.stride + ky) as isize - 1;
                            if iy < 0 || iy >= d.height as isize {
                                continue;
                            }
                            let src_row = &src[iy as usize * d.width..][..d.width];
                            let dst = &mut row[b * o.plane() + oy * o.width..][..o.width];
                            for (ox, out) in dst.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - 1;
                                if ix >= 0 && ix < d.width as isize {
                                    *out = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<F: Real>(&self, cols: &[F], d: Dims, o: Dims, dx: &mut [F]) {
        let n = o.columns();
        for ci in 0..self.in_channels {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &cols[((ci * 9) + ky * 3 + kx) * n..][..n];
                    for b in 0..d.batch {
                        let dst = &mut dx[(ci * d.batch + b) * d.plane()..][..d.plane()];
                        for oy in 0..o.height {
                            let iy = (oy * self.stride + ky) as isize - 1;
                            if iy < 0 || iy >= d.height as isize {
                                continue;
                            }
                            let dst_row = &mut dst[iy as usize * d.width..][..d.width];
                            let src = &row[b * o.plane() + oy * o.width..][..o.width];
                            for (ox, g) in src.iter().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - 1;
                                if ix >= 0 && ix < d.width as isize {
                                    dst_row[ix as usize] += *g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Returns the pre-activation output and the im2col buffer needed for backward.
    pub fn forward<F: Real>(&self, layout: &ParamLayout, params: &[F], x: &[F], d: Dims) -> (Vec<F>, Vec<F>, Dims) {
        assert_eq!(x.len(), self.in_channels * d.columns(), "conv input size");
        let o = self.output_dims(d);
        let n = o.columns();
        let k = self.in_channels * 9;
        let cols = self.im2col(x, d, o);
        let bias = layout.get(params, self.b);
        let mut y = Vec::with_capacity(self.out_channels * n);
        for &bc in bias {
            y.extend(std::iter::repeat_n(bc, n));
        }
        let w = MatRef::rows(layout.get(params, self.w), self.out_channels, k);
        gemm(
            F::one(),
            w,
            MatRef::rows(&cols, k, n),
            F::one(),
            MatMut::rows(&mut y, self.out_channels, n),
        );
        (y, cols, o)
    }

    /// Accumulates weight gradients; returns the input gradient when `need_dx`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<F: Real>(
        &self,
        layout: &ParamLayout,
        params: &[F],
        grads: &mut [F],
        cols: &[F],
        dy: &[F],
        d: Dims,
        o: Dims,
        need_dx: bool,
    ) -> Option<Vec<F>> {
        let n = o.columns();
        let k = self.in_channels * 9;
        let dy_m = MatRef::rows(dy, self.out_channels, n);
        gemm(
            F::one(),
            dy_m,
            MatRef::rows(cols, k, n).t(),
            F::one(),
            MatMut::rows(layout.get_mut(grads, self.w), self.out_channels, k),
        );
        let db = layout.get_mut(grads, self.b);
        for (g, row) in db.iter_mut().zip(dy.chunks_exact(n)) {
            *g += row.iter().copied().sum::<F>();
        }
        if !need_dx {
            return None;
        }
        let mut dcols = vec![F::zero(); k * n];
        let w = MatRef::rows(layout.get(params, self.w), self.out_channels, k);
        gemm(F::one(), w.t(), dy_m, F::zero(), MatMut::rows(&mut dcols, k, n));
        let mut dx = vec![F::zero(); self.in_channels * d.columns()];
        self.col2im(&dcols, d, o, &mut dx);
        Some(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution on a single `[C][H][W]` image.
    fn naive_conv(x: &[f64], w: &[f64], b: &[f64], cin: usize, cout: usize, h: usize, wd: usize, s: usize) -> Vec<f64> {
        let (ho, wo) = ((h - 1) / s + 1, (wd - 1) / s + 1);
        let mut y = vec![0.0; cout * ho * wo];
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * s + ky) as isize - 1;
                                let ix = (ox * s + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w[((co * cin + ci) * 3 + ky) * 3 + kx]
                                        * x[(ci * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                    }
                    y[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_for_each_stride() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for stride in [1, 2] {
            let mut layout = ParamLayout::default();
            let conv = Conv2d::register(&mut layout, "c", 2, 3, stride);
            let mut params = vec![0.0f64; layout.len()];
            conv.init(&layout, &mut params, &mut rng);
            layout.get_mut(&mut params, conv.b).copy_from_slice(&[0.1, -0.2, 0.3]);
            let d = Dims {
                batch: 1,
                height: 5,
                width: 7,
            };
            let x: Vec<f64> = (0..2 * 35).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.4).collect();
            let (y, _, _) = conv.forward(&layout, &params, &x, d);
            let expect = naive_conv(
                &x,
                layout.get(&params, conv.w),
                layout.get(&params, conv.b),
                2,
                3,
                5,
                7,
                stride,
            );
            assert_eq!(y.len(), expect.len());
            for (a, b) in y.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5f64] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
        assert_eq!(gelu(0.0f64), 0.0);
    }
}
