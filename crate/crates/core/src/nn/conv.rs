use crate::error::{Error, Result};
use crate::nn::{RngStream, Scalar, Tensor};

/// Upper bound on the im2col scratch buffer, in elements. Batches are processed
/// in chunks so that the lowered matrix stays below this size.
const COLS_BUDGET: usize = 1 << 16;

/// Weights and bias of a square-kernel convolution with same-size zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T: Scalar = f32> {
    /// outC x inC x k x k
    pub weight: Tensor<T>,
    /// outC
    pub bias: Tensor<T>,
    pub stride: usize,
}

/// Gradients produced by [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct ConvGrads<T: Scalar = f32> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn cols_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn chunk(&self) -> usize {
        let per_sample = self.cols_rows() * self.out_plane();
        (COLS_BUDGET / per_sample.max(1)).clamp(1, self.batch.max(1))
    }
}

impl<T: Scalar> Conv2d<T> {
    /// Zero-initialized layer. Kernels must be 1x1 or 3x3 and strides 1 or 2.
    pub fn new(in_c: usize, out_c: usize, kernel: usize, stride: usize) -> Result<Self> {
        if !matches!(kernel, 1 | 3) {
            return Err(Error::Config(format!("kernel extent {kernel} not in {{1, 3}}")));
        }
        if !matches!(stride, 1 | 2) {
            return Err(Error::Config(format!("stride {stride} not in {{1, 2}}")));
        }
        if in_c == 0 || out_c == 0 {
            return Err(Error::Config("convolution needs at least one channel".into()));
        }
        Ok(Conv2d {
            weight: Tensor::zeros(&[out_c, in_c, kernel, kernel]),
            bias: Tensor::zeros(&[out_c]),
            stride,
        })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn xavier(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let mut layer = Self::new(in_c, out_c, kernel, stride)?;
        let area = kernel * kernel;
        layer.weight = crate::nn::xavier_init(
            &[out_c, in_c, kernel, kernel],
            in_c * area,
            out_c * area,
            rng,
        )?;
        Ok(layer)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    /// Same-size rule: output extent is `ceil(extent / stride)`.
    pub fn padding(&self) -> usize {
        (self.kernel() - 1) / 2
    }

    pub fn output_extent(&self, extent: usize) -> usize {
        extent.div_ceil(self.stride)
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn cast<U: Scalar>(&self) -> Conv2d<U> {
        Conv2d {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            stride: self.stride,
        }
    }

    fn geometry(&self, input: &Tensor<T>) -> Result<Geometry> {
        let (batch, in_c, in_h, in_w) = input.dims4()?;
        if in_c != self.in_channels() {
            return Err(Error::Contract(format!(
                "convolution expects {} input channels, got {in_c}",
                self.in_channels()
            )));
        }
        let k = self.kernel();
        let pad = self.padding();
        if in_h + 2 * pad < k || in_w + 2 * pad < k {
            return Err(Error::Contract(format!(
                "input {in_h}x{in_w} smaller than kernel {k}x{k} after padding"
            )));
        }
        Ok(Geometry {
            batch,
            in_c,
            in_h,
            in_w,
            out_c: self.out_channels(),
            k,
            stride: self.stride,
            pad,
            out_h: (in_h + 2 * pad - k) / self.stride + 1,
            out_w: (in_w + 2 * pad - k) / self.stride + 1,
        })
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kj − pad` lies
/// inside `[0, in_w)`.
fn valid_span(g: &Geometry, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride).min(g.out_w);
    let limit = g.in_w + g.pad - kj;
    let hi = limit.div_ceil(g.stride).clamp(lo, g.out_w);
    (lo, hi)
}

/// Lowers samples `[first, first + count)` into `cols` (rows = inC·k·k, columns = count·H'·W').
fn im2col<T: Scalar>(g: &Geometry, input: &[T], first: usize, count: usize, cols: &mut [T]) {
    let plane = g.out_plane();
    let width = count * plane;
    let in_plane = g.in_h * g.in_w;
    for s in 0..count {
        let sample = &input[(first + s) * g.in_c * in_plane..][..g.in_c * in_plane];
        for c in 0..g.in_c {
            let chan = &sample[c * in_plane..][..in_plane];
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let row = (c * g.k + ki) * g.k + kj;
                    let dst = &mut cols[row * width + s * plane..][..plane];
                    let (lo, hi) = valid_span(g, kj);
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        let line = &mut dst[oy * g.out_w..][..g.out_w];
                        if iy < 0 || iy >= g.in_h as isize || lo == hi {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &chan[iy as usize * g.in_w..][..g.in_w];
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        let start = lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (v, x) in line[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                                *v = *x;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into the input gradient.
fn col2im<T: Scalar>(g: &Geometry, cols: &[T], first: usize, count: usize, grad_in: &mut [T]) {
    let plane = g.out_plane();
    let width = count * plane;
    let in_plane = g.in_h * g.in_w;
    for s in 0..count {
        let sample = &mut grad_in[(first + s) * g.in_c * in_plane..][..g.in_c * in_plane];
        for c in 0..g.in_c {
            let chan = &mut sample[c * in_plane..][..in_plane];
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let row = (c * g.k + ki) * g.k + kj;
                    let src = &cols[row * width + s * plane..][..plane];
                    let (lo, hi) = valid_span(g, kj);
                    if lo == hi {
                        continue;
                    }
                    let start = lo * g.stride + kj - g.pad;
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let dst = &mut chan[iy as usize * g.in_w..][..g.in_w];
                        let line = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                        for (d, v) in dst[start..].iter_mut().step_by(g.stride).zip(line) {
                            *d += *v;
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded 2-D convolution of a batch x C x H x W tensor.
pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, params: &Conv2d<T>) -> Result<Tensor<T>> {
    let g = params.geometry(input)?;
    let mut output = Tensor::zeros(&[g.batch, g.out_c, g.out_h, g.out_w]);
    let kdim = g.cols_rows();
    let plane = g.out_plane();
    let chunk = g.chunk();
    let mut cols = vec![T::zero(); kdim * chunk * plane];
    let mut prod = vec![T::zero(); g.out_c * chunk * plane];
    let weight = params.weight.data();
    let bias = params.bias.data();
    let out = output.data_mut();

    let mut first = 0;
    while first < g.batch {
        let count = chunk.min(g.batch - first);
        let width = count * plane;
        im2col(&g, input.data(), first, count, &mut cols);
        T::gemm(
            g.out_c,
            kdim,
            width,
            T::one(),
            weight,
            kdim,
            1,
            &cols,
            width,
            1,
            T::zero(),
            &mut prod,
            width,
            1,
        );
        for s in 0..count {
            let dst = &mut out[(first + s) * g.out_c * plane..][..g.out_c * plane];
            for oc in 0..g.out_c {
                let b = bias[oc];
                let src = &prod[oc * width + s * plane..][..plane];
                for (d, v) in dst[oc * plane..][..plane].iter_mut().zip(src) {
                    *d = *v + b;
                }
            }
        }
        first += count;
    }
    Ok(output)
}

/// Gradients of a convolution given the upstream gradient and the forward input.
/// The input gradient is skipped when `need_input_grad` is false.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    params: &Conv2d<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let g = params.geometry(input)?;
    let expected = [g.batch, g.out_c, g.out_h, g.out_w];
    if grad_out.shape() != expected {
        return Err(Error::Contract(format!(
            "upstream gradient shape {:?} differs from forward output {expected:?}",
            grad_out.shape()
        )));
    }
    let kdim = g.cols_rows();
    let plane = g.out_plane();
    let chunk = g.chunk();
    let mut cols = vec![T::zero(); kdim * chunk * plane];
    let mut dy = vec![T::zero(); g.out_c * chunk * plane];
    let mut dcols = if need_input_grad {
        vec![T::zero(); kdim * chunk * plane]
    } else {
        Vec::new()
    };
    let mut grad_w = Tensor::zeros(params.weight.shape());
    let mut grad_b = Tensor::zeros(params.bias.shape());
    let mut grad_in = need_input_grad.then(|| Tensor::zeros(input.shape()));
    let upstream = grad_out.data();

    {
        let gb = grad_b.data_mut();
        for s in 0..g.batch {
            for (oc, acc) in gb.iter_mut().enumerate() {
                let src = &upstream[(s * g.out_c + oc) * plane..][..plane];
                *acc += src.iter().copied().sum::<T>();
            }
        }
    }

    let mut first = 0;
    while first < g.batch {
        let count = chunk.min(g.batch - first);
        let width = count * plane;
        im2col(&g, input.data(), first, count, &mut cols);
        for s in 0..count {
            for oc in 0..g.out_c {
                let src = &upstream[((first + s) * g.out_c + oc) * plane..][..plane];
                dy[oc * width + s * plane..][..plane].copy_from_slice(src);
            }
        }
        // dW += dY · colsᵀ
        T::gemm(
            g.out_c,
            width,
            kdim,
            T::one(),
            &dy,
            width,
            1,
            &cols,
            1,
            width,
            T::one(),
            grad_w.data_mut(),
            kdim,
            1,
        );
        if let Some(gin) = grad_in.as_mut() {
            // dcols = Wᵀ · dY
            T::gemm(
                kdim,
                g.out_c,
                width,
                T::one(),
                params.weight.data(),
                1,
                kdim,
                &dy,
                width,
                1,
                T::zero(),
                &mut dcols,
                width,
                1,
            );
            col2im(&g, &dcols, first, count, gin.data_mut());
        }
        first += count;
    }

    Ok(ConvGrads {
        input: grad_in,
        weight: grad_w,
        bias: grad_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct summation over the receptive field, no lowering.
    fn reference_conv(input: &Tensor<f64>, params: &Conv2d<f64>) -> Tensor<f64> {
        let (n, c, h, w) = input.dims4().unwrap();
        let oc = params.out_channels();
        let k = params.kernel();
        let r = params.stride;
        let p = params.padding() as isize;
        let (oh, ow) = (h.div_ceil(r), w.div_ceil(r));
        let x = input.data();
        let wt = params.weight.data();
        let mut out = vec![0.0; n * oc * oh * ow];
        for b in 0..n {
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = params.bias.data()[o];
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * r + ki) as isize - p;
                                    let ix = (ox * r + kj) as isize - p;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += wt[((o * c + ci) * k + ki) * k + kj]
                                        * x[((b * c + ci) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        out[((b * oc + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(&[n, oc, oh, ow], out).unwrap()
    }

    fn random(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn degenerate_affine() {
        let mut conv = Conv2d::<f64>::new(1, 1, 1, 1).unwrap();
        conv.weight.data_mut()[0] = 3.0;
        conv.bias.data_mut()[0] = -0.5;
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let y = conv2d_forward(&x, &conv).unwrap();
        assert_eq!(y.data(), &[5.5]);

        let up = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let g = conv2d_backward(&up, &x, &conv, true).unwrap();
        assert_eq!(g.weight.data(), &[2.0]);
        assert_eq!(g.bias.data(), &[1.0]);
        assert_eq!(g.input.unwrap().data(), &[3.0]);
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let mut rng = RngStream::new("t", 3);
        let mut conv = Conv2d::<f64>::new(1, 1, 3, 1).unwrap();
        conv.weight.data_mut()[4] = 1.0;
        let x = random(&[2, 1, 6, 5], &mut rng);
        let y = conv2d_forward(&x, &conv).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn strided_matches_quadruple_loop() {
        let mut rng = RngStream::new("t", 11);
        let mut conv = Conv2d::<f64>::new(2, 3, 3, 2).unwrap();
        conv.weight = random(&[3, 2, 3, 3], &mut rng);
        conv.bias = random(&[3], &mut rng);
        let x = random(&[1, 2, 5, 5], &mut rng);
        let y = conv2d_forward(&x, &conv).unwrap();
        let want = reference_conv(&x, &conv);
        assert_eq!(y.shape(), &[1, 3, 3, 3]);
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn f32_matches_reference_on_table_shapes() {
        let mut rng = RngStream::new("t", 5);
        for &(ic, oc, k, r, hw) in &[(1, 4, 3, 1, 16), (4, 6, 3, 2, 16), (6, 5, 3, 2, 8), (5, 3, 1, 1, 4)] {
            let mut conv = Conv2d::<f64>::new(ic, oc, k, r).unwrap();
            conv.weight = random(&[oc, ic, k, k], &mut rng);
            conv.bias = random(&[oc], &mut rng);
            let x = random(&[3, ic, hw, hw], &mut rng);
            let want = reference_conv(&x, &conv);
            let got = conv2d_forward(&x.cast::<f32>(), &conv.cast::<f32>()).unwrap();
            for (a, b) in got.data().iter().zip(want.data()) {
                let rel = (*a as f64 - b).abs() / b.abs().max(1.0);
                assert!(rel <= 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = RngStream::new("t", 2);
        let mut conv = Conv2d::<f64>::new(2, 2, 3, 1).unwrap();
        conv.weight = random(&[2, 2, 3, 3], &mut rng);
        let x = random(&[2, 2, 4, 4], &mut rng);
        let up = Tensor::zeros(&[2, 2, 4, 4]);
        let g = conv2d_backward(&up, &x, &conv, true).unwrap();
        assert!(g.weight.data().iter().all(|v| *v == 0.0));
        assert!(g.bias.data().iter().all(|v| *v == 0.0));
        assert!(g.input.unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = RngStream::new("t", 9);
        let mut conv = Conv2d::<f64>::new(2, 3, 3, 2).unwrap();
        conv.weight = random(&[3, 2, 3, 3], &mut rng);
        conv.bias = random(&[3], &mut rng);
        let x = random(&[2, 2, 5, 5], &mut rng);
        let proj = random(&[2, 3, 3, 3], &mut rng);
        let objective = |x: &Tensor<f64>, c: &Conv2d<f64>| -> f64 {
            let y = conv2d_forward(x, c).unwrap();
            y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
        };
        let g = conv2d_backward(&proj, &x, &conv, true).unwrap();
        let h = 1e-4;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        for i in 0..conv.weight.len() {
            let mut p = conv.clone();
            p.weight.data_mut()[i] += h;
            let mut m = conv.clone();
            m.weight.data_mut()[i] -= h;
            let num = (objective(&x, &p) - objective(&x, &m)) / (2.0 * h);
            assert!(rel(g.weight.data()[i], num) < 1e-3);
        }
        let gin = g.input.unwrap();
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let num = (objective(&p, &conv) - objective(&m, &conv)) / (2.0 * h);
            assert!(rel(gin.data()[i], num) < 1e-3);
        }
    }

    #[test]
    fn channel_mismatch_is_contract_error() {
        let conv = Conv2d::<f32>::new(2, 3, 3, 1).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        assert!(matches!(conv2d_forward(&x, &conv), Err(Error::Contract(_))));
    }

    #[test]
    fn rejects_unsupported_geometry() {
        assert!(Conv2d::<f32>::new(1, 1, 5, 1).is_err());
        assert!(Conv2d::<f32>::new(1, 1, 3, 3).is_err());
    }
}
